import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpmamba.channel import CarrierConfig, SceneConfig, los_channel
from cpmamba.dataset import Dataset, GenConfig, generate_dataset
from cpmamba.evaluation import (
    EmptyInput,
    Grid,
    GridLocator,
    GridMethod,
    LsMethod,
    MetricRow,
    OracleMethod,
    grid_position,
    ls_estimate,
    min_norm_operator,
    mpe,
    nmse,
    observations_at_snr,
    read_metrics_csv,
    sweep,
    write_metrics_csv,
)
from cpmamba.geometry import ArrayKind, build_layout, half_wavelength
from cpmamba.pilots import draw_combiner

D = half_wavelength(28e9)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


class TestMpe:
    def test_identical(self):
        C = np.array([[1.0, -2.0], [3.0, 0.5]])
        assert mpe(C, C) == 0.0

    def test_three_four_five(self):
        assert mpe([[0.0, 0.0]], [[3.0, 4.0]]) == 5.0

    def test_mean_of_distances(self):
        assert mpe([[1.0, 0.0], [0.0, 3.0]], [[0.0, 0.0], [0.0, 0.0]]) == 2.0

    def test_empty(self):
        with pytest.raises(EmptyInput):
            mpe(np.zeros((0, 2)), np.zeros((0, 2)))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mpe(np.zeros((2, 2)), np.zeros((3, 2)))


class TestNmse:
    def setup_method(self):
        self.H = crandn(np.random.default_rng(0), 3, 4, 5)

    def test_identities(self):
        assert nmse(self.H, self.H) == 0.0
        assert nmse(np.zeros_like(self.H), self.H) == pytest.approx(1.0, rel=1e-15)
        assert nmse(2 * self.H, self.H) == pytest.approx(1.0, rel=1e-15)

    def test_mean_of_ratios(self):
        H = np.stack([np.ones((2, 2)), 10 * np.ones((2, 2))]).astype(complex)
        H_hat = H + 1.0
        assert nmse(H_hat, H) == pytest.approx((1.0 + 0.01) / 2)

    def test_single_sample_form(self):
        assert nmse(self.H[0] * 0.5, self.H[0]) == pytest.approx(0.25)

    def test_zero_truth(self):
        with pytest.raises(ZeroDivisionError):
            nmse(self.H, np.zeros_like(self.H))

    def test_empty(self):
        with pytest.raises(EmptyInput):
            nmse(np.zeros((0, 2, 2)), np.zeros((0, 2, 2)))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-3, 1e3), st.floats(-math.pi, math.pi), st.integers(0, 1000))
    def test_scale_invariance(self, mag, ang, seed):
        rng = np.random.default_rng(seed)
        H, H_hat = crandn(rng, 2, 3, 4), crandn(rng, 2, 3, 4)
        a = mag * np.exp(1j * ang)
        assert nmse(a * H_hat, a * H) == pytest.approx(nmse(H_hat, H), rel=1e-9)


class TestLeastSquares:
    def test_square_system_exact(self):
        rng = np.random.default_rng(1)
        W = crandn(rng, 8, 8)
        h = crandn(rng, 3, 8)
        est = ls_estimate(h @ W.T, W)
        assert np.linalg.norm(est - h) / np.linalg.norm(h) < 1e-8

    def test_default_shape_exact_when_determined(self):
        cs = draw_combiner(np.random.default_rng(2), 4, 4, 16)
        h = crandn(np.random.default_rng(3), 5, 16)
        assert np.linalg.norm(ls_estimate(h @ cs.stacked.T, cs.stacked) - h) / np.linalg.norm(h) < 1e-8

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 6), st.integers(0, 10_000))
    def test_matches_normal_equations(self, M, extra, seed):
        rng = np.random.default_rng(seed)
        N = M + extra
        W = crandn(rng, M, N)
        y = crandn(rng, M)
        # minimum-norm solution: x = W^H z with (W W^H) z = y, solved by brute-force Gaussian elimination
        G = W @ W.conj().T
        aug = np.concatenate([G, y[:, None]], axis=1)
        for c in range(M):
            piv = c + np.argmax(np.abs(aug[c:, c]))
            aug[[c, piv]] = aug[[piv, c]]
            aug[c] /= aug[c, c]
            for r in range(M):
                if r != c:
                    aug[r] -= aug[r, c] * aug[c]
        ref = W.conj().T @ aug[:, -1]
        est = ls_estimate(y, W)
        assert np.linalg.norm(est - ref) <= 1e-8 * max(1.0, np.linalg.norm(ref))

    def test_underdetermined_is_row_space_projection(self):
        rng = np.random.default_rng(4)
        cs = draw_combiner(rng, 16, 4, 128)
        W = cs.stacked.astype(np.complex128)
        h = crandn(rng, 6, 1, 128)  # six samples of one subcarrier
        est = ls_estimate(h @ W.T, W)
        np.testing.assert_allclose(est @ W.T, h @ W.T, atol=1e-9)
        # energy outside the row space of W, found by an independent SVD
        _, _, Vh = np.linalg.svd(W)
        null = Vh[64:].conj().T
        outside = np.sum(np.abs(h[:, 0] @ null.conj()) ** 2, axis=1) / np.sum(np.abs(h[:, 0]) ** 2, axis=1)
        assert nmse(est, h) == pytest.approx(np.mean(outside), rel=1e-8)
        assert nmse(est, h) > 0.3

    def test_linearity(self):
        rng = np.random.default_rng(5)
        W = crandn(rng, 4, 9)
        Y = crandn(rng, 3, 4)
        a = 2.5 - 1.5j
        np.testing.assert_allclose(ls_estimate(a * Y, W), a * ls_estimate(Y, W), rtol=1e-12)

    def test_rank_deficient(self):
        W = np.ones((2, 4), complex)
        with pytest.raises(np.linalg.LinAlgError):
            min_norm_operator(W)


def small_problem(K=6, N=16, seed=0):
    # a sparse array keeps range resolvable out to a few meters
    lay = build_layout(ArrayKind("NA", (2, N - 2)), D)
    cfg = CarrierConfig(K=K)
    cs = draw_combiner(np.random.default_rng(seed), 4, 2, N)
    return lay, cfg, cs.stacked


class TestGrid:
    def test_default_lattice(self):
        g = Grid.default()
        assert len(g.r) == 60 and len(g.theta) == 90
        assert g.r[0] == pytest.approx(0.1) and g.r[-1] == pytest.approx(10.0)
        assert g.theta[0] == pytest.approx(-math.pi / 2) and g.theta[-1] == 0.0
        r, t = g.points()
        assert r[1] == r[0] and t[1] > t[0]

    def test_on_grid_recovery(self):
        lay, cfg, W = small_problem()
        grid = Grid(np.geomspace(0.3, 3.0, 12), np.linspace(-1.4, -0.1, 15))
        loc = GridLocator(W, lay, cfg, grid)
        for i, j in [(0, 0), (3, 7), (11, 14), (6, 2)]:
            r, t = grid.r[i], grid.theta[j]
            Y = los_channel(lay, r, t, cfg) @ W.T
            r_hat, t_hat = loc.locate_polar(Y)
            assert (r_hat[0], t_hat[0]) == (r, t)
            np.testing.assert_array_equal(grid_position(Y, W, lay, cfg, grid), [r * math.cos(t), r * math.sin(t)])

    def test_one_point_grid(self):
        lay, cfg, W = small_problem()
        grid = Grid(np.array([2.0]), np.array([-0.3]))
        Y = crandn(np.random.default_rng(0), cfg.K, W.shape[0])
        np.testing.assert_allclose(grid_position(Y, W, lay, cfg, grid), [2 * math.cos(-0.3), 2 * math.sin(-0.3)])

    def test_objective_matches_independent_scorer(self):
        lay, cfg, W = small_problem(K=3, N=8)
        grid = Grid(np.array([0.7, 2.0, 6.0]), np.array([-1.2, -0.6, -0.2]))
        Y = crandn(np.random.default_rng(1), cfg.K, W.shape[0])
        scores = GridLocator(W, lay, cfg, grid).scores(Y)[0]
        f = cfg.frequencies()
        ref = []
        for r in grid.r:
            for t in grid.theta:
                total = 0.0
                for k in range(cfg.K):
                    d = np.sqrt(r**2 + lay.positions**2 - 2 * r * lay.positions * math.cos(t))
                    wa = W @ np.exp(-2j * math.pi * f[k] * d / 299_792_458.0)
                    total += abs(np.vdot(wa, Y[k])) / np.linalg.norm(wa)
                ref.append(total)
        np.testing.assert_allclose(scores, ref, rtol=1e-5)

    def test_ties_go_to_first_point(self):
        lay, cfg, W = small_problem()
        grid = Grid(np.array([1.0, 1.0]), np.array([-0.5]))
        loc = GridLocator(W, lay, cfg, grid)
        Y = los_channel(lay, 1.0, -0.5, cfg) @ W.T
        assert np.argmax(loc.scores(Y)[0]) == 0

    def test_empty_grid(self):
        lay, cfg, W = small_problem()
        with pytest.raises(ValueError):
            GridLocator(W, lay, cfg, Grid(np.array([]), np.array([0.0])))


@pytest.fixture(scope="module")
def sweep_set():
    cfg = GenConfig(kind=ArrayKind("NA", (2, 14)), carrier=CarrierConfig(K=8), scene=SceneConfig(nlos_scale=0.01),
                    P=4, N_RF=4, n_samples=256, seed=7)  # fmt: skip
    return generate_dataset(cfg)


class TestSweep:
    def test_oracle_is_exact(self, sweep_set):
        rows = sweep(sweep_set, [OracleMethod()], [-10.0, 20.0])
        assert all(r.mpe_m == 0.0 and r.nmse == 0.0 for r in rows)

    def test_row_count_and_order(self, sweep_set):
        small = Dataset(sweep_set.config, sweep_set.layout, sweep_set.combiner, sweep_set.records[:4])
        rows = sweep(small, [OracleMethod(), LsMethod()], [0.0, 10.0, 20.0])
        assert len(rows) == 6
        assert [(r.method, r.snr_db) for r in rows[:2]] == [("oracle", 0.0), ("ls", 0.0)]
        assert math.isnan(rows[1].mpe_m) and rows[1].n == 4

    def test_empty_dataset(self, sweep_set):
        empty = Dataset(sweep_set.config, sweep_set.layout, sweep_set.combiner, [])
        with pytest.raises(EmptyInput):
            sweep(empty, [OracleMethod()], [0.0])

    def test_noise_shared_across_snr(self, sweep_set):
        small = Dataset(sweep_set.config, sweep_set.layout, sweep_set.combiner, sweep_set.records[:3])
        clean = np.stack([r.h @ small.combiner.stacked.T for r in small.records])
        n0 = observations_at_snr(small, 0.0, seed=1) - clean
        n20 = observations_at_snr(small, 20.0, seed=1) - clean
        np.testing.assert_allclose(n20, n0 / 10.0, rtol=1e-6, atol=1e-12)
        other = observations_at_snr(small, 0.0, seed=2) - clean
        assert not np.allclose(other, n0)

    def test_grid_improves_with_snr(self, sweep_set):
        rows = sweep(sweep_set, [GridMethod()], [-10.0, 20.0])
        assert rows[0].mpe_m >= rows[1].mpe_m

    def test_grid_on_pure_los(self, sweep_set):
        cfg = GenConfig(kind=ArrayKind("NA", (4, 124)), carrier=CarrierConfig(K=8), scene=SceneConfig(L_min=0, L_max=0),
                        P=4, N_RF=4, n_samples=32, seed=3)  # fmt: skip
        ds = generate_dataset(cfg)
        C, _ = GridMethod()(observations_at_snr(ds, 30.0), ds)
        err = np.linalg.norm(C - ds.stack("C"), axis=1)
        # typical users land within a cell or two of the 60 x 90 lattice;
        # off-grid far users can lock onto a grating lobe, so check the median
        assert np.median(err) < 0.3

    def test_ls_improves_with_snr(self, sweep_set):
        rows = sweep(sweep_set, [LsMethod()], [-10.0, 20.0])
        assert rows[0].nmse > rows[1].nmse


class TestCsv:
    def test_round_trip(self, tmp_path):
        rows = [MetricRow("ls", -10.0, math.nan, 0.5, 12), MetricRow("grid", 20.0, 0.25, 1e-3, 12)]
        path = tmp_path / "m.csv"
        write_metrics_csv(rows, path)
        assert path.read_text().splitlines()[0] == "method,snr_db,mpe_m,nmse,nmse_db,n"
        back = read_metrics_csv(path)
        assert back[1] == rows[1]
        assert math.isnan(back[0].mpe_m) and back[0].nmse == 0.5

    def test_db_column(self):
        assert MetricRow("x", 0.0, 0.0, 0.01, 1).nmse_db == pytest.approx(-20.0)
        assert MetricRow("x", 0.0, 0.0, 0.0, 1).nmse_db == -math.inf

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.csv").write_text("")
        with pytest.raises(EmptyInput):
            read_metrics_csv(tmp_path / "e.csv")

    def test_header_only(self, tmp_path):
        (tmp_path / "h.csv").write_text("method,snr_db,mpe_m,nmse,nmse_db,n\n")
        with pytest.raises(EmptyInput):
            read_metrics_csv(tmp_path / "h.csv")

    def test_bad_header(self, tmp_path):
        (tmp_path / "b.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_metrics_csv(tmp_path / "b.csv")
