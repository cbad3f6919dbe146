import math

import numpy as np
import pytest
from gradtools import module_grad_check, param_slots
from hypothesis import given, settings
from hypothesis import strategies as st

from cpmamba import autodiff as ad
from cpmamba.autodiff import DiffArray, backward
from cpmamba.mamba import MambaBlock, MambaConfig, discretize, reference_scan, selective_scan


def random_scan_inputs(rng, L, Di, N):
    x = rng.standard_normal((L, Di))
    A = -rng.uniform(0.1, 3.0, (Di, N))
    Abar, Bbar = discretize(rng.standard_normal((L, Di)), A, rng.standard_normal((L, N)))
    return x, Abar, Bbar, rng.standard_normal((L, N))


class TestConfig:
    def test_defaults(self):
        cfg = MambaConfig(D=32)
        assert cfg.D_inner == 64
        assert cfg.d_tr == 2
        assert cfg.d_state == 16

    @pytest.mark.parametrize("field", ["D", "d_state", "d_tr", "k_conv"])
    def test_rejects_zero(self, field):
        kw = {"D": 4, field: 0}
        with pytest.raises(ValueError):
            MambaConfig(**kw)

    def test_state_matrix_negative(self):
        block = MambaBlock(MambaConfig(D=4, d_state=5), np.random.default_rng(0))
        A = -np.exp(block.A_log.value)
        assert np.all(A < 0)
        np.testing.assert_allclose(-A[0], np.geomspace(1, 5, 5), rtol=1e-6)


class TestDiscretize:
    def test_zero_raw_step(self):
        Abar, Bbar = discretize(np.zeros((2, 3)), -np.ones((3, 1)), np.ones((2, 1)))
        np.testing.assert_allclose(Bbar, math.log(2), rtol=1e-15)
        np.testing.assert_allclose(Abar, 0.5, rtol=1e-15)

    def test_zero_input_matrix(self):
        _, Bbar = discretize(np.ones((2, 3)), -np.ones((3, 2)), np.zeros((2, 2)))
        assert not np.any(Bbar)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-30, 30))
    def test_decay_in_unit_interval(self, seed, shift):
        rng = np.random.default_rng(seed)
        A = -rng.uniform(1e-3, 10, (3, 4))
        Abar, _ = discretize(rng.standard_normal((5, 3)) + shift, A, rng.standard_normal((5, 4)))
        assert np.all(Abar <= 1.0) and np.all(Abar >= 0.0)


class TestScan:
    def test_single_step(self):
        rng = np.random.default_rng(0)
        delta_raw, B, C, x = rng.standard_normal((1, 3)), rng.standard_normal((1, 2)), rng.standard_normal((1, 2)), rng.standard_normal((1, 3))
        Abar, Bbar = discretize(delta_raw, -np.ones((3, 2)), B)
        delta = np.logaddexp(0, delta_raw[0])
        expected = (C[0] @ B[0]) * delta * x[0]
        np.testing.assert_allclose(selective_scan(x, Abar, Bbar, C), expected[None], rtol=1e-12)

    def test_unit_decay_is_prefix_sum(self):
        rng = np.random.default_rng(1)
        L, Di, N = 9, 2, 3
        x, Bbar, C = rng.standard_normal((L, Di)), rng.standard_normal((L, Di, N)), rng.standard_normal((L, N))
        Abar = np.ones((L, Di, N))
        states = np.cumsum(Bbar * x[:, :, None], axis=0)
        expected = np.einsum("ldn,ln->ld", states, C)
        np.testing.assert_allclose(selective_scan(x, Abar, Bbar, C), expected, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(reference_scan(x, Abar, Bbar, C), expected, rtol=1e-10, atol=1e-12)

    def test_zero_input_matrix_gives_zero(self):
        rng = np.random.default_rng(2)
        x, Abar, _, C = random_scan_inputs(rng, 5, 3, 2)
        assert not np.any(selective_scan(x, Abar, np.zeros_like(Abar), C))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 5), st.integers(1, 4))
    def test_matches_reference(self, seed, L, Di, N):
        args = random_scan_inputs(np.random.default_rng(seed), L, Di, N)
        ref = reference_scan(*args)
        np.testing.assert_allclose(selective_scan(*args), ref, rtol=1e-6, atol=1e-12 * (1 + np.abs(ref).max()))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 10), st.integers(1, 4), st.integers(1, 3))
    def test_fused_kernel_matches_reference(self, seed, L, Di, N):
        # the tape scan takes the continuous-time parameters and discretizes inside
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, L, Di))
        delta = rng.uniform(0.01, 2.0, (1, L, Di))
        A = -rng.uniform(0.1, 3.0, (Di, N))
        B, C = rng.standard_normal((1, L, N)), rng.standard_normal((1, L, N))
        fused = ad.selective_scan(x, delta, A, B, C).value[0]
        Abar = np.exp(delta[0][:, :, None] * A[None])
        Bbar = delta[0][:, :, None] * B[0][:, None, :]
        ref = reference_scan(x[0], Abar, Bbar, C[0])
        np.testing.assert_allclose(fused, ref, rtol=1e-6, atol=1e-12 * (1 + np.abs(ref).max()))

    def test_causal_perturbation(self):
        rng = np.random.default_rng(3)
        x, Abar, Bbar, C = random_scan_inputs(rng, 10, 3, 2)
        base = selective_scan(x, Abar, Bbar, C)
        x2 = x.copy()
        x2[6] += 5.0
        moved = selective_scan(x2, Abar, Bbar, C)
        np.testing.assert_array_equal(base[:6], moved[:6])
        assert np.any(base[6:] != moved[6:])

    def test_long_sequence_stays_bounded(self):
        rng = np.random.default_rng(4)
        L, Di, N = 4096, 4, 8
        x = rng.uniform(-1, 1, (1, L, Di)).astype(np.float32)
        delta = rng.uniform(0, 5, (1, L, Di)).astype(np.float32)
        A = -rng.uniform(1e-3, 16, (Di, N)).astype(np.float32)
        B = rng.uniform(-1, 1, (1, L, N)).astype(np.float32)
        C = rng.uniform(-1, 1, (1, L, N)).astype(np.float32)
        y = ad.selective_scan(x, delta, A, B, C).value
        assert y.dtype == np.float32
        assert np.all(np.isfinite(y))
        # each state is bounded by sum_t |Bbar_t x_t| <= L * 5 and |C| <= 1
        assert np.abs(y).max() <= N * L * 5


class TestBlock:
    def make(self, D=4, d_state=3, seed=0, dtype=np.float64):
        return MambaBlock(MambaConfig(D=D, d_state=d_state), np.random.default_rng(seed), dtype)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 12), st.integers(1, 9), st.integers(1, 5))
    def test_shape_preserved(self, B, L, D, N):
        block = MambaBlock(MambaConfig(D=D, d_state=N), np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((B, L, D)).astype(np.float32)
        assert block(DiffArray(x)).shape == (B, L, D)

    def test_zero_input_zero_output(self):
        block = self.make()
        assert not np.any(block(DiffArray(np.zeros((2, 5, 4)))).value)

    def test_zero_projections_zero_output(self):
        block = self.make()
        block.in_proj.weight.value[:] = 0
        x = np.random.default_rng(0).standard_normal((1, 5, 4))
        assert not np.any(block(DiffArray(x)).value)

    def test_rejects_wrong_width(self):
        with pytest.raises(ValueError, match="mamba"):
            self.make()(DiffArray(np.zeros((1, 5, 3))))

    def test_parameter_names(self):
        names = [n for n, _ in self.make().named_parameters()]
        assert names == [
            "in_proj.weight", "conv_weight", "conv_bias", "x_proj.weight",
            "dt_proj.weight", "dt_proj.bias", "A_log", "out_proj.weight",
        ]  # fmt: skip

    def test_parameter_count(self):
        D, Di, N, R, k = 4, 8, 3, 1, 4
        expected = D * 2 * Di + Di * k + Di + Di * (R + 2 * N) + R * Di + Di + Di * N + Di * D
        assert self.make().param_count() == expected

    def test_gradient_check(self):
        block = self.make()
        x = np.random.default_rng(5).standard_normal((1, 6, 4))
        assert module_grad_check(block, [x], lambda m, v: m(v)) < 1e-4

    def test_causal_gradients(self):
        block = self.make()
        x = DiffArray(np.random.default_rng(6).standard_normal((1, 8, 4)), requires_grad=True)
        y = block(x)
        backward(ad.sum_(y[:, 3]))
        assert not np.any(x.grad[:, 4:])
        assert np.any(x.grad[:, :4])

    def test_all_parameters_reached(self):
        block = self.make()
        x = DiffArray(np.random.default_rng(7).standard_normal((2, 5, 4)))
        backward(ad.sum_(ad.mul(block(x), block(x))))
        for owner, name, _ in param_slots(block):
            assert np.any(getattr(owner, name).grad), name
