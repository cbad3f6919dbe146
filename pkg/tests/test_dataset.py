import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpmamba.channel import CarrierConfig, SceneConfig
from cpmamba.dataset import (
    MAGIC,
    BadMagic,
    Dataset,
    DimensionMismatch,
    GenConfig,
    TruncatedFile,
    VersionMismatch,
    derive_seed,
    from_bytes,
    generate_dataset,
    generate_sample,
    read_dataset,
    split,
    splitmix64,
    to_bytes,
    write_dataset,
)
from cpmamba.geometry import ArrayKind

SMALL = GenConfig(
    kind=ArrayKind("NA", (2, 6)),
    carrier=CarrierConfig(K=4),
    P=2,
    N_RF=2,
    n_samples=12,
    seed=3,
)
TINY = GenConfig(
    kind=ArrayKind("CA", (2,)),
    carrier=CarrierConfig(K=1),
    scene=SceneConfig(L_min=0, L_max=0),
    P=1,
    N_RF=1,
    n_samples=10_000,
    seed=1,
)


@pytest.fixture(scope="module")
def small_ds():
    return generate_dataset(SMALL)


class TestSeeds:
    def test_splitmix_reference_values(self):
        # first outputs of the reference splitmix64 generator seeded with 0
        state, out = 0, []
        for _ in range(3):
            out.append(splitmix64(state))
            state = (state + 0x9E3779B97F4A7C15) & (2**64 - 1)
        assert out == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]

    def test_derive_is_stable_and_distinct(self):
        seeds = {derive_seed(7, i) for i in range(1000)}
        assert len(seeds) == 1000
        assert derive_seed(7, 5) == derive_seed(7, 5)
        assert derive_seed(7, 5) != derive_seed(8, 5)
        assert derive_seed(7, 5, 1) != derive_seed(7, 5, 0)


class TestGenerateSample:
    def test_deterministic(self):
        a = generate_sample(123, SMALL)
        b = generate_sample(123, SMALL)
        assert a.equals(b)

    def test_noiseless_pure_los(self):
        cfg = GenConfig(
            kind=SMALL.kind, carrier=SMALL.carrier, scene=SceneConfig(L_min=0, L_max=0), P=2, N_RF=2,
            snr_min=400.0, snr_max=400.0, n_samples=1,
        )  # fmt: skip
        rec = generate_sample(5, cfg)
        assert not np.any(rec.h_nlos)
        W = cfg.combiner().stacked
        np.testing.assert_allclose(rec.Y, rec.h_los.astype(complex) @ W.T, rtol=1e-6, atol=1e-12)

    def test_record_invariants(self, small_ds):
        for rec in small_ds.records:
            np.testing.assert_array_equal(rec.h, rec.h_los + rec.h_nlos)
            np.testing.assert_allclose(rec.C, [rec.r * np.cos(rec.theta), rec.r * np.sin(rec.theta)], atol=1e-12)
            assert SMALL.snr_min <= rec.snr_db <= SMALL.snr_max
            assert rec.sigma2 > 0

    def test_radius_distribution(self):
        r = np.array([rec.r for rec in generate_dataset(TINY).records])
        assert r.min() >= 0.1 and r.max() <= 10.0
        assert abs(r.mean() - 5.05) < 0.1


class TestContainer:
    def test_round_trip(self, small_ds, tmp_path):
        path = tmp_path / "d.xlmd"
        digest = write_dataset(small_ds, path)
        assert digest == hashlib.sha256(path.read_bytes()).hexdigest()
        back = read_dataset(path)
        assert back.config == small_ds.config
        assert back.layout == small_ds.layout
        np.testing.assert_array_equal(back.combiner.W, small_ds.combiner.W)
        assert len(back) == len(small_ds)
        for a, b in zip(back.records, small_ds.records):
            assert a.equals(b)

    def test_same_config_same_bytes(self, small_ds):
        assert to_bytes(generate_dataset(SMALL)) == to_bytes(small_ds)

    def test_header_starts_with_magic(self, small_ds):
        data = to_bytes(small_ds)
        assert data[:4] == MAGIC
        assert struct.unpack("<I", data[4:8]) == (1,)

    def test_bad_magic(self, small_ds):
        data = bytearray(to_bytes(small_ds))
        data[0:4] = b"NOPE"
        with pytest.raises(BadMagic) as err:
            from_bytes(bytes(data))
        assert err.value.code == "bad-magic"

    def test_version_mismatch(self, small_ds):
        data = bytearray(to_bytes(small_ds))
        data[4:8] = struct.pack("<I", 99)
        with pytest.raises(VersionMismatch) as err:
            from_bytes(bytes(data))
        assert err.value.code == "version-mismatch"

    @pytest.mark.parametrize("cut", [6, 100, -1, -500])
    def test_truncated(self, small_ds, cut):
        data = to_bytes(small_ds)
        with pytest.raises(TruncatedFile) as err:
            from_bytes(data[:cut])
        assert err.value.code == "truncated-file"

    def test_trailing_bytes(self, small_ds):
        with pytest.raises(DimensionMismatch):
            from_bytes(to_bytes(small_ds) + b"\0")

    def test_empty_dataset(self, small_ds):
        empty = Dataset(small_ds.config, small_ds.layout, small_ds.combiner, [])
        back = from_bytes(to_bytes(empty))
        assert len(back) == 0
        assert back.config == small_ds.config

    def test_error_codes_distinct(self):
        codes = {c.code for c in (BadMagic, VersionMismatch, TruncatedFile, DimensionMismatch)}
        assert len(codes) == 4


class TestSplit:
    def make(self, n):
        recs = generate_dataset(GenConfig(**{**TINY.__dict__, "n_samples": n})).records
        return Dataset(TINY, TINY.layout(), TINY.combiner(), recs)

    def test_sizes(self):
        tr, va, te = split(self.make(100), (0.8, 0.1, 0.1), seed=0)
        assert (len(tr), len(va), len(te)) == (80, 10, 10)

    def test_partition(self):
        ds = self.make(100)
        parts = split(ds, (0.8, 0.1, 0.1), seed=4)
        seeds = [set(r.seed for r in p.records) for p in parts]
        assert set.union(*seeds) == {r.seed for r in ds.records}
        assert sum(len(s) for s in seeds) == 100

    def test_same_seed_same_partition(self):
        ds = self.make(40)
        a = split(ds, (0.5, 0.25, 0.25), seed=9)
        b = split(ds, (0.5, 0.25, 0.25), seed=9)
        for pa, pb in zip(a, b):
            assert [r.seed for r in pa.records] == [r.seed for r in pb.records]

    @pytest.mark.parametrize("fr", [(0.5, 0.5, 0.5), (1.2, -0.1, -0.1), (0.5, 0.5)])
    def test_invalid_fractions(self, fr):
        with pytest.raises(ValueError):
            split(self.make(4), fr)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 60), st.floats(0, 1), st.floats(0, 1), st.integers(0, 1000))
    def test_partition_property(self, n, a, b, seed):
        lo, hi = sorted((a, b))
        ds = self.make(n)
        parts = split(ds, (lo, hi - lo, 1 - hi), seed)
        seeds = [r.seed for p in parts for r in p.records]
        assert sorted(seeds) == sorted(r.seed for r in ds.records)
