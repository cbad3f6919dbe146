"""Deterministic sample generation and the XLMD binary dataset container.

File layout (all little-endian)::

    magic      4s   b"XLMD"
    version    u32
    gen block  fixed-order scalars, see ``_GEN_FMT``
    layout     u8 kind tag, 3 x i32 params, f64 eta, f64 d
    combiner   3 x u32 (P, N_RF, N) then P*N_RF*N complex entries as
               interleaved f32 (re, im), row-major over the stacked matrix
    count      u64
    samples    ``count`` fixed-size records, see ``record_dtype``

Arrays inside samples are interleaved f32 (re, im), row-major
[subcarrier][element].
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .channel import CarrierConfig, SceneConfig, UePosition, sample_scatterers, synthesize_channel
from .geometry import KIND_TAGS, ArrayKind, ArrayLayout, build_layout, half_wavelength
from .pilots import CombinerSet, draw_combiner, observe, snr_to_sigma2

MAGIC = b"XLMD"
VERSION = 1

_MASK64 = (1 << 64) - 1
COMBINER_STREAM = 0xC0B1


class DatasetError(Exception):
    code = "dataset-error"


class BadMagic(DatasetError):
    code = "bad-magic"


class VersionMismatch(DatasetError):
    code = "version-mismatch"


class TruncatedFile(DatasetError):
    code = "truncated-file"


class DimensionMismatch(DatasetError):
    code = "dimension-mismatch"


def splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, index: int, stream: int = 0) -> int:
    """Stable 64-bit seed for (master, index, stream).

    splitmix64(splitmix64(master ^ stream * 2^32) ^ index): the same
    constants as the reference splitmix64 generator, so the derivation can be
    reproduced outside Python.
    """
    base = splitmix64((master ^ (stream << 32)) & _MASK64)
    return splitmix64(base ^ (index & _MASK64))


@dataclass(frozen=True)
class GenConfig:
    kind: ArrayKind = ArrayKind("NA", (4, 124))
    carrier: CarrierConfig = CarrierConfig()
    scene: SceneConfig = SceneConfig()
    P: int = 16
    N_RF: int = 4
    r_min: float = 0.1
    r_max: float = 10.0
    theta_min: float = -np.pi / 2
    theta_max: float = 0.0
    snr_min: float = 0.0
    snr_max: float = 20.0
    n_samples: int = 20000
    seed: int = 0

    def __post_init__(self):
        if not self.r_min > 0:
            raise ValueError("r_min must be positive")
        if self.r_max < self.r_min:
            raise ValueError("r_max must be >= r_min")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.snr_max < self.snr_min:
            raise ValueError("snr_max must be >= snr_min")
        if self.P < 1 or self.N_RF < 1:
            raise ValueError("P and N_RF must be >= 1")
        self.layout()  # rejects invalid array parameters up front

    @property
    def d(self) -> float:
        return half_wavelength(self.carrier.f_c)

    def layout(self) -> ArrayLayout:
        return _layout_cached(self.kind, self.d)

    def combiner(self) -> CombinerSet:
        return _combiner_cached(self.seed, self.P, self.N_RF, self.layout().n_elements)

    def header_bytes(self) -> bytes:
        return _pack_gen(self) + _pack_layout(self.kind, self.d)

    def digest(self) -> str:
        return hashlib.sha256(self.header_bytes()).hexdigest()


@lru_cache(maxsize=32)
def _layout_cached(kind: ArrayKind, d: float) -> ArrayLayout:
    return build_layout(kind, d)


@lru_cache(maxsize=32)
def _combiner_cached(seed: int, P: int, N_RF: int, N: int) -> CombinerSet:
    rng = np.random.default_rng(derive_seed(seed, 0, COMBINER_STREAM))
    cs = draw_combiner(rng, P, N_RF, N)
    # the dataset carries the combiner in f32; generate with exactly that matrix
    W = cs.W.astype(np.complex64).astype(np.complex128)
    W.setflags(write=False)
    return CombinerSet(W)


@dataclass
class SampleRecord:
    Y: np.ndarray  # [K, P*N_RF] complex64
    r: float
    theta: float
    h_los: np.ndarray  # [K, N] complex64
    h_nlos: np.ndarray  # [K, N] complex64
    snr_db: float
    sigma2: float
    seed: int
    h: np.ndarray = field(init=False)

    def __post_init__(self):
        self.h = self.h_los + self.h_nlos

    @property
    def C(self) -> np.ndarray:
        return UePosition(self.r, self.theta).xy

    def equals(self, other: "SampleRecord") -> bool:
        scalars = (self.r, self.theta, self.snr_db, self.sigma2, self.seed)
        other_scalars = (other.r, other.theta, other.snr_db, other.sigma2, other.seed)
        return scalars == other_scalars and all(
            a.tobytes() == b.tobytes()
            for a, b in ((self.Y, other.Y), (self.h_los, other.h_los), (self.h_nlos, other.h_nlos), (self.h, other.h))
        )


def generate_sample(seed: int, cfg: GenConfig, combiner: CombinerSet | None = None) -> SampleRecord:
    """One (observation, position, channel) example drawn from a seeded generator.

    Draw order: UE radius, UE angle, SNR, scatterers, observation noise.
    """
    layout = cfg.layout()
    cs = combiner if combiner is not None else cfg.combiner()
    rng = np.random.default_rng(seed)
    r = float(rng.uniform(cfg.r_min, cfg.r_max))
    theta = float(rng.uniform(cfg.theta_min, cfg.theta_max))
    snr_db = float(rng.uniform(cfg.snr_min, cfg.snr_max))
    clusters = sample_scatterers(rng, cfg.scene, cfg.carrier.K)
    ch = synthesize_channel(layout, UePosition(r, theta), clusters, cfg.carrier)
    sigma2 = snr_to_sigma2(snr_db, ch.h, cs)
    obs = observe(cs, ch.h, sigma2, rng, snr_db)
    return SampleRecord(
        Y=obs.Y.astype(np.complex64),
        r=r,
        theta=theta,
        h_los=ch.h_los.astype(np.complex64),
        h_nlos=ch.h_nlos.astype(np.complex64),
        snr_db=snr_db,
        sigma2=sigma2,
        seed=int(seed),
    )


@dataclass
class Dataset:
    config: GenConfig
    layout: ArrayLayout
    combiner: CombinerSet
    records: list

    def __len__(self):
        return len(self.records)

    def subset(self, indices) -> "Dataset":
        return replace(self, records=[self.records[int(i)] for i in indices])

    def stack(self, name: str) -> np.ndarray:
        if name == "C":
            return np.stack([rec.C for rec in self.records])
        return np.stack([getattr(rec, name) for rec in self.records])


def generate_dataset(cfg: GenConfig) -> Dataset:
    cs = cfg.combiner()
    records = [generate_sample(derive_seed(cfg.seed, i), cfg, cs) for i in range(cfg.n_samples)]
    return Dataset(cfg, cfg.layout(), cs, records)


# --- binary container -------------------------------------------------------

_GEN_FMT = "<ddIdIIIdddddIIddddddQQ"
_LAYOUT_FMT = "<B3idd"
_DIMS_FMT = "<III"


def _pack_gen(cfg: GenConfig) -> bytes:
    c, s = cfg.carrier, cfg.scene
    return struct.pack(
        _GEN_FMT,
        c.f_c, c.B, c.K, c.Q,
        s.L_min, s.L_max, s.G, s.R_min, s.R_max, s.phi_min, s.phi_max, s.nlos_scale,
        cfg.P, cfg.N_RF,
        cfg.r_min, cfg.r_max, cfg.theta_min, cfg.theta_max, cfg.snr_min, cfg.snr_max,
        cfg.n_samples, cfg.seed,
    )  # fmt: skip


def _pack_layout(kind: ArrayKind, d: float) -> bytes:
    params = list(kind.params) + [0] * (3 - len(kind.params))
    return struct.pack(_LAYOUT_FMT, kind.tag, *params, kind.eta, d)


_PARAM_COUNT = {"CA": 1, "USA": 1, "MOA": 3, "NA": 2}


def _unpack_layout(buf: bytes) -> tuple[ArrayKind, float]:
    tag, p0, p1, p2, eta, d = struct.unpack(_LAYOUT_FMT, buf)
    names = {v: k for k, v in KIND_TAGS.items()}
    if tag not in names:
        raise DimensionMismatch(f"unknown array kind tag {tag}")
    name = names[tag]
    return ArrayKind(name, (p0, p1, p2)[: _PARAM_COUNT[name]], eta), d


def record_dtype(K: int, M: int, N: int) -> np.dtype:
    return np.dtype(
        [
            ("seed", "<u8"),
            ("r", "<f8"),
            ("theta", "<f8"),
            ("snr_db", "<f8"),
            ("sigma2", "<f8"),
            ("Y", "<f4", (K, M, 2)),
            ("h_los", "<f4", (K, N, 2)),
            ("h_nlos", "<f4", (K, N, 2)),
        ]
    )


def _interleave(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.complex64)
    return np.stack([z.real, z.imag], axis=-1)


def _deinterleave(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.astype("<f4")).view(np.complex64)[..., 0]


def to_bytes(ds: Dataset) -> bytes:
    cfg = ds.config
    K = cfg.carrier.K
    N = ds.layout.n_elements
    M = cfg.P * cfg.N_RF
    W = ds.combiner.stacked
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        cfg.header_bytes(),
        struct.pack(_DIMS_FMT, cfg.P, cfg.N_RF, N),
        _interleave(W).astype("<f4").tobytes(),
        struct.pack("<Q", len(ds.records)),
    ]
    recs = np.zeros(len(ds.records), dtype=record_dtype(K, M, N))
    for i, rec in enumerate(ds.records):
        if rec.Y.shape != (K, M) or rec.h_los.shape != (K, N):
            raise DimensionMismatch(f"record {i} has shapes {rec.Y.shape}, {rec.h_los.shape}")
        recs[i] = (rec.seed, rec.r, rec.theta, rec.snr_db, rec.sigma2,
                   _interleave(rec.Y), _interleave(rec.h_los), _interleave(rec.h_nlos))  # fmt: skip
    parts.append(recs.tobytes())
    return b"".join(parts)


def write_dataset(ds: Dataset, path) -> str:
    """Write ``ds`` to ``path``; returns the sha256 of the bytes written."""
    data = to_bytes(ds)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def _take(buf: memoryview, pos: int, n: int, what: str) -> bytes:
    if pos + n > len(buf):
        raise TruncatedFile(f"file ends inside {what}")
    return bytes(buf[pos : pos + n])


def from_bytes(data: bytes) -> Dataset:
    buf = memoryview(data)
    if len(buf) < 4 or bytes(buf[:4]) != MAGIC:
        raise BadMagic("not an XLMD dataset")
    pos = 4
    (version,) = struct.unpack("<I", _take(buf, pos, 4, "version"))
    pos += 4
    if version != VERSION:
        raise VersionMismatch(f"file version {version}, reader supports {VERSION}")
    gsize = struct.calcsize(_GEN_FMT)
    g = struct.unpack(_GEN_FMT, _take(buf, pos, gsize, "config block"))
    pos += gsize
    lsize = struct.calcsize(_LAYOUT_FMT)
    kind, d = _unpack_layout(_take(buf, pos, lsize, "layout block"))
    pos += lsize
    (f_c, B, K, Q, L_min, L_max, G, R_min, R_max, phi_min, phi_max, nlos_scale,
     P, N_RF, r_min, r_max, theta_min, theta_max, snr_min, snr_max, n_samples, seed) = g  # fmt: skip
    cfg = GenConfig(
        kind=kind,
        carrier=CarrierConfig(f_c, B, K, Q),
        scene=SceneConfig(L_min, L_max, G, R_min, R_max, phi_min, phi_max, nlos_scale),
        P=P, N_RF=N_RF, r_min=r_min, r_max=r_max, theta_min=theta_min, theta_max=theta_max,
        snr_min=snr_min, snr_max=snr_max, n_samples=n_samples, seed=seed,
    )  # fmt: skip
    if cfg.d != d:
        raise DimensionMismatch("stored element spacing disagrees with carrier frequency")
    layout = cfg.layout()
    P2, N_RF2, N = struct.unpack(_DIMS_FMT, _take(buf, pos, 12, "combiner dims"))
    pos += 12
    if (P2, N_RF2, N) != (P, N_RF, layout.n_elements):
        raise DimensionMismatch(f"combiner dims {(P2, N_RF2, N)} disagree with config")
    wbytes = P * N_RF * N * 8
    W = _deinterleave(np.frombuffer(_take(buf, pos, wbytes, "combiner"), "<f4").reshape(P * N_RF, N, 2))
    pos += wbytes
    combiner = CombinerSet(W.astype(np.complex128).reshape(P, N_RF, N))
    (count,) = struct.unpack("<Q", _take(buf, pos, 8, "sample count"))
    pos += 8
    dt = record_dtype(K, P * N_RF, N)
    need = count * dt.itemsize
    if len(buf) - pos < need:
        raise TruncatedFile(f"expected {count} samples ({need} bytes), found {len(buf) - pos} bytes")
    if len(buf) - pos > need:
        raise DimensionMismatch("trailing bytes after the last sample")
    recs = np.frombuffer(data, dtype=dt, count=count, offset=pos)
    Ys = _deinterleave(recs["Y"])
    hl = _deinterleave(recs["h_los"])
    hn = _deinterleave(recs["h_nlos"])
    records = [
        SampleRecord(
            Y=Ys[i], r=float(recs["r"][i]), theta=float(recs["theta"][i]),
            h_los=hl[i], h_nlos=hn[i], snr_db=float(recs["snr_db"][i]),
            sigma2=float(recs["sigma2"][i]), seed=int(recs["seed"][i]),
        )  # fmt: skip
        for i in range(count)
    ]
    return Dataset(cfg, layout, combiner, records)


def read_dataset(path) -> Dataset:
    return from_bytes(Path(path).read_bytes())


def split(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Deterministic shuffled partition into (train, val, test)."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fr[0] * n))
    n_val = min(int(round(fr[1] * n)), n - n_train)
    parts = np.split(perm, [n_train, n_train + n_val])
    return tuple(ds.subset(np.sort(p)) for p in parts)
