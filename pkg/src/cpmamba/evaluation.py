"""Metrics, classical baselines and SNR sweeps."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .channel import CarrierConfig, los_channels
from .dataset import Dataset, derive_seed
from .geometry import ArrayLayout
from .pilots import CombinerSet, observe, snr_to_sigma2

NOISE_STREAM = 0x5EE9
CSV_HEADER = ("method", "snr_db", "mpe_m", "nmse", "nmse_db", "n")


class EmptyInput(ValueError):
    pass


def mpe(C_hat, C) -> float:
    """Mean Euclidean distance between estimated and true positions."""
    C_hat = np.asarray(C_hat, dtype=np.float64).reshape(-1, 2)
    C = np.asarray(C, dtype=np.float64).reshape(-1, 2)
    if len(C) == 0:
        raise EmptyInput("mpe of an empty set")
    if C_hat.shape != C.shape:
        raise ValueError(f"shape mismatch {C_hat.shape} vs {C.shape}")
    return float(np.mean(np.linalg.norm(C_hat - C, axis=1)))


def nmse(H_hat, H) -> float:
    """Mean over samples of ||H_hat - H||_F^2 / ||H||_F^2.

    A single sample may be passed without the leading axis when it is 2-D.
    """
    H = np.asarray(H)
    H_hat = np.asarray(H_hat)
    if H.size == 0:
        raise EmptyInput("nmse of an empty set")
    if H_hat.shape != H.shape:
        raise ValueError(f"shape mismatch {H_hat.shape} vs {H.shape}")
    if H.ndim <= 2:
        H, H_hat = H[None], H_hat[None]
    axes = tuple(range(1, H.ndim))
    den = np.sum(np.abs(H.astype(np.complex128)) ** 2, axis=axes)
    if np.any(den == 0):
        raise ZeroDivisionError("true channel has zero norm")
    num = np.sum(np.abs(H_hat.astype(np.complex128) - H) ** 2, axis=axes)
    return float(np.mean(num / den))


def min_norm_operator(Wbar: np.ndarray) -> np.ndarray:
    """W^H (W W^H)^-1 for a full-row-rank W; raises on rank deficiency."""
    Wbar = np.asarray(Wbar, dtype=np.complex128)
    s = np.linalg.svd(Wbar, compute_uv=False)
    if s.size == 0 or s[-1] < 1e-10:
        raise np.linalg.LinAlgError(f"combiner is rank deficient (smallest singular value {s[-1] if s.size else 0:.3g})")
    return Wbar.conj().T @ np.linalg.solve(Wbar @ Wbar.conj().T, np.eye(Wbar.shape[0]))


def ls_estimate(Y, Wbar) -> np.ndarray:
    """Minimum-norm least-squares channel from pilots.

    ``Y`` is [M] (one subcarrier), [K, M] or [S, K, M]; the result replaces
    the trailing M axis by N.
    """
    return np.asarray(Y) @ min_norm_operator(Wbar).T


@dataclass(frozen=True)
class Grid:
    r: np.ndarray
    theta: np.ndarray

    @classmethod
    def default(cls, r_min=0.1, r_max=10.0, n_r=60, theta_min=-np.pi / 2, theta_max=0.0, n_theta=90):
        return cls(np.geomspace(r_min, r_max, n_r), np.linspace(theta_min, theta_max, n_theta))

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened (r, theta) with r as the outer (slow) index."""
        rr, tt = np.meshgrid(self.r, self.theta, indexing="ij")
        return rr.ravel(), tt.ravel()


class GridLocator:
    """Matched-filter search over a (r, theta) lattice of LoS hypotheses.

    Score of point g for pilots Y: sum_k |<W a_g[k], Y[k]>| / ||W a_g[k]||.
    Grid points are ordered by ascending r then theta, so the first maximum
    is the tie-break winner.
    """

    def __init__(self, Wbar: np.ndarray, layout: ArrayLayout, cfg: CarrierConfig, grid: Grid | None = None,
                 chunk: int = 512):  # fmt: skip
        self.Wbar = np.asarray(Wbar, dtype=np.complex128)
        self.layout = layout
        self.cfg = cfg
        self.grid = grid or Grid.default()
        self.r_pts, self.t_pts = self.grid.points()
        if len(self.r_pts) == 0:
            raise ValueError("empty grid")
        self.chunk = chunk

    @cached_property
    def table(self) -> np.ndarray:
        """Normalized combined steering vectors, [K, M, G] complex64."""
        K, M, G = self.cfg.K, self.Wbar.shape[0], len(self.r_pts)
        out = np.empty((K, M, G), dtype=np.complex64)
        for lo in range(0, G, self.chunk):
            hi = min(G, lo + self.chunk)
            a = los_channels(self.layout, self.r_pts[lo:hi], self.t_pts[lo:hi], self.cfg)  # [g, K, N]
            wa = a @ self.Wbar.T  # [g, K, M]
            wa /= np.linalg.norm(wa, axis=2, keepdims=True)
            out[:, :, lo:hi] = wa.transpose(1, 2, 0)
        return out

    def scores(self, Y) -> np.ndarray:
        """[S, K, M] pilots -> [S, G] objective values."""
        Y = np.asarray(Y, dtype=np.complex64)
        if Y.ndim == 2:
            Y = Y[None]
        T = self.table
        total = np.zeros((Y.shape[0], T.shape[2]), dtype=np.float64)
        for k in range(T.shape[0]):
            total += np.abs(Y[:, k, :] @ T[k].conj())
        return total

    def locate(self, Y) -> np.ndarray:
        """[S, K, M] pilots -> [S, 2] Cartesian estimates."""
        best = np.argmax(self.scores(Y), axis=1)
        r, t = self.r_pts[best], self.t_pts[best]
        return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)

    def locate_polar(self, Y) -> tuple[np.ndarray, np.ndarray]:
        best = np.argmax(self.scores(Y), axis=1)
        return self.r_pts[best], self.t_pts[best]


def grid_position(Y, Wbar, layout: ArrayLayout, cfg: CarrierConfig, grid: Grid | None = None) -> np.ndarray:
    """Matched-filter grid estimate for one [K, M] observation; returns [2]."""
    return GridLocator(Wbar, layout, cfg, grid).locate(np.asarray(Y)[None])[0]


# --- sweeps -------------------------------------------------------------------


@dataclass(frozen=True)
class MetricRow:
    method: str
    snr_db: float
    mpe_m: float
    nmse: float
    n: int

    @property
    def nmse_db(self) -> float:
        return 10.0 * math.log10(self.nmse) if self.nmse > 0 else -math.inf

    def as_csv(self) -> list:
        return [self.method, repr(self.snr_db), repr(self.mpe_m), repr(self.nmse), repr(self.nmse_db), str(self.n)]


def observations_at_snr(ds: Dataset, snr_db: float, seed: int = 0) -> np.ndarray:
    """Fresh pilots for every channel of ``ds`` at a fixed SNR.

    Each sample's noise comes from its own seeded generator that does not
    depend on the SNR, so curves are comparable sample by sample.
    """
    cs: CombinerSet = ds.combiner
    out = []
    for i, rec in enumerate(ds.records):
        h = rec.h.astype(np.complex128)
        rng = np.random.default_rng(derive_seed(seed ^ rec.seed, i, NOISE_STREAM))
        out.append(observe(cs, h, snr_to_sigma2(snr_db, h, cs), rng, snr_db).Y)
    return np.stack(out)


class Method:
    """An estimator: pilots [S, K, M] -> (positions [S, 2] or None, channels [S, K, N] or None)."""

    name = "method"

    def __call__(self, Y, ds: Dataset):
        raise NotImplementedError


class OracleMethod(Method):
    name = "oracle"

    def __call__(self, Y, ds):
        return ds.stack("C"), ds.stack("h").astype(np.complex128)


class LsMethod(Method):
    name = "ls"

    def __call__(self, Y, ds):
        return None, ls_estimate(Y, ds.combiner.stacked)


class GridMethod(Method):
    """Grid positioning; its channel estimate is the LoS channel at the found point."""

    name = "grid"

    def __init__(self, grid: Grid | None = None):
        self.grid = grid
        self._locators = {}

    def __call__(self, Y, ds):
        key = ds.config.digest()
        if key not in self._locators:
            grid = self.grid or Grid.default(ds.config.r_min, ds.config.r_max, theta_min=ds.config.theta_min,
                                             theta_max=ds.config.theta_max)  # fmt: skip
            self._locators[key] = GridLocator(ds.combiner.stacked, ds.layout, ds.config.carrier, grid)
        r, t = self._locators[key].locate_polar(Y)
        C = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
        return C, los_channels(ds.layout, r, t, ds.config.carrier)


class CpMambaMethod(Method):
    name = "cpmamba"

    def __init__(self, pos_model, ch_model=None):
        self.pos_model = pos_model
        self.ch_model = ch_model

    def __call__(self, Y, ds):
        from .pipeline import infer

        return infer(Y, self.pos_model, self.ch_model, ds.layout, ds.config.carrier, r_floor=ds.config.r_min)


def sweep(ds: Dataset, methods, snr_list, seed: int = 0) -> list[MetricRow]:
    """Evaluate every method at every SNR on the fixed channels of ``ds``."""
    if len(ds) == 0:
        raise EmptyInput("cannot sweep an empty dataset")
    C = ds.stack("C")
    H = ds.stack("h").astype(np.complex128)
    rows = []
    for snr in snr_list:
        Y = observations_at_snr(ds, float(snr), seed)
        for m in methods:
            C_hat, H_hat = m(Y, ds)
            rows.append(
                MetricRow(
                    method=m.name,
                    snr_db=float(snr),
                    mpe_m=mpe(C_hat, C) if C_hat is not None else math.nan,
                    nmse=nmse(H_hat, H) if H_hat is not None else math.nan,
                    n=len(ds),
                )
            )
    return rows


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for row in rows:
            w.writerow(row.as_csv())


def read_metrics_csv(path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyInput(f"{path} is empty")
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = [MetricRow(r[0], float(r[1]), float(r[2]), float(r[3]), int(r[5])) for r in reader if r]
    if not rows:
        raise EmptyInput(f"{path} has no metric rows")
    return rows
