"""Random analog combiners and compressed uplink pilot observations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CombinerSet:
    W: np.ndarray  # [P, N_RF, N] complex, one combiner per pilot slot

    @property
    def P(self) -> int:
        return self.W.shape[0]

    @property
    def N_RF(self) -> int:
        return self.W.shape[1]

    @property
    def N(self) -> int:
        return self.W.shape[2]

    @property
    def stacked(self) -> np.ndarray:
        """W-bar: slot matrices stacked row-wise, shape [P*N_RF, N]."""
        return self.W.reshape(self.P * self.N_RF, self.N)


@dataclass
class PilotObservation:
    Y: np.ndarray  # [K, P*N_RF] complex
    sigma2: float
    snr_db: float


def draw_combiner(rng: np.random.Generator, P: int, N_RF: int, N: int) -> CombinerSet:
    if min(P, N_RF, N) < 1:
        raise ValueError("P, N_RF and N must be >= 1")
    u = rng.uniform(0.0, 1.0, size=(P, N_RF, N))
    return CombinerSet(np.exp(2j * np.pi * u) / np.sqrt(N_RF))


def snr_to_sigma2(snr_db: float, h: np.ndarray, cs: CombinerSet) -> float:
    """Per-antenna noise variance for a target SNR.

    sigma^2 = mean_k ||W h[k]||^2 / (P N_RF 10^(snr/10)), i.e. the mean
    combined signal power per measurement divided by the linear SNR.
    """
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    signal = cs.stacked @ np.asarray(h).T  # [P*N_RF, K]
    power = np.mean(np.sum(np.abs(signal) ** 2, axis=0))
    return float(power / (cs.P * cs.N_RF * 10.0 ** (snr_db / 10.0)))


def observe(
    cs: CombinerSet,
    h: np.ndarray,
    sigma2: float,
    rng: np.random.Generator | None = None,
    snr_db: float = float("nan"),
) -> PilotObservation:
    """Y[k] = W-bar h[k] + N[k] with per-slot coloured noise W[p] n[p, k].

    ``h`` is the [K, N] channel (a ChannelRealization's ``h`` field or any
    array of that shape). Pilot symbols are all ones.
    """
    h = np.asarray(getattr(h, "h", h))
    if h.ndim != 2 or h.shape[1] != cs.N:
        raise ValueError(f"channel shape {h.shape} does not match combiner N={cs.N}")
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    Y = h @ cs.stacked.T  # [K, P*N_RF]
    if sigma2 > 0:
        if rng is None:
            raise ValueError("a generator is required when sigma2 > 0")
        K = h.shape[0]
        shape = (K, cs.P, cs.N)
        nbar = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.sqrt(sigma2 / 2.0)
        # noise[k, p, i] = sum_n W[p, i, n] nbar[k, p, n]
        noise = np.einsum("pin,kpn->kpi", cs.W, nbar).reshape(K, cs.P * cs.N_RF)
        Y = Y + noise
    return PilotObservation(Y=Y, sigma2=float(sigma2), snr_db=float(snr_db))
