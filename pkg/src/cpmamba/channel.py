"""Near-field wideband channel synthesis for a linear array.

A single-antenna user sits at polar position (r, theta) in the array plane.
The channel on every subcarrier is a LoS spherical-wave term plus clustered
scattered paths, each scatterer with its own spherical-wave steering vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import SPEED_OF_LIGHT, ArrayLayout, InvalidParameter


@dataclass(frozen=True)
class CarrierConfig:
    f_c: float = 28e9
    B: float = 500e6
    K: int = 64
    Q: float = -0.00045  # path-loss factor, dB per meter

    def __post_init__(self):
        if not (self.f_c > self.B / 2 > 0):
            raise InvalidParameter("need f_c > B/2 > 0")
        if self.K < 1:
            raise InvalidParameter("need K >= 1")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.f_c

    def frequencies(self) -> np.ndarray:
        k = np.arange(1, self.K + 1)
        return self.f_c - self.B / 2 + (k - 1) * self.B / self.K


@dataclass(frozen=True)
class SceneConfig:
    """Scatterer placement. Counts of clusters are drawn from {L_min..L_max}."""

    L_min: int = 1
    L_max: int = 3
    G: int = 4
    R_min: float = 0.1
    R_max: float = 10.0
    phi_min: float = -np.pi / 2
    phi_max: float = 0.0
    # Amplitude multiplier on every scattered-path gain; 1.0 is CN(0, 1).
    nlos_scale: float = 1.0

    def __post_init__(self):
        if not (0 <= self.L_min <= self.L_max):
            raise InvalidParameter("need 0 <= L_min <= L_max")
        if self.G < 1 and self.L_max > 0:
            raise InvalidParameter("need G >= 1")
        if not (0 < self.R_min <= self.R_max):
            raise InvalidParameter("need 0 < R_min <= R_max")


@dataclass(frozen=True)
class UePosition:
    r: float
    theta: float

    def __post_init__(self):
        if not self.r > 0:
            raise InvalidParameter(f"UE radius must be positive, got {self.r}")

    @property
    def x(self) -> float:
        return self.r * np.cos(self.theta)

    @property
    def y(self) -> float:
        return self.r * np.sin(self.theta)

    @property
    def z(self) -> float:
        return 0.0

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Scatterer:
    R: float
    phi: float
    gain_per_subcarrier: np.ndarray  # complex, length K


@dataclass
class ChannelRealization:
    h_los: np.ndarray  # [K, N] complex
    h_nlos: np.ndarray  # [K, N] complex
    h: np.ndarray  # [K, N] complex
    ue: UePosition
    clusters: list = field(default_factory=list)


def subcarrier_freq(k: int, cfg: CarrierConfig) -> float:
    if not 1 <= k <= cfg.K:
        raise IndexError(f"subcarrier index {k} outside 1..{cfg.K}")
    return cfg.f_c - cfg.B / 2 + (k - 1) * cfg.B / cfg.K


def element_distance(R, phi, x_q):
    """Distance from the element at ``x_q`` to a point at polar (R, phi).

    Broadcasts over all arguments. Tiny negative round-off under the square
    root is clipped to zero; anything below -1e-15 is an error.
    """
    R = np.asarray(R, dtype=np.float64)
    if np.any(R <= 0):
        raise InvalidParameter("R must be positive")
    sq = R**2 + np.asarray(x_q) ** 2 - 2.0 * R * np.asarray(x_q) * np.cos(phi)
    if np.any(sq < -1e-15):
        raise ArithmeticError("negative squared distance")
    out = np.sqrt(np.maximum(sq, 0.0))
    return out if out.ndim else float(out)


def steering_vector(layout: ArrayLayout, R: float, phi: float, f_k) -> np.ndarray:
    """Spherical-wave response exp(-j 2 pi f r_q / c).

    ``f_k`` may be a scalar (returns [N]) or an array of frequencies
    (returns [len(f_k), N]).
    """
    r_q = element_distance(R, phi, layout.positions)
    f = np.asarray(f_k, dtype=np.float64)
    phase = (2.0 * np.pi / SPEED_OF_LIGHT) * f[..., None] * r_q
    return np.exp(-1j * phase)


def los_gain(R: float, Q: float, k: int | None = None) -> float:
    # k is accepted for interface symmetry; the LoS gain is frequency-flat.
    if not R > 0:
        raise InvalidParameter(f"R must be positive, got {R}")
    return 1.0 / (4.0 * np.pi * R) * 10.0 ** (Q * R / 10.0)


def sample_scatterers(rng: np.random.Generator, scene: SceneConfig, K: int) -> list:
    """Draw clusters of scatterers. Gains are i.i.d. CN(0, nlos_scale^2) per subcarrier."""
    L = int(rng.integers(scene.L_min, scene.L_max + 1))
    clusters = []
    for _ in range(L):
        cluster = []
        for _ in range(scene.G):
            R = rng.uniform(scene.R_min, scene.R_max)
            phi = rng.uniform(scene.phi_min, scene.phi_max)
            g = (rng.standard_normal(K) + 1j * rng.standard_normal(K)) / np.sqrt(2.0)
            cluster.append(Scatterer(float(R), float(phi), scene.nlos_scale * g))
        clusters.append(cluster)
    return clusters


def los_channels(layout: ArrayLayout, R, phi, cfg: CarrierConfig) -> np.ndarray:
    """LoS channels for S sources at polar (R[s], phi[s]); returns [S, K, N]."""
    R = np.atleast_1d(np.asarray(R, dtype=np.float64))
    phi = np.atleast_1d(np.asarray(phi, dtype=np.float64))
    r_q = element_distance(R[:, None], phi[:, None], layout.positions[None, :])  # [S, N]
    phase = (2.0 * np.pi / SPEED_OF_LIGHT) * cfg.frequencies()[None, :, None] * r_q[:, None, :]
    gain = 1.0 / (4.0 * np.pi * R) * 10.0 ** (cfg.Q * R / 10.0)
    return gain[:, None, None] * np.exp(-1j * phase)


def los_channel(layout: ArrayLayout, R: float, phi: float, cfg: CarrierConfig) -> np.ndarray:
    """[K, N] LoS channel for a source at polar (R, phi)."""
    if not R > 0:
        raise InvalidParameter(f"R must be positive, got {R}")
    return los_channels(layout, [R], [phi], cfg)[0]


def synthesize_channel(
    layout: ArrayLayout, ue: UePosition, clusters: list, cfg: CarrierConfig
) -> ChannelRealization:
    freqs = cfg.frequencies()
    h_los = los_channel(layout, ue.r, ue.theta, cfg)
    h_nlos = np.zeros((cfg.K, layout.n_elements), dtype=np.complex128)
    for cluster in clusters:
        for s in cluster:
            h_nlos += s.gain_per_subcarrier[:, None] * steering_vector(layout, s.R, s.phi, freqs)
    return ChannelRealization(h_los=h_los, h_nlos=h_nlos, h=h_los + h_nlos, ue=ue, clusters=clusters)
