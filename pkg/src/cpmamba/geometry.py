"""Linear antenna array layouts: compact, uniform sparse, modular and nested.

All layouts are one-dimensional. Element coordinates are x positions in meters,
sorted ascending and translated so that the aperture midpoint sits at the
origin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

KIND_TAGS = {"CA": 0, "USA": 1, "MOA": 2, "NA": 3}


class InvalidParameter(ValueError):
    """Raised when an array or channel parameter is outside its valid range."""


@dataclass(frozen=True)
class ArrayKind:
    """Array family plus its integer/real parameters.

    ``params`` holds up to three integers: CA (N,), USA (N,), MOA (N1, M1, Gamma),
    NA (N1, N2). ``eta`` is only meaningful for USA.
    """

    name: str
    params: tuple[int, ...]
    eta: float = 1.0

    @property
    def tag(self) -> int:
        return KIND_TAGS[self.name]

    def label(self) -> str:
        if self.name == "USA":
            return f"USA(N={self.params[0]}, eta={self.eta:g})"
        return f"{self.name}{self.params}"


@dataclass(frozen=True)
class ArrayLayout:
    kind: ArrayKind
    d: float
    positions: np.ndarray

    @property
    def n_elements(self) -> int:
        return int(self.positions.size)

    @property
    def aperture(self) -> float:
        return float(self.positions[-1] - self.positions[0])

    def __eq__(self, other):
        if not isinstance(other, ArrayLayout):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.d == other.d
            and np.array_equal(self.positions, other.positions)
        )

    __hash__ = None


def half_wavelength(f_c: float) -> float:
    return SPEED_OF_LIGHT / f_c / 2.0


def _centered(kind: ArrayKind, d: float, units: np.ndarray) -> ArrayLayout:
    # units are integer multiples of d (or eta*d); center in unit space first so
    # that symmetric layouts come out exactly symmetric.
    units = np.sort(np.asarray(units, dtype=np.float64))
    mid = (units[0] + units[-1]) / 2.0
    positions = (units - mid) * d
    positions.setflags(write=False)
    return ArrayLayout(kind=kind, d=float(d), positions=positions)


def _check_d(d: float) -> None:
    if not (d > 0 and math.isfinite(d)):
        raise InvalidParameter(f"spacing d must be positive, got {d!r}")


def build_ca(N: int, d: float) -> ArrayLayout:
    if N < 2:
        raise InvalidParameter(f"CA needs N >= 2, got {N}")
    _check_d(d)
    return _centered(ArrayKind("CA", (int(N),)), d, np.arange(N))


def build_usa(N: int, d: float, eta: float) -> ArrayLayout:
    if N < 2:
        raise InvalidParameter(f"USA needs N >= 2, got {N}")
    if not eta >= 1:
        raise InvalidParameter(f"USA sparsity eta must be >= 1, got {eta}")
    _check_d(d)
    kind = ArrayKind("USA", (int(N),), float(eta))
    return _centered(kind, d, np.arange(N) * float(eta))


def build_moa(N1: int, M1: int, Gamma: int, d: float) -> ArrayLayout:
    """Modular array: ``N1`` modules of ``M1`` elements, module pitch ``Gamma*d``."""
    if N1 < 1 or M1 < 1:
        raise InvalidParameter(f"MOA needs N1, M1 >= 1, got N1={N1}, M1={M1}")
    if Gamma < M1:
        raise InvalidParameter(f"MOA modules overlap: Gamma={Gamma} < M1={M1}")
    if N1 * M1 < 2:
        raise InvalidParameter("MOA needs at least two elements")
    _check_d(d)
    units = (np.arange(N1)[:, None] * Gamma + np.arange(M1)[None, :]).ravel()
    return _centered(ArrayKind("MOA", (int(N1), int(M1), int(Gamma))), d, units)


def build_na(N1: int, N2: int, d: float) -> ArrayLayout:
    """Two-level nested array: inner {m d}, m=1..N1 and outer {n (N1+1) d}, n=1..N2."""
    if N1 < 1 or N2 < 1:
        raise InvalidParameter(f"NA needs N1, N2 >= 1, got N1={N1}, N2={N2}")
    _check_d(d)
    inner = np.arange(1, N1 + 1)
    outer = np.arange(1, N2 + 1) * (N1 + 1)
    return _centered(ArrayKind("NA", (int(N1), int(N2))), d, np.concatenate([inner, outer]))


def build_layout(kind: ArrayKind, d: float) -> ArrayLayout:
    p = kind.params
    if kind.name == "CA":
        return build_ca(p[0], d)
    if kind.name == "USA":
        return build_usa(p[0], d, kind.eta)
    if kind.name == "MOA":
        return build_moa(p[0], p[1], p[2], d)
    if kind.name == "NA":
        return build_na(p[0], p[1], d)
    raise InvalidParameter(f"unknown array kind {kind.name!r}")


def rayleigh_distance(layout: ArrayLayout, f: float) -> float:
    if not f > 0:
        raise InvalidParameter(f"frequency must be positive, got {f}")
    wavelength = SPEED_OF_LIGHT / f
    return 2.0 * layout.aperture**2 / wavelength
