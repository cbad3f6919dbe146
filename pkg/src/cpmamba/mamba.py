"""Selective state-space (Mamba) block.

Dataflow for x of shape [B, L, D], with inner width Di = 2 D:

    [x_b, z_b] = x W_in                      (D -> 2 Di)
    x_b        = silu(causal depthwise conv(x_b))
    [delta, B, C] = x_b W_x                  (Di -> d_tr + 2 d_state)
    Delta      = softplus(delta W_dt + b_dt) (d_tr -> Di)
    y_s        = scan(x_b, Delta, A, B, C)   (A = -exp(A_log) < 0)
    y          = (y_s * sigmoid(z_b)) W_out  (Di -> D)
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import Linear, Module, param


@dataclass(frozen=True)
class MambaConfig:
    D: int
    d_state: int = 16
    d_tr: int | None = None
    k_conv: int = 4
    expand: int = 2

    def __post_init__(self):
        if self.d_tr is None:
            object.__setattr__(self, "d_tr", math.ceil(self.D / 16))
        for name in ("D", "d_state", "d_tr", "k_conv", "expand"):
            if getattr(self, name) < 1:
                raise ValueError(f"MambaConfig.{name} must be >= 1")

    @property
    def D_inner(self) -> int:
        return self.expand * self.D


def _softplus(v):
    return np.logaddexp(0.0, v)


def _inv_softplus(y):
    return y + np.log(-np.expm1(-y))


def discretize(delta_raw, A, B_t):
    """Zero-order-hold style discretization used by the scan.

    delta_raw: [L, Di]; A: [Di, N]; B_t: [L, N].
    Returns Abar = exp(Delta A) and Bbar = Delta B, both [L, Di, N].
    """
    delta = _softplus(np.asarray(delta_raw))
    Abar = np.exp(delta[:, :, None] * np.asarray(A)[None, :, :])
    Bbar = delta[:, :, None] * np.asarray(B_t)[:, None, :]
    return Abar, Bbar


def reference_scan(x, Abar, Bbar, C_t):
    """Naive per-channel, per-step, per-state recurrence (the oracle).

    x: [L, Di]; Abar, Bbar: [L, Di, N]; C_t: [L, N]. Returns y: [L, Di].
    """
    L, Di = np.shape(x)
    N = np.shape(C_t)[1]
    y = np.zeros((L, Di))
    for d in range(Di):
        s = [0.0] * N
        for t in range(L):
            acc = 0.0
            for n in range(N):
                s[n] = float(Abar[t, d, n]) * s[n] + float(Bbar[t, d, n]) * float(x[t, d])
                acc += float(C_t[t, n]) * s[n]
            y[t, d] = acc
    return y


def selective_scan(x, Abar, Bbar, C_t):
    """Scan over pre-discretized parameters, vectorized across channels and state.

    Same contract as :func:`reference_scan`; states start at zero.
    """
    x = np.asarray(x)
    L = x.shape[0]
    s = np.zeros(np.shape(Abar)[1:], dtype=np.result_type(x, Abar))
    y = np.empty((L, x.shape[1]), dtype=s.dtype)
    for t in range(L):
        s = Abar[t] * s + Bbar[t] * x[t][:, None]
        y[t] = s @ C_t[t]
    return y


class MambaBlock(Module):
    def __init__(self, cfg: MambaConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        D, Di, N, R, k = cfg.D, cfg.D_inner, cfg.d_state, cfg.d_tr, cfg.k_conv
        self.in_proj = Linear(D, 2 * Di, rng, bias=False, dtype=dtype)
        bound = np.sqrt(1.0 / k)
        self.conv_weight = param(rng.uniform(-bound, bound, size=(Di, k)).astype(dtype))
        self.conv_bias = param(np.zeros(Di, dtype))
        self.x_proj = Linear(Di, R + 2 * N, rng, bias=False, dtype=dtype)
        self.dt_proj = Linear(R, Di, rng, bias=True, dtype=dtype)
        # initial step sizes log-uniform in [1e-3, 1e-1]
        dt0 = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=Di))
        self.dt_proj.bias.value = _inv_softplus(dt0).astype(dtype)
        # -A spans [1, d_state], log-spaced, identical for every channel
        mags = np.geomspace(1.0, float(N), N) if N > 1 else np.ones(1)
        self.A_log = param(np.tile(np.log(mags), (Di, 1)).astype(dtype))
        self.out_proj = Linear(Di, D, rng, bias=False, dtype=dtype)

    def __call__(self, x):
        """x: [B, L, D] -> [B, L, D]."""
        cfg = self.cfg
        if x.ndim != 3 or x.shape[2] != cfg.D:
            raise ValueError(f"mamba block expects [B, L, {cfg.D}], got {x.shape}")
        Di, N, R = cfg.D_inner, cfg.d_state, cfg.d_tr
        xz = self.in_proj(x)
        xb = xz[..., :Di]
        zb = xz[..., Di:]
        xb = ad.silu(ad.depthwise_conv1d(xb, self.conv_weight, self.conv_bias))
        proj = self.x_proj(xb)
        delta = ad.softplus(self.dt_proj(proj[..., :R]))
        Bt = proj[..., R : R + N]
        Ct = proj[..., R + N :]
        A = -ad.exp(self.A_log)
        ys = ad.selective_scan(xb, delta, A, Bt, Ct)
        return self.out_proj(ys * ad.sigmoid(zb))

    def flops(self, batch_tokens: int) -> int:
        """Multiply-add count for ``batch_tokens`` tokens.

        Projections count 2 m k n; the depthwise conv 2 k per output; each
        scan state update counts 6 (exp, two products, add, output product
        and accumulate).
        """
        cfg = self.cfg
        Di, N = cfg.D_inner, cfg.d_state
        t = batch_tokens
        total = self.in_proj.flops(t) + self.x_proj.flops(t) + self.dt_proj.flops(t) + self.out_proj.flops(t)
        total += 2 * cfg.k_conv * Di * t
        total += 6 * Di * N * t
        return int(total)
