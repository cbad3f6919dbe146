"""U-shaped convolutional network with Mamba layers in the encoder.

Encoder block 0 is two 3x3 conv + SiLU layers. Blocks 1..S-1 each halve the
spatial extent with a stride-2 conv, apply a second conv, then run a Mamba
layer (with a residual connection) over the feature map flattened in raster
order. Each decoder block upsamples by two (nearest neighbour), concatenates
the matching encoder features and applies two conv + SiLU layers.

Heads:
    position  global mean pool over the last decoder features, then an
              affine map to (x, y) in units of r_max.
    channel   1x1 conv to (Re, Im) plus learned per-channel gates on input
              planes 0..1 (the LoS prior) and 2..3 (the back-projected pilot
              residual).
Both heads start at zero, so an untrained channel model returns the LoS prior
unchanged.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import Conv2d, Linear, Module, param
from .mamba import MambaBlock, MambaConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    head: str = "position"
    in_channels: int = 2
    height: int = 64
    width: int = 64
    stages: int = 4
    c0: int = 16
    d_state: int = 16
    d_tr: int | None = None
    k_conv: int = 4
    # "rows": subcarrier-major raster (row index outer); "cols": transposed
    raster: str = "rows"
    seed: int = 0

    def __post_init__(self):
        if self.head not in ("position", "channel"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.stages < 2:
            raise ConfigError("need at least 2 stages")
        if self.raster not in ("rows", "cols"):
            raise ConfigError(f"unknown raster order {self.raster!r}")
        f = 2 ** (self.stages - 1)
        if self.height % f or self.width % f:
            raise ConfigError(
                f"spatial extents {self.height}x{self.width} not divisible by 2^(S-1)={f}"
            )
        if self.head == "channel" and self.in_channels < 4:
            raise ConfigError("channel head needs the gated planes at input channels 0..3")

    def widths(self):
        return [self.c0 * 2**i for i in range(self.stages)]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown NetConfig keys {sorted(unknown)}")
        return cls(**d)


class EncoderBlock(Module):
    def __init__(self, c_in, c_out, rng, stride, mamba_cfg, dtype):
        self.conv1 = Conv2d(c_in, c_out, rng, stride=stride, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, rng, dtype=dtype)
        self.mamba = MambaBlock(mamba_cfg, rng, dtype) if mamba_cfg is not None else None

    def __call__(self, x, raster):
        x = ad.silu(self.conv2(ad.silu(self.conv1(x))))
        if self.mamba is not None:
            x = ad.add(x, apply_sequence(self.mamba, x, raster))
        return x


class DecoderBlock(Module):
    def __init__(self, c_in, c_skip, c_out, rng, dtype):
        self.conv1 = Conv2d(c_in + c_skip, c_out, rng, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, rng, dtype=dtype)

    def __call__(self, x, skip):
        x = ad.concat([ad.upsample2x(x), skip], axis=1)
        return ad.silu(self.conv2(ad.silu(self.conv1(x))))


def flatten_raster(x, raster="rows"):
    """[B, C, H, W] -> [B, L, C] with L = H*W."""
    B, C, H, W = x.shape
    axes = (0, 2, 3, 1) if raster == "rows" else (0, 3, 2, 1)
    return ad.reshape(ad.transpose(x, axes), (B, H * W, C))


def unflatten_raster(seq, shape, raster="rows"):
    B, C, H, W = shape
    if raster == "rows":
        return ad.transpose(ad.reshape(seq, (B, H, W, C)), (0, 3, 1, 2))
    return ad.transpose(ad.reshape(seq, (B, W, H, C)), (0, 3, 2, 1))


def apply_sequence(block, x, raster="rows"):
    return unflatten_raster(block(flatten_raster(x, raster)), x.shape, raster)


class CpMambaNet(Module):
    def __init__(self, cfg: NetConfig, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        widths = cfg.widths()
        enc = [EncoderBlock(cfg.in_channels, widths[0], rng, 1, None, dtype)]
        for i in range(1, cfg.stages):
            mcfg = MambaConfig(D=widths[i], d_state=cfg.d_state, d_tr=cfg.d_tr, k_conv=cfg.k_conv)
            enc.append(EncoderBlock(widths[i - 1], widths[i], rng, 2, mcfg, dtype))
        self.enc = enc
        # dec[i] produces width widths[i] from the level below
        self.dec = [DecoderBlock(widths[i + 1], widths[i], widths[i], rng, dtype) for i in range(cfg.stages - 1)]
        if cfg.head == "position":
            self.head = Linear(widths[0], 2, rng, dtype=dtype, zero=True)
        else:
            self.head = Conv2d(widths[0], 2, rng, k=1, dtype=dtype, zero=True)
            self.bypass = param(np.zeros((2, 2), dtype))  # [plane pair, Re/Im]

    @property
    def dtype(self):
        return self.enc[0].conv1.weight.dtype

    def features(self, x):
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
            raise ValueError(
                f"expected input [B, {cfg.in_channels}, {cfg.height}, {cfg.width}], got {x.shape}"
            )
        skips = []
        h = x
        for block in self.enc:
            h = block(h, cfg.raster)
            skips.append(h)
        for i in range(cfg.stages - 2, -1, -1):
            h = self.dec[i](h, skips[i])
        return h

    def __call__(self, x):
        x = ad.as_diff(x)
        feat = self.features(x)
        if self.cfg.head == "position":
            return self.head(ad.mean_pool_global(feat))
        out = self.head(feat)
        gate = ad.reshape(self.bypass, (1, 4, 1, 1))
        gated = ad.mul(gate, x[:, 0:4])
        return ad.add(out, ad.add(gated[:, 0:2], gated[:, 2:4]))

    def flop_estimate(self, batch: int = 1) -> int:
        """Multiply-add FLOPs of one forward pass (see ``MambaBlock.flops``)."""
        cfg = self.cfg
        H, W = cfg.height, cfg.width
        total = 0
        sizes = []
        for block in self.enc:
            total += block.conv1.flops(H, W)
            H, W = block.conv1.out_hw(H, W)
            total += block.conv2.flops(H, W)
            if block.mamba is not None:
                total += block.mamba.flops(H * W)
            sizes.append((H, W))
        for i in range(cfg.stages - 2, -1, -1):
            H, W = sizes[i]
            total += self.dec[i].conv1.flops(H, W) + self.dec[i].conv2.flops(H, W)
        H, W = sizes[0]
        if cfg.head == "position":
            total += self.head.flops(1)
        else:
            total += self.head.flops(H, W)
        return int(total * batch)


def param_count(model: Module) -> int:
    return model.param_count()


def flop_estimate(model: CpMambaNet, batch: int = 1) -> int:
    return model.flop_estimate(batch)
