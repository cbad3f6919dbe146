"""Parameter containers and the two trainable layer types used by the network."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray


class Module:
    """Anything holding DiffArray parameters, directly or through child modules.

    Parameter names follow attribute order, with list members indexed:
    ``enc.1.mamba.in_proj.weight``.
    """

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, DiffArray):
                if val.requires_grad:
                    yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"parameter names differ: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: stored shape {value.shape} != model shape {p.shape}")
            p.value = value.astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = None
        return self

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def param(value, name=None) -> DiffArray:
    return DiffArray(value, requires_grad=True, name=name)


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, dtype=np.float32, zero=False):
        shape = (n_in, n_out)
        w = np.zeros(shape, dtype) if zero else fan_in_uniform(rng, shape, n_in, dtype)
        self.weight = param(w)
        self.bias = param(np.zeros(n_out, dtype)) if bias else None

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)

    def flops(self, rows: int) -> int:
        n_in, n_out = self.weight.shape
        return 2 * rows * n_in * n_out


class Conv2d(Module):
    def __init__(self, c_in, c_out, rng, k=3, stride=1, dtype=np.float32, zero=False):
        shape = (c_out, c_in, k, k)
        w = np.zeros(shape, dtype) if zero else fan_in_uniform(rng, shape, c_in * k * k, dtype)
        self.weight = param(w)
        self.bias = param(np.zeros(c_out, dtype))
        self.stride = stride

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.stride)

    def out_hw(self, H, W):
        return (H - 1) // self.stride + 1, (W - 1) // self.stride + 1

    def flops(self, H, W) -> int:
        c_out, c_in, kh, kw = self.weight.shape
        Ho, Wo = self.out_hw(H, W)
        return 2 * c_in * kh * kw * c_out * Ho * Wo
