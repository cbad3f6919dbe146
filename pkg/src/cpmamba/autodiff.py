"""Dense real arrays with reverse-mode gradient accumulation.

Every operation on a :class:`DiffArray` that involves an input requiring a
gradient records a node holding its parents and an adjoint closure. Nodes get
a global sequence number at creation, so ``backward`` can replay adjoints in
exact reverse execution order. Values are numpy arrays; float32 is used for
training and float64 for gradient checks.
"""
from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

from . import _scan

_seq = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording any nodes."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class DiffArray:
    __slots__ = ("value", "grad", "requires_grad", "name", "op", "_parents", "_backward", "_seq")

    __array_priority__ = 100.0

    def __init__(self, value, requires_grad=False, name=None, dtype=None):
        if isinstance(value, DiffArray):
            value = value.value
        arr = np.asarray(value, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.value = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)

    # -- basic properties ----------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def size(self):
        return self.value.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.value

    def item(self):
        return self.value.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return DiffArray(self.value)

    def __repr__(self):
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"DiffArray(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- operators -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, DiffArray):
            raise TypeError("division by a DiffArray is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_diff(x, like: DiffArray | None = None) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    dtype = like.dtype if like is not None else None
    return DiffArray(np.asarray(x, dtype=dtype))


def _node(value, parents, backward, op) -> DiffArray:
    out = DiffArray(value)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` over the axes that broadcasting expanded to reach ``shape``."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- tape and backward ------------------------------------------------------


class Tape:
    """Nodes reachable from a scalar output, in execution order."""

    def __init__(self, output: DiffArray):
        seen = set()
        nodes = []
        stack = [output]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad or node.is_leaf:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._seq)
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    def replay(self, output: DiffArray, seed: np.ndarray) -> None:
        adj = {id(output): seed}
        for node in reversed(self.nodes):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            grads = node._backward(g)
            for parent, gp in zip(node._parents, grads):
                if gp is None or not parent.requires_grad:
                    continue
                if parent.is_leaf:
                    gp = np.asarray(gp, dtype=parent.dtype)
                    parent.grad = gp.copy() if parent.grad is None else parent.grad + gp
                else:
                    key = id(parent)
                    adj[key] = gp if key not in adj else adj[key] + gp


def backward(loss: DiffArray) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones(loss.shape, dtype=loss.dtype)
    if loss.is_leaf:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    Tape(loss).replay(loss, seed)


# --- elementwise ------------------------------------------------------------


def add(a, b) -> DiffArray:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> DiffArray:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> DiffArray:
    a, b = _pair(a, b)
    av, bv = a.value, b.value

    def bw(g):
        return (
            _unbroadcast(g * bv, av.shape) if a.requires_grad else None,
            _unbroadcast(g * av, bv.shape) if b.requires_grad else None,
        )

    return _node(av * bv, (a, b), bw, "mul")


def _pair(a, b):
    if isinstance(a, DiffArray):
        return a, as_diff(b, a)
    b = as_diff(b)
    return as_diff(a, b), b


def exp(x: DiffArray) -> DiffArray:
    out = np.exp(x.value)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: DiffArray) -> DiffArray:
    s = _sigmoid(x.value)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(x: DiffArray) -> DiffArray:
    v = x.value
    out = np.logaddexp(0.0, v).astype(v.dtype, copy=False)
    return _node(out, (x,), lambda g: (g * _sigmoid(v),), "softplus")


def silu(x: DiffArray) -> DiffArray:
    v = x.value
    s = _sigmoid(v)
    return _node(v * s, (x,), lambda g: (g * (s * (1.0 + v * (1.0 - s))),), "silu")


# --- shape manipulation -----------------------------------------------------


def reshape(x: DiffArray, shape) -> DiffArray:
    src = x.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: DiffArray, axes) -> DiffArray:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(x.value.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def take(x: DiffArray, idx) -> DiffArray:
    """Basic (slice/integer) indexing."""
    src_shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _node(x.value[idx], (x,), bw, "take")


def concat(arrays, axis: int = 0) -> DiffArray:
    arrays = [as_diff(a) for a in arrays]
    sizes = [a.shape[axis] for a in arrays]
    cuts = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([a.value for a in arrays], axis=axis),
        arrays,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


def sum_(x: DiffArray, axis=None) -> DiffArray:
    src = x.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _node(np.asarray(x.value.sum(axis=axis)), (x,), bw, "sum")


def mean(x: DiffArray, axis=None) -> DiffArray:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis), 1.0 / float(n))


# --- linear algebra -----------------------------------------------------------


def matmul(a, b) -> DiffArray:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul: incompatible extents {av.shape} @ {bv.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        if b.requires_grad:
            if bv.ndim == 2:
                k, n = bv.shape
                gb = av.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return _node(np.matmul(av, bv), (a, b), bw, "matmul")


def linear(x: DiffArray, weight: DiffArray, bias: DiffArray | None = None) -> DiffArray:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# --- convolutions and resampling --------------------------------------------


def conv2d(x: DiffArray, w: DiffArray, bias: DiffArray | None = None, stride: int = 1) -> DiffArray:
    """2-D cross-correlation with zero 'same' padding.

    x: [B, C_in, H, W] (or [C_in, H, W]); w: [C_out, C_in, kh, kw], odd kh, kw.
    With stride 2 the output is the stride-1 output at even indices.
    """
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), w, bias, stride)
        return reshape(out, out.shape[1:])
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1]:
        raise ValueError(f"conv2d: input {xv.shape} incompatible with kernels {wv.shape}")
    B, Ci, H, W = xv.shape
    Co, _, kh, kw = wv.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd, got {(kh, kw)}")
    ph, pw = kh // 2, kw // 2
    Ho, Wo = (H - 1) // stride + 1, (W - 1) // stride + 1
    xp = np.pad(xv, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((B, Ci, kh, kw, Ho, Wo), dtype=xv.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride]
    cols = cols.reshape(B, Ci * kh * kw, Ho * Wo)
    w2 = wv.reshape(Co, Ci * kh * kw)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.value[None, :, None]
    out = out.reshape(B, Co, Ho, Wo)
    parents = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        g2 = g.reshape(B, Co, Ho * Wo)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wv.shape)
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(B, Ci, kh, kw, Ho, Wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, ph : ph + H, pw : pw + W]
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _node(out, parents, bw, "conv2d")


def depthwise_conv1d(x: DiffArray, w: DiffArray, bias: DiffArray | None = None) -> DiffArray:
    """Causal per-channel convolution along the sequence axis.

    x: [B, L, D] (channels last), w: [D, k]; out[t] = sum_j w[:, j] x[t - (k-1) + j].
    """
    xv, wv = x.value, w.value
    if xv.ndim != 3 or wv.ndim != 2 or wv.shape[0] != xv.shape[2]:
        raise ValueError(f"depthwise_conv1d: input {xv.shape} incompatible with kernel {wv.shape}")
    B, L, D = xv.shape
    k = wv.shape[1]
    xp = np.concatenate([np.zeros((B, k - 1, D), dtype=xv.dtype), xv], axis=1)
    out = np.zeros_like(xv)
    for j in range(k):
        out += xp[:, j : j + L, :] * wv[:, j]
    if bias is not None:
        out += bias.value
    parents = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j : j + L, :] += g * wv[:, j]
            gx = gxp[:, k - 1 :, :]
        if w.requires_grad:
            gw = np.stack([np.einsum("bld,bld->d", g, xp[:, j : j + L, :]) for j in range(k)], axis=1)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 1))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _node(out, parents, bw, "depthwise_conv1d")


def upsample2x(x: DiffArray) -> DiffArray:
    """Nearest-neighbour upsampling of the last two axes."""
    v = x.value
    out = v.repeat(2, axis=-2).repeat(2, axis=-1)
    H, W = v.shape[-2:]

    def bw(g):
        return (g.reshape(g.shape[:-2] + (H, 2, W, 2)).sum(axis=(-3, -1)),)

    return _node(out, (x,), bw, "upsample2x")


def mean_pool_global(x: DiffArray) -> DiffArray:
    """[.., C, H, W] -> [.., C]."""
    return mean(x, axis=(-2, -1))


# --- losses -------------------------------------------------------------------


def mse(a, b) -> DiffArray:
    """Mean of squared differences over every element."""
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ValueError(f"mse: shapes differ {a.shape} vs {b.shape}")
    diff = a.value - b.value
    n = diff.size
    out = np.asarray(np.sum(diff * diff) / n, dtype=diff.dtype)
    return _node(out, (a, b), lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n), "mse")


def batch_sq_error(pred, target) -> DiffArray:
    """(1/V) sum_i ||pred_i - target_i||^2 over a leading batch axis of size V."""
    pred, target = _pair(pred, target)
    if pred.shape != target.shape:
        raise ValueError(f"batch_sq_error: shapes differ {pred.shape} vs {target.shape}")
    diff = pred.value - target.value
    V = diff.shape[0]
    out = np.asarray(np.sum(diff * diff) / V, dtype=diff.dtype)
    return _node(out, (pred, target), lambda g: (2.0 * g * diff / V, -2.0 * g * diff / V), "batch_sq_error")


# --- selective scan -----------------------------------------------------------


def selective_scan(x: DiffArray, delta: DiffArray, A: DiffArray, Bm: DiffArray, Cm: DiffArray) -> DiffArray:
    """Fused discretize + scan.

    x, delta: [Bt, L, D]; A: [D, N]; Bm, Cm: [Bt, L, N]. Per channel d:
    s_t = exp(delta_t A_d) * s_{t-1} + delta_t B_t x_t, y_t = <C_t, s_t>, s_0 = 0.
    """
    x, delta, A, Bm, Cm = (as_diff(t) for t in (x, delta, A, Bm, Cm))
    xv, dv, Av, Bv, Cv = (np.ascontiguousarray(t.value) for t in (x, delta, A, Bm, Cm))
    if xv.ndim != 3 or dv.shape != xv.shape or Av.shape[0] != xv.shape[2] or Bv.shape != Cv.shape:
        raise ValueError(f"selective_scan: bad shapes x{xv.shape} delta{dv.shape} A{Av.shape} B{Bv.shape}")
    if Bv.shape[:2] != xv.shape[:2] or Bv.shape[2] != Av.shape[1]:
        raise ValueError(f"selective_scan: B/C shape {Bv.shape} does not match x{xv.shape}, A{Av.shape}")
    parents = (x, delta, A, Bm, Cm)
    record = grad_enabled() and any(p.requires_grad for p in parents)
    y, states = _scan.scan_forward(xv, dv, Av, Bv, Cv, store_states=record)

    def bw(g):
        return _scan.scan_backward(xv, dv, Av, Bv, Cv, states, np.ascontiguousarray(g, dtype=xv.dtype))

    return _node(y, parents, bw, "selective_scan")


# --- gradient check ---------------------------------------------------------


def grad_check(f, point, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a list of DiffArrays to a scalar DiffArray; ``point`` is a list
    of arrays (or a single array). Runs in float64.
    """
    single = not isinstance(point, (list, tuple))
    pts = [np.array(p, dtype=np.float64) for p in ([point] if single else point)]
    args = [DiffArray(p.copy(), requires_grad=True) for p in pts]
    out = f(args[0] if single else args)
    backward(out)
    worst = 0.0
    for arg, p in zip(args, pts):
        g_ad = np.zeros_like(p) if arg.grad is None else arg.grad
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _eval(f, pts, single)
            flat[i] = orig - eps
            fm = _eval(f, pts, single)
            flat[i] = orig
            g_fd = (fp - fm) / (2.0 * eps)
            ga = g_ad.reshape(-1)[i]
            err = abs(g_fd - ga) / max(1e-12, abs(g_fd) + abs(ga))
            worst = max(worst, err)
    return worst


def _eval(f, pts, single):
    with no_grad():
        vals = [DiffArray(p.copy()) for p in pts]
        return float(f(vals[0] if single else vals).value)
