"""Reverse-mode autodiff over float64 numpy arrays.

Every value flowing through the models is a Tensor: a flat float64 payload
plus an optional gradient of the same shape. Ops build a DAG of parent
links and backward closures; Tensor.backward() runs the closures in
reverse topological order. The finite-difference oracle lives here too
(gradcheck), so the engine carries its own independent correctness check.

Conventions: convolution is cross-correlation (no kernel flip), gelu is
the tanh approximation, and all math is float64.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericsError, ShapeError

_DEBUG_CHECKS = False

# tanh-approximation constants for gelu
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-op finiteness assertions (used by the test suite)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


class Tensor:
    """Node in the autodiff graph.

    data is always a float64 ndarray; grad is allocated lazily during
    backward. Tensors are treated as immutable after construction except
    for optimizer updates to parameter payloads.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph machinery ----------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this (scalar or seeded) tensor into the graph."""
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() without seed requires a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.data.shape}")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self._accum_grad(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)


class Parameter:
    """Trainable tensor with a hierarchical name, updated only by the optimizer."""

    __slots__ = ("tensor", "name")

    def __init__(self, data: np.ndarray, name: str):
        self.tensor = Tensor(data, requires_grad=True)
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.data.shape

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    out._op = op
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by op {op!r}")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise arithmetic (broadcasting) ----------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), backward, "div")


def square(a: Tensor) -> Tensor:
    data = a.data * a.data

    def backward(g):
        a._accum_grad(g * 2.0 * a.data)

    return _make(data, (a,), backward, "square")


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        a._accum_grad(g * data)

    return _make(data, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        a._accum_grad(g / a.data)

    return _make(data, (a,), backward, "log")


# -- shape ops ----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def backward(g):
        a._accum_grad(g.reshape(a.shape))

    return _make(data, (a,), backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accum_grad(g.transpose(inverse))

    return _make(data, (a,), backward, "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape)

    def backward(g):
        a._accum_grad(_unbroadcast(g, a.shape))

    return _make(data.copy(), (a,), backward, "broadcast")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accum_grad(piece)

    return _make(data, tensors, backward, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a._accum_grad(full)

    return _make(data.copy(), (a,), backward, "slice")


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather along an axis; duplicate indices accumulate gradient."""
    indices = np.asarray(indices, dtype=np.intp)
    data = np.take(a.data, indices, axis=axis)
    idx = tuple(indices if ax == axis else slice(None) for ax in range(a.ndim))

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum_grad(full)

    return _make(data, (a,), backward, "take")


# -- reductions ---------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g2 = np.asarray(g)
        if not keepdims:
            if axis is None:
                g2 = g2.reshape((1,) * a.ndim)
            else:
                g2 = np.expand_dims(g2, axis)
        a._accum_grad(np.broadcast_to(g2, a.shape).copy())

    return _make(data, (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


# -- linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matrix product with numpy broadcasting over leading dims."""
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul needs at least 1-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum_grad(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the trailing dimension: x @ w.T + b, w is (dout, din)."""
    if x.shape[-1] != w.shape[-1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight din {w.shape[-1]} (w {w.shape})")
    out = matmul(x, transpose(w, (1, 0)))
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
        out = add(out, b)
    return out


# -- activations ----------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        a._accum_grad(g * (a.data > 0.0))

    return _make(data, (a,), backward, "relu")


def sigmoid(a: Tensor) -> Tensor:
    data = np.empty_like(a.data)
    pos = a.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    data[~pos] = e / (1.0 + e)

    def backward(g):
        a._accum_grad(g * data * (1.0 - data))

    return _make(data, (a,), backward, "sigmoid")


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation (constant 0.044715)."""
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        a._accum_grad(g * d)

    return _make(data, (a,), backward, "gelu")


# -- normalization ---------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        a._accum_grad(data * (g - dot))

    return _make(data, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def backward(g):
        a._accum_grad(g - soft * g.sum(axis=axis, keepdims=True))

    return _make(data, (a,), backward, "log_softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the trailing dimension, then affine. Backward is exact."""
    if eps <= 0:
        raise ShapeError("layernorm eps must be positive")
    c = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gamma.data * xhat + beta.data

    def backward(g):
        if beta.requires_grad:
            beta._accum_grad(_unbroadcast(g, beta.shape))
        if gamma.requires_grad:
            gamma._accum_grad(_unbroadcast(g * xhat, gamma.shape))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accum_grad(inv * (dxhat - m1 - xhat * m2))

    return _make(data, (x, gamma, beta), backward, "layernorm")


# -- convolution and pooling -------------------------------------------------------

def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, w: Tensor, stride=1, padding=0, groups: int = 1) -> Tensor:
    """Grouped 2-d cross-correlation.

    x: (B, Cin, H, W); w: (Cout, Cin/groups, kh, kw). groups=Cin gives a
    depth-wise convolution, a 1x1 kernel a point-wise one. Gradients are
    supplied for both x and w.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    B, Cin, H, W = x.shape
    Cout, Cin_g, kh, kw = w.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if Cin % groups or Cout % groups:
        raise ShapeError(f"channels ({Cin} in, {Cout} out) not divisible by groups={groups}")
    if Cin // groups != Cin_g:
        raise ShapeError(f"kernel expects {Cin_g} channels/group but input supplies {Cin // groups}")
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(
            f"conv2d output extent nonpositive: input {H}x{W}, kernel {kh}x{kw}, "
            f"stride {sh}x{sw}, padding {ph}x{pw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]  # B,Cin,Ho,Wo,kh,kw
    cg = Cin_g
    og = Cout // groups
    # (B, g, Ho*Wo, cg*kh*kw) so the contraction runs through BLAS
    cols = np.ascontiguousarray(
        win.reshape(B, groups, cg, Ho, Wo, kh, kw).transpose(0, 1, 3, 4, 2, 5, 6)
    ).reshape(B, groups, Ho * Wo, cg * kh * kw)
    wmat = w.data.reshape(groups, og, cg * kh * kw).transpose(0, 2, 1)  # g,K,og
    out = (cols @ wmat).transpose(0, 1, 3, 2).reshape(B, Cout, Ho, Wo)

    def backward(g):
        go = g.reshape(B, groups, og, Ho * Wo).transpose(0, 1, 3, 2)  # B,g,HW,og
        if w.requires_grad:
            lhs = cols.transpose(1, 3, 0, 2).reshape(groups, cg * kh * kw, B * Ho * Wo)
            rhs = go.transpose(1, 0, 2, 3).reshape(groups, B * Ho * Wo, og)
            gw = (lhs @ rhs).transpose(0, 2, 1).reshape(Cout, cg, kh, kw)
            w._accum_grad(gw)
        if x.requires_grad:
            gxp = np.zeros((B, groups, cg, H + 2 * ph, W + 2 * pw))
            wg = w.data.reshape(groups, og, cg, kh, kw)
            godat = go.reshape(B, groups, Ho, Wo, og)
            for u in range(kh):
                for v in range(kw):
                    # (B,g,Ho,Wo,og) x (g,og,cg) -> (B,g,Ho,Wo,cg)
                    contrib = np.einsum("bghwo,goc->bghwc", godat, wg[:, :, :, u, v], optimize=True)
                    gxp[:, :, :, u:u + sh * Ho:sh, v:v + sw * Wo:sw] += contrib.transpose(0, 1, 4, 2, 3)
            gx = gxp.reshape(B, Cin, H + 2 * ph, W + 2 * pw)
            if ph or pw:
                gx = gx[:, :, ph:ph + H, pw:pw + W]
            x._accum_grad(np.ascontiguousarray(gx))

    return _make(out, (x, w), backward, "conv2d")


def adaptive_avg_pool(x: Tensor, out_hw) -> Tensor:
    """Average over near-equal spatial bins; bin i covers [floor(i*H/h'), floor((i+1)*H/h'))."""
    oh, ow = _pair(out_hw)
    B, C, H, W = x.shape
    if oh > H or ow > W:
        raise ShapeError(f"adaptive pool target {oh}x{ow} exceeds input {H}x{W}")
    hb = [(i * H // oh, (i + 1) * H // oh) for i in range(oh)]
    wb = [(j * W // ow, (j + 1) * W // ow) for j in range(ow)]
    data = np.empty((B, C, oh, ow))
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            data[:, :, i, j] = x.data[:, :, h0:h1, w0:w1].mean(axis=(2, 3))

    def backward(g):
        gx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                area = (h1 - h0) * (w1 - w0)
                gx[:, :, h0:h1, w0:w1] += g[:, :, i:i + 1, j:j + 1] / area
        x._accum_grad(gx)

    return _make(data, (x,), backward, "adaptive_avg_pool")


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) spatial mean."""
    return reshape(adaptive_avg_pool(x, (1, 1)), (x.shape[0], x.shape[1]))


# -- finite-difference oracle ---------------------------------------------------------

def gradcheck(f: Callable[..., Tensor], xs: Sequence[Tensor], step: float = 1e-5,
              max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Compare backward gradients of sum(f(*xs)) against central differences.

    Perturbs every entry of every tensor in xs (or a random subsample of
    max_entries per tensor) by +-step and returns the worst relative error
    with denominator max(|analytic|, |numeric|, 1e-8). Raises NumericsError
    if any evaluation is non-finite.
    """
    if not 1e-6 <= step <= 1e-4:
        raise ValueError(f"step {step} outside sanctioned range [1e-6, 1e-4]")
    xs = list(xs)
    for x in xs:
        if not x.data.flags.c_contiguous:
            x.data = x.data.copy(order="C")  # keep reshape(-1) below a view
        x.requires_grad = True
        x.grad = None

    out = f(*xs)
    loss = tsum(out)
    if not np.isfinite(loss.item()):
        raise NumericsError("gradcheck: non-finite forward output")
    loss.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]
    for x in xs:  # numeric sweeps only need forward values
        x.requires_grad = False

    def eval_loss() -> float:
        val = float(tsum(f(*xs)).item())
        if not math.isfinite(val):
            raise NumericsError("gradcheck: non-finite perturbed output")
        return val

    worst = 0.0
    for x, a in zip(xs, analytic):
        flat = x.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            entries = rng.choice(n, size=max_entries, replace=False)
        else:
            entries = range(n)
        aflat = a.reshape(-1)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + step
            up = eval_loss()
            flat[i] = orig - step
            down = eval_loss()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            denom = max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    for x in xs:
        x.requires_grad = True
    return worst
