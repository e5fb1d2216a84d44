"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

The op set is deliberately small: exactly what the condenser, the frozen
backbone and the two losses need, plus a central-difference gradient oracle.
Tensors wrap numpy arrays; every op records its parents so that a backward
sweep in reverse construction order propagates gradients (fan-out sums).
"""

from __future__ import annotations

import itertools
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand dimensions do not satisfy an op's contract."""


class DomainError(ValueError):
    """Input is outside an op's mathematical domain (e.g. zero-norm cosine)."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


_FINITE_CHECKS = False
_GRAD_ENABLED = True
_NODE_COUNTER = itertools.count()


def set_finite_checks(enabled: bool) -> None:
    """Toggle per-op NaN/Inf scans (test builds only; off for benchmarks)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def finite_checks_enabled() -> bool:
    return _FINITE_CHECKS


class no_grad:
    """Context manager that suspends graph recording (inference/benchmarks)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def derive_rng(*parts) -> np.random.Generator:
    """Deterministic generator from a mixed int/str seed path.

    Strings are folded in via crc32 so the same path always yields the same
    stream, independent of process or platform.
    """
    entropy = []
    for p in parts:
        if isinstance(p, str):
            entropy.append(zlib.crc32(p.encode("utf-8")))
        else:
            entropy.append(int(p) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))


class Tensor:
    """A dense array plus optional gradient buffer and graph linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_order")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad and _GRAD_ENABLED
        self.grad = None
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self._order = next(_NODE_COUNTER)
        if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor holds non-finite values")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # First write copies (closures may hand the same buffer to two
        # parents); later fan-in contributions sum in place.
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse sweep from a scalar output; gradients sum at fan-outs."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        self._accumulate(np.ones_like(self.data))
        for node in reversed(Graph.trace(self).nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Graph:
    """Executed ops of one forward pass, in construction order.

    Construction order is a topological order because operands always exist
    before the op that consumes them, so reverse iteration visits every node
    after all of its consumers.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    @staticmethod
    def trace(root: Tensor) -> "Graph":
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._order)
        return Graph(nodes)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(a, b) -> tuple:
    if not isinstance(a, Tensor):
        a = constant(a)
    if not isinstance(b, Tensor):
        b = constant(b, dtype=a.dtype)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(out_data, requires_grad=a.requires_grad or b.requires_grad,
                  _parents=(a, b), _backward=backward)


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor(out_data, requires_grad=a.requires_grad or b.requires_grad,
                  _parents=(a, b), _backward=backward)


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(out_data, requires_grad=a.requires_grad or b.requires_grad,
                  _parents=(a, b), _backward=backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    out_data = a.data * s

    def backward(g):
        a._accumulate(g * s)

    return Tensor(out_data, requires_grad=a.requires_grad,
                  _parents=(a,), _backward=backward)


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum a list of same-shape tensors in fixed left-to-right order."""
    if not tensors:
        raise ShapeError("add_n of an empty list")
    out_data = tensors[0].data.copy()
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError("add_n operands must share a shape")
        out_data += t.data

    def backward(g):
        for t in tensors:
            if t.requires_grad:
                t._accumulate(g)

    req = any(t.requires_grad for t in tensors)
    return Tensor(out_data, requires_grad=req, _parents=tuple(tensors), _backward=backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting; operands must be >= 2-D.

    Backward: dA = G·Bᵀ, dB = Aᵀ·G, each sum-reduced over broadcast batch dims.
    """
    a, b = _binary(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D+ operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor(out_data, requires_grad=a.requires_grad or b.requires_grad,
                  _parents=(a, b), _backward=backward)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x @ w.T for a 2-D weight: applies w to every last-axis vector of x.

    Backward: dX = G.W and dW = G_flatᵀ.X_flat (one GEMM over all leading
    positions, no batched temporaries).
    """
    if w.ndim != 2:
        raise ShapeError(f"linear weight must be 2-D, got {w.shape}")
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear dims disagree: {x.shape} x {w.shape}")
    out_data = np.matmul(x.data, w.data.T)

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.matmul(g, w.data))
        if w.requires_grad:
            g2 = g.reshape(-1, w.shape[0])
            x2 = x.data.reshape(-1, w.shape[1])
            w._accumulate(g2.T @ x2)

    return Tensor(out_data, requires_grad=x.requires_grad or w.requires_grad,
                  _parents=(x, w), _backward=backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = np.transpose(a.data, axes)

    def backward(g):
        a._accumulate(np.transpose(g, inverse))

    return Tensor(out_data, requires_grad=a.requires_grad,
                  _parents=(a,), _backward=backward)


def swap_last2(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)
    orig = a.shape

    def backward(g):
        a._accumulate(g.reshape(orig))

    return Tensor(out_data, requires_grad=a.requires_grad,
                  _parents=(a,), _backward=backward)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    if not tensors:
        raise ShapeError("stack of an empty list")
    out_data = np.stack([t.data for t in tensors], axis=0)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(g[i])

    req = any(t.requires_grad for t in tensors)
    return Tensor(out_data, requires_grad=req, _parents=tuple(tensors), _backward=backward)


def mean_axis0(a: Tensor) -> Tensor:
    n = a.shape[0]
    out_data = a.data.mean(axis=0)

    def backward(g):
        a._accumulate(np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=True))

    return Tensor(out_data, requires_grad=a.requires_grad,
                  _parents=(a,), _backward=backward)


def sum_all(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum(), dtype=a.dtype)

    def backward(g):
        a._accumulate(np.full_like(a.data, g))

    return Tensor(out_data, requires_grad=a.requires_grad,
                  _parents=(a,), _backward=backward)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Max-shifted softmax over the last axis; each slice sums to 1."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        x._accumulate(out_data * (g - dot))

    return Tensor(out_data, requires_grad=x.requires_grad,
                  _parents=(x,), _backward=backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs a feature axis of size >= 2")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm gain/bias must have shape (D,)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gain.data * xhat + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (dxhat - m1 - xhat * m2))

    req = x.requires_grad or gain.requires_grad or bias.requires_grad
    return Tensor(out_data, requires_grad=req, _parents=(x, gain, bias), _backward=backward)


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Smooth tanh-form GELU (smoothness keeps finite differences honest)."""
    xsq = x.data * x.data
    t = np.tanh(_GELU_C * (x.data + _GELU_A * x.data * xsq))
    half_1pt = 0.5 * (1.0 + t)
    out_data = x.data * half_1pt
    if x.requires_grad:
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xsq)
        local = half_1pt + 0.5 * x.data * (1.0 - t * t) * du
    else:
        local = None

    def backward(g):
        x._accumulate(g * local)

    return Tensor(out_data, requires_grad=x.requires_grad,
                  _parents=(x,), _backward=backward)


def slice_block(a: Tensor, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    """Take rows r0:r1 and cols c0:c1 of the two leading axes."""
    out_data = a.data[r0:r1, c0:c1].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[r0:r1, c0:c1] = g
        a._accumulate(full)

    return Tensor(out_data, requires_grad=a.requires_grad,
                  _parents=(a,), _backward=backward)


def block_2x2(tl: Tensor, tr: Tensor, bl: Tensor, br: Tensor) -> Tensor:
    """Tile four equal [h, w, ...] grids into one [2h, 2w, ...] grid."""
    quads = (tl, tr, bl, br)
    h, w = tl.shape[0], tl.shape[1]
    for q in quads:
        if q.shape != tl.shape:
            raise ShapeError("block_2x2 quadrants must share a shape")
    top = np.concatenate([tl.data, tr.data], axis=1)
    bottom = np.concatenate([bl.data, br.data], axis=1)
    out_data = np.concatenate([top, bottom], axis=0)

    def backward(g):
        views = (g[:h, :w], g[:h, w:], g[h:, :w], g[h:, w:])
        for q, v in zip(quads, views):
            if q.requires_grad:
                q._accumulate(v)

    req = any(q.requires_grad for q in quads)
    return Tensor(out_data, requires_grad=req, _parents=quads, _backward=backward)


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Mean cosine similarity of the last-axis vectors at each leading position."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_rows shapes disagree: {a.shape} vs {b.shape}")
    d = a.shape[-1]
    fa = a.data.reshape(-1, d)
    fb = b.data.reshape(-1, d)
    na = np.linalg.norm(fa, axis=-1)
    nb = np.linalg.norm(fb, axis=-1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise DomainError("cosine of a zero-norm slice is undefined")
    dots = (fa * fb).sum(axis=-1)
    cos = dots / (na * nb)
    n = fa.shape[0]
    out_data = np.asarray(cos.mean(), dtype=a.dtype)

    def backward(g):
        coeff = g / n
        if a.requires_grad:
            ga = coeff * (fb / (na * nb)[:, None] - (cos / (na * na))[:, None] * fa)
            a._accumulate(ga.reshape(a.shape).astype(a.dtype))
        if b.requires_grad:
            gb = coeff * (fa / (na * nb)[:, None] - (cos / (nb * nb))[:, None] * fb)
            b._accumulate(gb.reshape(b.shape).astype(b.dtype))

    return Tensor(out_data, requires_grad=a.requires_grad or b.requires_grad,
                  _parents=(a, b), _backward=backward)


def cross_entropy_tokens(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of 1-based token targets over an h x w grid.

    `probs` holds already-normalized distributions over the last axis.
    """
    targets = np.asarray(targets)
    if probs.ndim != 3 or targets.shape != probs.shape[:2]:
        raise ShapeError(f"probs {probs.shape} vs targets {targets.shape}")
    n_tokens = probs.shape[-1]
    if targets.min() < 1 or targets.max() > n_tokens:
        raise IndexError(f"token target outside codebook range 1..{n_tokens}")
    h, w = targets.shape
    rows, cols = np.ogrid[:h, :w]
    picked = probs.data[rows, cols, targets - 1]
    out_data = np.asarray(-np.log(picked).mean(), dtype=probs.dtype)

    def backward(g):
        grad = np.zeros_like(probs.data)
        grad[rows, cols, targets - 1] = -g / (h * w * picked)
        probs._accumulate(grad)

    return Tensor(out_data, requires_grad=probs.requires_grad,
                  _parents=(probs,), _backward=backward)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def grad_check(f: Callable[[], Tensor], params: dict, h: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Only entries with requires_grad participate; frozen tensors are skipped.
    The relative error uses |a - n| / max(|a| + |n|, 1e-6) so that entries with
    both gradients near zero compare absolutely at the 1e-6 scale.
    """
    checked = {k: t for k, t in params.items() if t.requires_grad}
    for t in checked.values():
        t.zero_grad()
    loss = f()
    if not np.isfinite(loss.data):
        raise NonFiniteError("objective is non-finite at the check point")
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in checked.items()}

    worst = 0.0
    with no_grad():
        for name, t in checked.items():
            flat = t.data.reshape(-1)
            num = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError(f"objective non-finite while perturbing {name}")
                num[i] = (fp - fm) / (2.0 * h)
            a = analytic[name].reshape(-1)
            denom = np.maximum(np.abs(a) + np.abs(num), 1e-6)
            worst = max(worst, float(np.max(np.abs(a - num) / denom)))
    return worst
