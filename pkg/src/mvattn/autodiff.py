"""Dense-tensor reverse-mode automatic differentiation.

Define-by-run: every operation records its parents and a backward closure on
the output tensor, so the tape is the op graph itself, in construction order.
`backward` topologically sorts from the root, traverses in exact reverse, and
frees the graph afterwards. Repeated backward calls (over fresh graphs)
accumulate into leaf `.grad` buffers until `zero_grad`.

All data is float64. There is no implicit broadcasting: elementwise ops
require identical shapes, and the only shape-mixing ops are the explicit ones
(`scalar_mul`, `add_rowvec`, `per_token_matvec`, ...). A tensor graph is
confined to one thread; independent graphs on separate threads never share
mutable state.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


_tls = threading.local()

DEBUG_CHECK_FINITE = False


def set_debug_check_finite(flag: bool) -> None:
    """Toggle the NaN/Inf assertion on every op output (debug aid, off by default)."""
    global DEBUG_CHECK_FINITE
    DEBUG_CHECK_FINITE = bool(flag)


def dot_product_count() -> int:
    """Number of query-key row dot products since the last reset (thread-local)."""
    return getattr(_tls, "dots", 0)


def reset_dot_product_count() -> None:
    _tls.dots = 0


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # Operator sugar; scalar operands go through the scalar ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise_mul(self, other)
        return scalar_mul(self, float(other))

    def __rmul__(self, other):
        return scalar_mul(self, float(other))

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Build an op output; record the closure only when a parent needs gradients."""
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values in op output")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# Core op set
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("elementwise_mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim != ad.ndim or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: incompatible operands {ad.shape} vs {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ {ad.shape} vs {bd.shape}")

    def backward(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _result(ad @ bd, (a, b), backward)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows (first axis) by an integer index array; duplicates accumulate in backward."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: indices must be 1-D, got shape {idx.shape}")

    def backward(g):
        da = np.zeros_like(a.data)
        if da.ndim == 2 and idx.size > 256:
            # bincount per column scatters large duplicate-heavy index sets
            # far faster than ufunc.at, with the same result
            n = da.shape[0]
            for j in range(da.shape[1]):
                da[:, j] = np.bincount(idx, weights=g[:, j], minlength=n)
        else:
            np.add.at(da, idx, g)
        return (da,)

    return _result(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(tensors)
    sizes = [t.data.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(parts))
        )

    return _result(np.concatenate([t.data for t in parts], axis=axis), parts, backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (a,), backward)


def layer_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine parameters)."""
    x = a.data
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gy_sum = g.sum(axis=-1, keepdims=True)
        gyy_sum = (g * y).sum(axis=-1, keepdims=True)
        return (inv / d * (d * g - gy_sum - y * gyy_sum),)

    return _result(y, (a,), backward)


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Tanh-form GELU; forward and backward use the same approximation."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x**3)
    th = np.tanh(u)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return _result(0.5 * x * (1.0 + th), (a,), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _result(y, (a,), lambda g: (g * 0.5 / y,))


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.data.shape
    return _result(
        np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),)
    )


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.data.shape:
        raise ShapeError(f"masked_fill: mask shape {m.shape} vs data {a.data.shape}")
    return _result(np.where(m, value, a.data), (a,), lambda g: (np.where(m, 0.0, g),))


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a vector to every row: a[..., d] + v[d]. The explicit bias-add op."""
    if v.data.ndim != 1 or a.data.shape[-1] != v.data.shape[0]:
        raise ShapeError(f"add_rowvec: data {a.data.shape} vs vector {v.data.shape}")

    def backward(g):
        return g, g.reshape(-1, v.data.shape[0]).sum(axis=0)

    return _result(a.data + v.data, (a, v), backward)


def per_token_matvec(a: Tensor, mats: np.ndarray) -> Tensor:
    """Apply a constant per-token matrix: out[..., t, :] = mats[t] @ a[..., t, :].

    `a` is [T, D] or [H, T, D]; `mats` is a constant [T, D, D] stack (not
    differentiated — it encodes camera geometry, not learned weights).
    """
    mats = np.asarray(mats, dtype=np.float64)
    x = a.data
    t_axis = x.ndim - 2
    if mats.ndim != 3 or x.shape[t_axis] != mats.shape[0] or x.shape[-1] != mats.shape[1]:
        raise ShapeError(f"per_token_matvec: data {x.shape} vs mats {mats.shape}")
    if x.ndim == 2:
        spec_fwd, spec_bwd = "tij,tj->ti", "tij,ti->tj"
    elif x.ndim == 3:
        spec_fwd, spec_bwd = "tij,htj->hti", "tij,hti->htj"
    else:
        raise ShapeError(f"per_token_matvec: expected 2-D or 3-D data, got {x.shape}")

    def backward(g):
        return (np.einsum(spec_bwd, mats, g),)

    return _result(np.einsum(spec_fwd, mats, x), (a,), backward)


def rowwise_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row dot product of two [M, d] tensors -> [M].

    Counts toward the thread-local query-key dot-product counter, which
    certifies the sparse-supervision op budget.
    """
    _same_shape("rowwise_dot", a, b)
    if a.data.ndim != 2:
        raise ShapeError(f"rowwise_dot: expected 2-D operands, got {a.data.shape}")
    _tls.dots = getattr(_tls, "dots", 0) + a.data.shape[0]
    ad, bd = a.data, b.data

    def backward(g):
        return g[:, None] * bd, g[:, None] * ad

    return _result((ad * bd).sum(axis=-1), (a, b), backward)


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of a 2-D tensor to unit Euclidean norm."""
    x = a.data
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: expected 2-D input, got {x.shape}")
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
    y = x / norms

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norms,)

    return _result(y, (a,), backward)


def logsumexp_rows(a: Tensor) -> Tensor:
    """log(sum(exp(x))) along the last axis of a 2-D tensor -> [M]."""
    x = a.data
    if x.ndim != 2:
        raise ShapeError(f"logsumexp_rows: expected 2-D input, got {x.shape}")
    m = x.max(axis=-1, keepdims=True)
    y = (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))[:, 0]
    soft = np.exp(x - y[:, None])

    def backward(g):
        return (g[:, None] * soft,)

    return _result(y, (a,), backward)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Reverse-accumulate d(root)/d(leaf) into every requires_grad leaf.

    root must be a scalar produced on the live graph. Grad buffers
    accumulate across calls; the op graph is freed afterwards.
    """
    if root.data.shape != ():
        raise ValueError(f"backward root must be a scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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

    grads: dict[int, np.ndarray] = {id(root): np.asarray(1.0)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if not p.requires_grad:
                    continue
                acc = grads.get(id(p))
                if acc is None:
                    grads[id(p)] = np.array(pg, dtype=np.float64, copy=True)
                else:
                    acc += pg
        else:
            # A leaf: fold the traversal buffer into the persistent grad.
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        node._parents = ()
        node._backward = None


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients of f at x.

    f maps a tensor to a scalar Tensor and must be deterministic; x is
    perturbed coordinate-by-coordinate in place and restored.
    """
    if not x.requires_grad:
        raise ValueError("grad_check requires x.requires_grad")
    x.grad = None
    backward(f(x))
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat_x = x.data.reshape(-1)
    flat_n = numeric.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        fp = float(f(x).data)
        flat_x[i] = orig - eps
        fm = float(f(x).data)
        flat_x[i] = orig
        flat_n[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
