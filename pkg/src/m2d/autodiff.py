"""Dense-tensor ops with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array. While a ``GradTape`` is active, every op
records itself; ``backward(loss, tape)`` replays the records in reverse
execution order and returns a gradient map. Tensors are treated as
immutable values: ops never write into their inputs.

Op outputs are checked for NaN/Inf (a contract violation raises
``NumericsError``). Additive attention masks containing ``-inf`` are
therefore passed into ``masked_softmax`` as a side argument instead of
being added with a regular op.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import NumericsError, ShapeError

DEFAULT_DTYPE = np.float32

# Toggled off only in hot, already-validated inner loops; tests keep it on.
FINITE_CHECKS = True

_TAPE_STACK: list["GradTape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class GradTape:
    """Ordered record of executed ops, replayed in reverse by ``backward``.

    Single-owner: one tape per forward pass, never shared across threads.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "GradTape exited out of order"

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self.records.append((out, inputs, backward_fn))


def _active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values in output of {op}")


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _emit("mul", ad * bd, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar without promoting the dtype."""
    a = as_tensor(a)
    cc = a.data.dtype.type(c)
    return _emit("scale", a.data * cc, (a,), lambda g: (g * cc,))


def add_const(a, c: float) -> Tensor:
    a = as_tensor(a)
    cc = a.data.dtype.type(c)
    return _emit("add_const", a.data + cc, (a,), lambda g: (g,))


def pow_const(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data

    def bwd(g):
        return (g * p * ad ** (p - 1),)

    return _emit("pow_const", ad**p, (a,), bwd)


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("square", ad * ad, (a,), lambda g: (g * 2 * ad,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _emit("exp", out_data, (a,), lambda g: (g * out_data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    return _emit("sqrt", out_data, (a,), lambda g: (g * 0.5 / out_data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _emit("tanh", t, (a,), lambda g: (g * (1 - t * t),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


def gelu(a) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    a = as_tensor(a)
    x = np.ascontiguousarray(a.data)
    flat = x.reshape(-1)

    def bwd(g):
        return (_kernels.gelu_bwd(flat, np.ascontiguousarray(g).reshape(-1)).reshape(x.shape),)

    return _emit("gelu", _kernels.gelu_fwd(flat).reshape(x.shape), (a,), bwd)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(in_shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    data = np.ascontiguousarray(np.swapaxes(a.data, ax1, ax2))
    return _emit("swapaxes", data, (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _emit("broadcast_to", data, (a,), lambda g: (_unbroadcast(g, in_shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]

    def bwd(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _emit("concat", np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bwd)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries along ``axis`` starting at ``start``."""
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    in_shape = a.shape

    def bwd(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _emit("narrow", np.ascontiguousarray(a.data[idx]), (a,), bwd)


def embedding(weight, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = weight[ids[...], :]."""
    weight = as_tensor(weight)
    ids = np.asarray(ids)
    wd = weight.data

    def bwd(g):
        gw = np.zeros_like(wd)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, wd.shape[1]))
        return (gw,)

    return _emit("embedding", wd[ids], (weight,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, in_shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, in_shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(in_shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, in_shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape

    def bwd(g):
        return (_expand_reduced(g, in_shape, axis, keepdims).copy(),)

    return _emit("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    n = a.size if axis is None else np.prod(
        [in_shape[ax % len(in_shape)] for ax in ((axis,) if isinstance(axis, int) else axis)]
    )

    def bwd(g):
        return (_expand_reduced(g, in_shape, axis, keepdims) / n,)

    return _emit("mean", np.mean(a.data, axis=axis, keepdims=keepdims), (a,), bwd)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes with leading-dim broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), bwd)


def linear(x, w, b=None) -> Tensor:
    """x @ w (+ b). x (..., in), w (in, out), b (out,)."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


# ---------------------------------------------------------------------------
# fused primitives
# ---------------------------------------------------------------------------


def masked_softmax(logits, mask=None, axis: int = -1) -> Tensor:
    """softmax(logits + mask) along ``axis`` with max-subtraction.

    ``mask`` is an additive array of {0, -inf} broadcastable to ``logits``;
    it is a constant (no gradient flows into it). Positions masked with
    -inf come out exactly 0. A row with every position masked is
    degenerate and raises.
    """
    logits = as_tensor(logits)
    ld = logits.data
    last_axis = axis == -1 or axis == ld.ndim - 1
    if mask is not None:
        md = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        try:
            z = ld + md
        except ValueError as err:
            raise ShapeError(f"mask {md.shape} not broadcastable to logits {ld.shape}") from err
        if np.any(np.all(np.isneginf(np.broadcast_to(md, z.shape)), axis=axis)):
            raise NumericsError("masked_softmax: fully-masked row (degenerate attention row)")
        z = z - np.max(z, axis=axis, keepdims=True)
        e = np.exp(z)
        s = e / np.sum(e, axis=axis, keepdims=True)
    elif last_axis:
        cols = ld.shape[-1]
        s = _kernels.softmax_rows(np.ascontiguousarray(ld).reshape(-1, cols)).reshape(ld.shape)
    else:
        z = ld - np.max(ld, axis=axis, keepdims=True)
        e = np.exp(z)
        s = e / np.sum(e, axis=axis, keepdims=True)

    if last_axis:
        def bwd(g):
            cols = s.shape[-1]
            flat = _kernels.softmax_rows_bwd(
                np.ascontiguousarray(s).reshape(-1, cols),
                np.ascontiguousarray(g).reshape(-1, cols),
            )
            return (flat.reshape(s.shape),)
    else:
        def bwd(g):
            dot = np.sum(g * s, axis=axis, keepdims=True)
            return (s * (g - dot),)

    return _emit("masked_softmax", s, (logits,), bwd)


def attention(q, k, v, scale: float) -> tuple[Tensor, np.ndarray]:
    """Fused softmax(scale * q k^T) v over the last two axes.

    q (..., Pq, hd), k and v (..., Pk, hd) with identical leading dims.
    Returns the attended output and the (detached) weight array
    (..., Pq, Pk); rows of the weights sum to 1.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[:-2] != k.shape[:-2] or k.shape != v.shape or q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention shapes incompatible: q {q.shape}, k {k.shape}, v {v.shape}")
    lead = q.shape[:-2]
    pq, hd = q.shape[-2:]
    pk = k.shape[-2]
    q3 = np.ascontiguousarray(q.data).reshape(-1, pq, hd)
    k3 = np.ascontiguousarray(k.data).reshape(-1, pk, hd)
    v3 = np.ascontiguousarray(v.data).reshape(-1, pk, hd)
    out3, w3 = _kernels.attn_fwd(q3, k3, v3, scale)

    def bwd(g):
        g3 = np.ascontiguousarray(g).reshape(-1, pq, hd)
        gq, gk, gv = _kernels.attn_bwd(q3, k3, v3, w3, g3, scale)
        return gq.reshape(q.shape), gk.reshape(k.shape), gv.reshape(v.shape)

    out = _emit("attention", out3.reshape(*lead, pq, hd), (q, k, v), bwd)
    return out, w3.reshape(*lead, pq, pk)


def log_softmax(logits, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    z = logits.data - np.max(logits.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out_data = z - lse
    s = np.exp(out_data)

    def bwd(g):
        return (g - s * np.sum(g, axis=axis, keepdims=True),)

    return _emit("log_softmax", out_data, (logits,), bwd)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine params must be ({d},), got gamma {gamma.shape}, beta {beta.shape}"
        )
    shape = x.shape
    rows = np.ascontiguousarray(x.data).reshape(-1, d)
    gd = gamma.data.astype(rows.dtype, copy=False)
    bd = beta.data.astype(rows.dtype, copy=False)
    out, xhat, inv = _kernels.layer_norm_fwd(rows, gd, bd, eps)

    def bwd(g):
        g2 = np.ascontiguousarray(g).reshape(-1, d)
        ggamma = np.einsum("nd,nd->d", g2, xhat)
        gbeta = g2.sum(axis=0)
        gx = _kernels.layer_norm_bwd_x(xhat, inv, gd, g2)
        return gx.reshape(shape), ggamma, gbeta

    return _emit("layer_norm", out.reshape(shape), (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor, tape: GradTape, params: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. every requires_grad leaf on the tape.

    Replays the tape in exact reverse execution order, accumulating one
    gradient per tensor. Leaves that never influence the loss (and any
    extra ``params``) get zero gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    output_ids = {id(out) for out, _, _ in tape.records}
    leaves: dict[int, Tensor] = {}

    for out, inputs, backward_fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        for t in inputs:
            if t.requires_grad and id(t) not in output_ids:
                leaves.setdefault(id(t), t)
        if g is None:
            continue
        in_grads = backward_fn(g)
        for t, ig in zip(inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            prev = grads.get(id(t))
            if prev is None:
                grads[id(t)] = ig
            else:
                grads[id(t)] = prev + ig

    result: dict[Tensor, Tensor] = {}
    for tid, t in leaves.items():
        g = grads.get(tid)
        result[t] = Tensor(g if g is not None else np.zeros_like(t.data), dtype=t.data.dtype)
    if params is not None:
        for p in params:
            if p not in result:
                result[p] = Tensor(np.zeros_like(p.data), dtype=p.data.dtype)
    return result
