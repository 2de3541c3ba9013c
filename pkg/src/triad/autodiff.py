"""Dense tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` whenever at
least one input requires a gradient.  Outside a tape, operations are plain
numpy evaluations, which is what inference and decoding use.

Gradient accumulation mode: leaf gradients accumulate across tapes until
:func:`zero_grad` is called.  A tape can run its backward pass once; a second
call raises ``RuntimeError``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "zero_grad",
    "as_tensor",
    "matmul",
    "softmax_rows",
    "layer_norm_rows",
    "maxpool_over_set",
    "max_over_axis",
    "take_rows",
    "concat",
    "stack",
    "reshape",
    "permute",
    "swap_last",
    "relu",
    "exp",
    "log",
    "clamp_min",
    "tsum",
    "tmean",
    "cross_entropy",
    "finite_diff_gradient",
    "relative_error",
]

_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations for one backward pass."""

    def __init__(self) -> None:
        self.nodes: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: "Tensor") -> None:
        if self.consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._tape is None:
                    if p.grad is None:
                        p.grad = np.array(pg, dtype=p.data.dtype)
                    else:
                        p.grad = p.grad + pg
                else:
                    key = id(p)
                    grads[key] = grads[key] + pg if key in grads else pg
        self.nodes.clear()
        self.consumed = True


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def backward(loss: "Tensor", tape: Tape | None = None) -> None:
    (tape or loss._tape or _fail_no_tape()).backward(loss)


def _fail_no_tape():
    raise ValueError("loss is not on any tape")


def zero_grad(params: Iterable["Tensor"]) -> None:
    for p in params:
        p.grad = None


class Tensor:
    """Row-major real array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return NotImplemented

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return swap_last(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._tape = None
    out.requires_grad = False
    tape = active_tape()
    if tape is None:
        return out
    if not any(p.requires_grad for p in parents):
        return out
    for p in parents:
        if p._tape is not None and p._tape is not tape:
            raise RuntimeError("tensor belongs to a different tape")
    out.requires_grad = True
    out._tape = tape
    tape.nodes.append((out, parents, fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        s = b
        return _result(a.data * s, (a,), lambda g: (g * s,))
    b = as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), fn)


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data >= lo
    return _result(np.maximum(a.data, a.dtype.type(lo)), (a,), lambda g: (g * keep,))


# -- reductions and shape ops ------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(count))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    return _result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _result(np.array(a.data[index]), (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    n = len(tensors)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, fn)


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id outside vocabulary of size {table.shape[0]}")
    shape, dtype = table.shape, table.dtype

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _result(table.data[ids], (table,), fn)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), fn)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` False entries get probability 0."""
    xd = x.data
    if np.isnan(xd).any():
        raise FloatingPointError("softmax input contains NaN")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.broadcast_to(mask, np.broadcast_shapes(mask.shape, xd.shape)).any(axis=-1).all():
            raise ValueError("softmax row with every entry masked")
        xd = np.where(mask, xd, -np.inf)
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype, copy=False)

    def fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), fn)


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    e = xd.shape[-1]
    if e < 2:
        raise ValueError("layer norm needs at least 2 features")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    gd = gain.data

    def fn(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _result(xhat * gd + bias.data, (x, gain, bias), fn)


def max_over_axis(x: Tensor, axis: int, mask: np.ndarray | None = None) -> Tensor:
    """Elementwise maximum along ``axis``; ties route gradient to the first index.

    ``mask`` (broadcastable to ``x`` with the reduced axis kept) excludes
    entries, e.g. padded views.
    """
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    idx = np.expand_dims(xd.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)
    shape, dtype = x.shape, x.dtype

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(np.squeeze(out, axis), (x,), fn)


def maxpool_over_set(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("maxpool_over_set needs at least one input")
    if len({t.shape for t in xs}) != 1:
        raise ValueError("maxpool_over_set inputs must share one shape")
    return max_over_axis(stack(xs, axis=0), axis=0)


def cross_entropy(p: Tensor, target, weights=None, floor: float = 1e-12) -> Tensor:
    """Mean of ``-sum_j y_j log p_j`` over rows, ``weights`` masking rows.

    ``p`` and ``target`` share shape ``(..., k)``; ``weights`` has shape
    ``(...)`` and is 1 for rows that count.
    """
    target = np.asarray(target, dtype=p.dtype)
    if weights is None:
        weights = np.ones(target.shape[:-1], dtype=p.dtype)
    weights = np.asarray(weights, dtype=p.dtype)
    total = float(weights.sum())
    if total <= 0:
        raise ValueError("cross entropy over zero counted rows")
    logp = log(clamp_min(p, floor))
    picked = tsum(mul(logp, target * weights[..., None]))
    return mul(picked, -1.0 / total)


# -- verification oracle -----------------------------------------------------


def finite_diff_gradient(
    f: Callable[[], float],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    coords: Sequence[tuple[int, tuple[int, ...]]] | None = None,
) -> list[np.ndarray]:
    """Central differences of ``f`` with respect to each entry of ``params``.

    ``f`` reads the parameters' current ``data``; perturbation happens in
    place on 64-bit copies.  With ``coords`` only the listed
    ``(param_index, entry_index)`` pairs are estimated, others stay 0.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    saved = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(np.float64)
    grads = [np.zeros(p.shape, dtype=np.float64) for p in params]
    if coords is None:
        coords = [(i, idx) for i, p in enumerate(params) for idx in np.ndindex(p.shape)]
    try:
        for i, idx in coords:
            d = params[i].data
            orig = d[idx]
            d[idx] = orig + eps
            fp = float(f())
            d[idx] = orig - eps
            fm = float(f())
            d[idx] = orig
            grads[i][idx] = (fp - fm) / (2.0 * eps)
    finally:
        for p, s in zip(params, saved):
            p.data = s
    return grads


def relative_error(a, b, floor: float = 1e-12) -> float:
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


