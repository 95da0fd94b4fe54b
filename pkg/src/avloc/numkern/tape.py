"""Reverse-mode differentiation over dense 2-D float64 matrices.

Every value in a computation graph is a ``Tensor`` wrapping a row-major
(rows x cols) numpy array.  Forward operations record their inputs and a
backward closure; ``Tensor.backward()`` replays the tape in reverse
topological order and accumulates gradients into parameter leaves.

The primitive set is deliberately small: matmul, broadcast arithmetic,
elementwise sigmoid/exp/log/sqrt/relu/softplus, row softmax with a binary
mask, concatenation, strided row/column slicing, transposition, sum and
max reductions.  Everything else in the model is composed from these.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "constant",
    "parameter",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "maximum",
    "neg",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "relu",
    "softplus",
    "tsum",
    "row_max",
    "softmax_rows",
    "masked_softmax",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "transpose",
    "mean_all",
    "l2_normalize_rows",
    "linear",
    "layer_norm",
    "dropout",
]

_grad_enabled = True


class no_grad:
    """Context manager that suspends tape construction (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _to_matrix(value) -> np.ndarray:
    v = np.asarray(value, dtype=np.float64)
    if v.ndim == 0:
        v = v.reshape(1, 1)
    elif v.ndim == 1:
        v = v.reshape(1, -1)
    if v.ndim != 2:
        raise ValueError(f"kernel values must be 2-D matrices, got shape {v.shape}")
    return v


class Tensor:
    """A node of the computation graph holding a 2-D float64 matrix."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_bwd", "_live")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = _to_matrix(value)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None
        self._live = requires_grad

    # -- shape conveniences ------------------------------------------------
    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    # -- autodiff ----------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable parameter's .grad.

        Only defined for 1x1 tensors (scalar objectives).
        """
        if self.value.size != 1:
            raise ValueError("backward() is only defined for 1x1 tensors")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p._live and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.value)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad += g
            if node._bwd is not None:
                node._bwd(g, grads)

    # -- operator sugar ------------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self):
        tag = self.name or ("param" if self.requires_grad else "tensor")
        return f"Tensor({tag}, shape={self.shape})"


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(value, name: str) -> Tensor:
    """A trainable leaf: gradient storage allocated, tracked by the tape."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(value)
    if _grad_enabled and any(p._live for p in parents):
        out._parents = parents
        out._bwd = bwd
        out._live = True
    return out


def _acc(grads: dict, t: Tensor, g: np.ndarray, fresh: bool) -> None:
    """Add contribution g to t's pending gradient.

    ``fresh`` marks g as newly allocated and safe to mutate in place;
    shared/viewed arrays are copied before being stored.
    """
    if not t._live:
        return
    k = id(t)
    if k in grads:
        grads[k] += g
    else:
        grads[k] = g if fresh else g.copy()


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> tuple[np.ndarray, bool]:
    """Sum g over axes that were broadcast up from ``shape``. Returns (grad, fresh)."""
    if g.shape == shape:
        return g, False
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g, True


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# -- binary primitives -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "add")

    def bwd(g, grads):
        ga, fa = _unbroadcast(g, a.shape)
        _acc(grads, a, ga, fa)
        gb, fb = _unbroadcast(g, b.shape)
        _acc(grads, b, gb, fb)

    return _node(a.value + b.value, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "sub")

    def bwd(g, grads):
        ga, fa = _unbroadcast(g, a.shape)
        _acc(grads, a, ga, fa)
        gb, _ = _unbroadcast(g, b.shape)
        _acc(grads, b, -gb, True)

    return _node(a.value - b.value, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "mul")

    def bwd(g, grads):
        ga, _ = _unbroadcast(g * b.value, a.shape)
        _acc(grads, a, ga, True)
        gb, _ = _unbroadcast(g * a.value, b.shape)
        _acc(grads, b, gb, True)

    return _node(a.value * b.value, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "div")

    def bwd(g, grads):
        ga, _ = _unbroadcast(g / b.value, a.shape)
        _acc(grads, a, ga, True)
        gb, _ = _unbroadcast(-g * a.value / (b.value * b.value), b.shape)
        _acc(grads, b, gb, True)

    return _node(a.value / b.value, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.cols != b.rows:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def bwd(g, grads):
        _acc(grads, a, g @ b.value.T, True)
        _acc(grads, b, a.value.T @ g, True)

    return _node(a.value @ b.value, (a, b), bwd)


def maximum(a, b) -> Tensor:
    """Elementwise max; gradient routes to a on exact ties."""
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "maximum")
    take_a = a.value >= b.value

    def bwd(g, grads):
        ga, _ = _unbroadcast(g * take_a, a.shape)
        _acc(grads, a, ga, True)
        gb, _ = _unbroadcast(g * (~take_a), b.shape)
        _acc(grads, b, gb, True)

    return _node(np.maximum(a.value, b.value), (a, b), bwd)


# -- unary primitives ---------------------------------------------------------


def neg(a) -> Tensor:
    a = _coerce(a)

    def bwd(g, grads):
        _acc(grads, a, -g, True)

    return _node(-a.value, (a,), bwd)


def exp(a) -> Tensor:
    a = _coerce(a)
    out_val = np.exp(a.value)

    def bwd(g, grads):
        _acc(grads, a, g * out_val, True)

    return _node(out_val, (a,), bwd)


def log(a) -> Tensor:
    a = _coerce(a)

    def bwd(g, grads):
        _acc(grads, a, g / a.value, True)

    return _node(np.log(a.value), (a,), bwd)


def sqrt(a) -> Tensor:
    a = _coerce(a)
    out_val = np.sqrt(a.value)

    def bwd(g, grads):
        _acc(grads, a, g * (0.5 / out_val), True)

    return _node(out_val, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    # stable two-branch logistic
    v = a.value
    out_val = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))

    def bwd(g, grads):
        _acc(grads, a, g * out_val * (1.0 - out_val), True)

    return _node(out_val, (a,), bwd)


def relu(a) -> Tensor:
    a = _coerce(a)

    def bwd(g, grads):
        _acc(grads, a, g * (a.value > 0), True)

    return _node(np.maximum(a.value, 0.0), (a,), bwd)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    a = _coerce(a)
    v = a.value

    def bwd(g, grads):
        s = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
        _acc(grads, a, g * s, True)

    return _node(np.logaddexp(0.0, v), (a,), bwd)


# -- reductions ---------------------------------------------------------------


def tsum(a, axis: int | None = None) -> Tensor:
    """Sum reduction keeping two dimensions (axis=None -> 1x1)."""
    a = _coerce(a)
    out_val = a.value.sum(axis=axis, keepdims=True)
    if out_val.ndim != 2:
        out_val = out_val.reshape(1, 1)

    def bwd(g, grads):
        _acc(grads, a, np.broadcast_to(g, a.shape), False)

    return _node(out_val, (a,), bwd)


def row_max(a) -> Tensor:
    """Per-row maximum -> (rows x 1); gradient routes to the first argmax."""
    a = _coerce(a)
    idx = a.value.argmax(axis=1)
    out_val = a.value[np.arange(a.rows), idx].reshape(-1, 1)

    def bwd(g, grads):
        z = np.zeros_like(a.value)
        z[np.arange(a.rows), idx] = g[:, 0]
        _acc(grads, a, z, True)

    return _node(out_val, (a,), bwd)


def softmax_rows(scores) -> Tensor:
    """Plain stabilized row softmax (identical to an all-ones masked_softmax)."""
    s = _coerce(scores)
    mx = s.value.max(axis=1, keepdims=True)
    e = np.exp(s.value - mx)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g, grads):
        dot = (g * p).sum(axis=1, keepdims=True)
        _acc(grads, s, p * (g - dot), True)

    return _node(p, (s,), bwd)


def masked_softmax(scores, mask) -> Tensor:
    """Row softmax restricted to mask==1 entries.

    Output rows sum to 1 over the masked support and are exactly zero
    where the mask is zero; masked-out scores have no influence on the
    value or the gradient.  Stabilized by subtracting the per-row max
    over the support.
    """
    s = _coerce(scores)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != s.shape:
        raise ValueError(f"masked_softmax: mask shape {m.shape} != scores shape {s.shape}")
    support = m > 0
    if not support.any(axis=1).all():
        bad = int(np.flatnonzero(~support.any(axis=1))[0])
        raise ValueError(f"masked_softmax: mask row {bad} admits no entries")
    filled = np.where(support, s.value, -np.inf)
    mx = filled.max(axis=1, keepdims=True)
    e = np.exp(filled - mx)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g, grads):
        dot = (g * p).sum(axis=1, keepdims=True)
        _acc(grads, s, p * (g - dot), True)

    return _node(p, (s,), bwd)


# -- structural primitives ----------------------------------------------------


def concat_rows(parts) -> Tensor:
    parts = [_coerce(p) for p in parts]
    offs = np.cumsum([0] + [p.rows for p in parts])

    def bwd(g, grads):
        for p, o in zip(parts, offs):
            _acc(grads, p, g[o:o + p.rows], False)

    return _node(np.concatenate([p.value for p in parts], axis=0), tuple(parts), bwd)


def concat_cols(parts) -> Tensor:
    parts = [_coerce(p) for p in parts]
    offs = np.cumsum([0] + [p.cols for p in parts])

    def bwd(g, grads):
        for p, o in zip(parts, offs):
            _acc(grads, p, g[:, o:o + p.cols], False)

    return _node(np.concatenate([p.value for p in parts], axis=1), tuple(parts), bwd)


def slice_rows(a, start: int, stop: int, step: int = 1) -> Tensor:
    a = _coerce(a)

    def bwd(g, grads):
        z = np.zeros_like(a.value)
        z[start:stop:step] = g
        _acc(grads, a, z, True)

    return _node(a.value[start:stop:step].copy(), (a,), bwd)


def slice_cols(a, start: int, stop: int, step: int = 1) -> Tensor:
    a = _coerce(a)

    def bwd(g, grads):
        z = np.zeros_like(a.value)
        z[:, start:stop:step] = g
        _acc(grads, a, z, True)

    return _node(a.value[:, start:stop:step].copy(), (a,), bwd)


def transpose(a) -> Tensor:
    a = _coerce(a)

    def bwd(g, grads):
        _acc(grads, a, g.T, False)

    return _node(a.value.T.copy(), (a,), bwd)


# -- composites ---------------------------------------------------------------


def mean_all(a) -> Tensor:
    a = _coerce(a)
    return tsum(a) * (1.0 / a.value.size)


def l2_normalize_rows(a) -> Tensor:
    """Scale each row to unit L2 norm. Zero rows are the caller's problem."""
    a = _coerce(a)
    return div(a, sqrt(tsum(mul(a, a), axis=1)))


def linear(x, w, b=None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row normalization with learnable 1xd gain and bias."""
    x = _coerce(x)
    d = x.cols
    mu = tsum(x, axis=1) * (1.0 / d)
    centered = sub(x, mu)
    var = tsum(mul(centered, centered), axis=1) * (1.0 / d)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, gain), bias)


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if rate <= 0.0:
        return _coerce(x)
    keep = (rng.random(_coerce(x).shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))
