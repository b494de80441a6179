"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation builds a node that remembers its parents and a closure
mapping the output adjoint to the input adjoints.  There is deliberately
no implicit broadcasting: binary ops require identical shapes, and the
only ways to combine tensors of different shape are ``scale`` (python
scalar), ``add_bias`` (explicit per-axis bias) and ``expand`` (scalar
tensor to a full shape).

``backward`` never mutates tensors; it returns a fresh gradient map, so
calling it twice on the same graph yields identical gradients.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import (
    ContractError,
    DegenerateBatchError,
    DimensionError,
    DomainError,
    NonFiniteError,
)

BN_EPS = 1e-5

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Immutable n-dimensional float64 array that records its provenance."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # takes ownership of a freshly computed array without copying
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.name = None
        t._parents = ()
        t._backward = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def assign(self, value: np.ndarray) -> None:
        """Rebind the payload of a leaf parameter (optimizer use only)."""
        if self._parents:
            raise ContractError("only leaf tensors can be reassigned")
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise DimensionError(f"cannot assign shape {arr.shape} to tensor of shape {self.data.shape}")
        arr.flags.writeable = False
        self.data = arr

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor._wrap(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


# ---------------------------------------------------------------- backward


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss`` w.r.t. each named parameter.

    Parameters not reachable from ``loss`` get a zero gradient of matching
    shape.  The graph is left untouched, so repeated calls agree exactly.
    """
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones((), dtype=np.float64)
        for node in reversed(topological_order(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ContractError(f"gradient shape {pg.shape} does not match input shape {parent.shape}")
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    return {name: np.array(grads.get(id(p), np.zeros(p.shape))) for name, p in params.items()}


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _node(a.data + float(c), (a,), lambda g: (g,), "add_scalar")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def softplus_array(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    # log(1 + e^t) = max(t, 0) + log1p(e^-|t|), overflow free
    return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))


def sigmoid_array(t: np.ndarray) -> np.ndarray:
    return expit(np.asarray(t, dtype=np.float64))


def softplus(a: Tensor) -> Tensor:
    s = sigmoid_array(a.data)
    return _node(softplus_array(a.data), (a,), lambda g: (g * s,), "softplus")


def sigmoid(a: Tensor) -> Tensor:
    s = sigmoid_array(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # reported below as NonFiniteError
        e = np.exp(a.data)
    return _node(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError(f"log of non-positive entry (min {a.data.min()!r})")
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where clamping was active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def mask_mul(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant array of the same shape (no gradient to it)."""
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != a.shape:
        raise DimensionError(f"mask_mul: shapes {a.shape} and {m.shape} differ")
    return _node(a.data * m, (a,), lambda g: (g * m,), "mask_mul")


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "where")
    c = np.asarray(cond, dtype=bool)
    if c.shape != a.shape:
        raise DimensionError(f"where: condition shape {c.shape} vs {a.shape}")
    return _node(np.where(c, a.data, b.data), (a, b), lambda g: (g * c, g * ~c), "where")


def expand(s: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicitly broadcast a scalar tensor to ``shape``."""
    if s.shape != ():
        raise DimensionError(f"expand needs a scalar tensor, got {s.shape}")
    shape = tuple(shape)
    return _node(np.full(shape, float(s.data)), (s,), lambda g: (np.asarray(g.sum()),), "expand")


def add_bias(x: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    """Add a 1-d bias along ``axis`` (feature axis for 2-d, channel axis for 4-d)."""
    if b.ndim != 1 or x.shape[axis] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    red = tuple(i for i in range(x.ndim) if i != axis)
    return _node(x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=red)), "add_bias")


# ---------------------------------------------------------------- shape / reduce


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.ndim for ax in axes)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _node(a.data.sum(axis=axes), (a,), bw, "sum")


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    out = sum(a, axis)
    n = a.size // max(out.size, 1) if a.size else 1
    return scale(out, 1.0 / n)


def global_avg_pool(x: Tensor) -> Tensor:
    """[b, c, h, w] -> [b, c]."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool needs a 4-d tensor, got {x.shape}")
    return mean(x, axis=(2, 3))


def sum_scalars(items: Iterable[Tensor]) -> Tensor:
    """Sum of scalar tensors, left to right."""
    total = None
    for t in items:
        total = t if total is None else add(total, t)
    return total if total is not None else Tensor(0.0)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: str = "same") -> Tensor:
    """2-d cross-correlation of ``x`` [b,c,h,w] with ``k`` [o,c,kh,kw].

    ``pad="same"`` splits the total padding with the extra row/column at the
    bottom/right; ``"valid"`` uses none.
    """
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {k.shape}")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    b, c, h, w = x.shape
    o, ck, kh, kw = k.shape
    if ck != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel {k.shape} expects {ck}")
    if pad == "same":
        pt, pb = _same_pads(h, kh, stride)
        pl, pr = _same_pads(w, kw, stride)
    elif pad == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {pad!r}")
    hp, wp = h + pt + pb, w + pl + pr
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    kmat = k.data.reshape(o, -1)

    def columns() -> np.ndarray:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)

    out = (columns() @ kmat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dk = (g2.T @ columns()).reshape(k.shape) if k.requires_grad else None
        if not x.requires_grad:
            return None, dk
        dcols = (g2 @ kmat).reshape(b, ho, wo, c, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, pt:pt + h, pl:pl + w], dk

    return _node(np.ascontiguousarray(out), (x, k), bw, "conv2d")


# ---------------------------------------------------------------- normalization


class BatchNormState:
    """Running statistics for one batchnorm layer."""

    def __init__(self, channels: int, momentum: float = 0.9):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum


def batchnorm(x: Tensor, gamma: Tensor, beta_shift: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization; channel axis is 1 for both 2-d and 4-d input.

    Train mode normalizes with batch statistics (variance floor ``BN_EPS``)
    and updates ``state`` in place; eval mode uses the running statistics.
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batchnorm expects 2-d or 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta_shift.shape != (c,):
        raise DimensionError(f"batchnorm: gamma {gamma.shape}/beta {beta_shift.shape} vs {c} channels")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    view = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    xd = x.data
    gd = gamma.data.reshape(view)
    if training:
        if x.shape[0] < 2:
            raise DegenerateBatchError("batchnorm in train mode needs a batch of at least 2")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = state.momentum
        state.running_mean = m * state.running_mean + (1 - m) * mu
        state.running_var = m * state.running_var + (1 - m) * var
    else:
        mu, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (xd - mu.reshape(view)) * inv.reshape(view)
    out = xhat * gd + beta_shift.data.reshape(view)
    n = xd.size // c

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd
        if training:
            dx = (inv.reshape(view) / n) * (
                n * dxhat - dxhat.sum(axis=axes).reshape(view) - xhat * (dxhat * xhat).sum(axis=axes).reshape(view)
            )
        else:
            dx = dxhat * inv.reshape(view)
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta_shift), bw, "batchnorm")


# ---------------------------------------------------------------- losses


def _logsumexp(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]


def softmax_array(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [b, k], got {logits.shape}")
    b, k = logits.shape
    y = np.asarray(labels)
    if y.shape != (b,):
        raise DimensionError(f"labels shape {y.shape} does not match batch {b}")
    if not np.issubdtype(y.dtype, np.integer):
        y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= k):
        raise IndexError(f"label out of range [0, {k})")
    z = logits.data
    lse = _logsumexp(z)
    loss = np.mean(lse - z[np.arange(b), y])

    def bw(g):
        p = softmax_array(z)
        p[np.arange(b), y] -= 1.0
        return (p * (g / b),)

    return _node(np.asarray(loss), (logits,), bw, "softmax_cross_entropy")


def bernoulli_nll(logits: Tensor, target) -> Tensor:
    """Bernoulli negative log-likelihood of ``target`` under sigmoid(logits).

    Summed over all non-batch axes, averaged over the batch.
    """
    t = np.asarray(target, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"target shape {t.shape} vs logits {logits.shape}")
    if np.any(t < 0) or np.any(t > 1):
        raise DomainError("Bernoulli targets must lie in [0, 1]")
    z = logits.data
    b = z.shape[0]
    per = softplus_array(z) - t * z
    loss = per.reshape(b, -1).sum(axis=1).mean()
    return _node(np.asarray(loss), (logits,), lambda g: ((sigmoid_array(z) - t) * (g / b),), "bernoulli_nll")


# ---------------------------------------------------------------- randomness


class Rng:
    """Seeded random stream; ``child(*keys)`` derives independent substreams.

    Backed by numpy's PCG64 bit generator, whose output for a given seed
    sequence is platform independent.
    """

    def __init__(self, seed: int = 0, stream: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.stream)))

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, self.stream + tuple(keys))

    def normal(self, shape) -> np.ndarray:
        return self.gen.standard_normal(tuple(shape))

    def uniform(self, shape=None) -> np.ndarray:
        return self.gen.random(shape)

    def integers(self, low: int, high: int | None = None, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"


def sample_standard_normal(shape, rng: Rng) -> Tensor:
    """i.i.d. N(0, 1) draws as a constant (no-gradient) tensor."""
    return Tensor(rng.normal(shape))
