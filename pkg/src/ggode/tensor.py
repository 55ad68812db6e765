"""Float64 tensors with a dynamic reverse-mode tape.

Every operation records its inputs and a closure mapping the output
gradient to input gradients. ``Tensor.backward`` replays the recorded graph
in reverse topological order. Gradients accumulate into the ``grad`` buffer
of leaf tensors only, so repeated ``backward`` calls add up until
``zero_grad`` is called.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class NumericError(FloatingPointError):
    """Raised when a validity sweep finds NaN or Inf values."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- introspection -------------------------------------------------
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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(_topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), evaluated as max(x, 0) + log1p(e^-|x|)."""
    ad = a.data
    out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * ad))
    return _make(out, (a,), lambda g: (g * sig,))


# -- reductions and shape ------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = math.prod(a.shape[ax] for ax in axes)
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def index(a: Tensor, idx) -> Tensor:
    shape = a.shape
    basic = _is_basic_index(idx)

    def backward(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward)


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Gather rows ``a[rows]`` along axis 0; the backward is a scatter-add."""
    n = a.shape[0]
    return _make(a.data[rows], (a,), lambda g: (_scatter_rows(g, rows, n),))


def segment_sum(a: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of ``a`` that share a segment id; empty segments give zeros."""
    return _make(_scatter_rows(a.data, segments, n_segments), (a,),
                 lambda g: (g[segments],))


def _scatter_rows(values: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    tail = values.shape[1:]
    width = math.prod(tail)
    if len(rows) == 0 or width == 0:
        return np.zeros((n,) + tail)
    # bincount over flattened (row, column) slots is much faster than np.add.at
    flat = (np.asarray(rows)[:, None] * width + np.arange(width)).ravel()
    return np.bincount(flat, weights=values.reshape(-1), minlength=n * width).reshape((n,) + tail)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 1 or bd.ndim == 1:
        def backward(g):
            if ad.ndim == 1 and bd.ndim == 1:
                return g * bd, g * ad
            if ad.ndim == 1:
                return bd @ g, np.outer(ad, g)
            return np.outer(g, bd), ad.T @ g
    else:
        def backward(g):
            ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
            return (None if ga is None else _unbroadcast(ga, ad.shape),
                    None if gb is None else _unbroadcast(gb, bd.shape))
    return _make(ad @ bd, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused ``x @ w + b`` over the last axis of ``x``."""
    xd = x.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = (x2 @ w.data + b.data).reshape(lead + (w.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.data.T).reshape(xd.shape) if x.requires_grad else None
        return gx, x2.T @ g2, g2.sum(axis=0)

    return _make(out, (x, w, b), backward)


def mlp2_apply(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Fused ``tanh(x @ w1 + b1) @ w2 + b2`` with a hand-written backward."""
    xd = x.data
    if xd.shape[-1] != w1.shape[0]:
        raise ValueError(f"input width {xd.shape[-1]} != layer-1 input {w1.shape[0]}")
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    h = np.tanh(x2 @ w1.data + b1.data)
    out = (h @ w2.data + b2.data).reshape(lead + (w2.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gh = g2 @ w2.data.T
        gpre = gh * (1.0 - h * h)
        gx = (gpre @ w1.data.T).reshape(xd.shape) if x.requires_grad else None
        return gx, x2.T @ gpre, gpre.sum(axis=0), h.T @ g2, g2.sum(axis=0)

    return _make(out, (x, w1, b1, w2, b2), backward)


# -- composite primitives ----------------------------------------------------

def softmax(v: Tensor) -> Tensor:
    v = as_tensor(v)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    e = exp(v - float(v.data.max()))
    return e / e.sum()


def segment_softmax(scores: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Softmax of ``scores`` within each segment (e.g. the in-edges of a node)."""
    if scores.size == 0:
        return scores
    shift = np.full(n_segments, -np.inf)
    np.maximum.at(shift, segments, scores.data)
    e = exp(scores - shift[segments])
    denom = segment_sum(e, segments, n_segments)
    return e / take_rows(denom, segments)


def layer_norm(x: Tensor, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    mu = mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axis=-1, keepdims=True)
    return xc / sqrt(var + eps) * gain + bias


def logsumexp(v: Tensor, axis: int = -1) -> Tensor:
    shift = np.max(v.data, axis=axis, keepdims=True)
    return log(exp(v - shift).sum(axis=axis)) + np.squeeze(shift, axis=axis)


def check_finite(tensors: Iterable[Tensor], where: str = "") -> None:
    """Validity sweep: raise ``NumericError`` naming the first bad tensor."""
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            label = t.name or repr(t)
            raise NumericError(f"non-finite values in {label}{' ' + where if where else ''}")
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            label = t.name or repr(t)
            raise NumericError(f"non-finite gradient in {label}{' ' + where if where else ''}")


# -- gradient checking -------------------------------------------------------

def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)


def grad_check(f: Callable[[Tensor], Tensor], theta: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the parameter tensor to a scalar tensor.
    """
    theta.requires_grad = True
    return grad_check_many(lambda: f(theta), [theta], eps)


def grad_check_many(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                    eps: float = 1e-5, max_coords: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Like :func:`grad_check` for a closure over several parameter tensors.

    With ``max_coords`` set, only that many randomly chosen coordinates per
    tensor are probed.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                up = float(loss_fn().data)
                flat[i] = orig - eps
                down = float(loss_fn().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            worst = max(worst, float(_rel_err(analytic.reshape(-1)[i], numeric)))
        p.grad = None
    return worst


class Rng:
    """Seeded random stream; ``child`` derives independent named sub-streams."""

    def __init__(self, seed: int = 0, *, _keys: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.keys = _keys
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *_keys])))

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, _keys=self.keys + tuple(int(k) for k in keys))

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self.gen.normal(0.0, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, a, size=None, replace: bool = True):
        return self.gen.choice(a, size=size, replace=replace)

    def permutation(self, x):
        return self.gen.permutation(x)


class Module:
    """Parameter container; walks attributes to enumerate tensors by name.

    A tensor reachable through several attributes (shared weights) is listed
    once, under its first name.
    """

    def named_parameters(self, prefix: str = "", _seen: set | None = None):
        seen = set() if _seen is None else _seen
        for key, val in vars(self).items():
            yield from _walk(val, f"{prefix}{key}", seen)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def _walk(val, name: str, seen: set):
    if isinstance(val, Tensor):
        if id(val) not in seen:
            seen.add(id(val))
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".", seen)
    elif isinstance(val, (list, tuple)):
        for k, item in enumerate(val):
            yield from _walk(item, f"{name}.{k}", seen)


class Mlp2(Module):
    """Two affine layers with a tanh hidden activation."""

    def __init__(self, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor):
        if w1.shape[1] != w2.shape[0]:
            raise ValueError("layer-1 output width must equal layer-2 input width")
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    @classmethod
    def init(cls, n_in: int, n_hidden: int, n_out: int, rng: Rng, name: str = "mlp") -> "Mlp2":
        return cls(*_affine(n_in, n_hidden, rng, f"{name}.1"), *_affine(n_hidden, n_out, rng, f"{name}.2"))

    @property
    def n_in(self) -> int:
        return self.w1.shape[0]

    @property
    def n_out(self) -> int:
        return self.w2.shape[1]

    def __call__(self, x) -> Tensor:
        return mlp2_apply(as_tensor(x), self.w1, self.b1, self.w2, self.b2)


def _affine(n_in: int, n_out: int, rng: Rng, name: str) -> tuple[Tensor, Tensor]:
    bound = 1.0 / math.sqrt(n_in)
    w = Tensor(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True, name=f"{name}.weight")
    b = Tensor(rng.uniform(-bound, bound, (n_out,)), requires_grad=True, name=f"{name}.bias")
    return w, b


def init_matrix(n_in: int, n_out: int, rng: Rng, name: str) -> Tensor:
    """Weight matrix drawn uniformly from [-1/sqrt(n_in), 1/sqrt(n_in)]."""
    bound = 1.0 / math.sqrt(n_in)
    return Tensor(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True, name=name)


def forward_mlp2(net: Mlp2, x) -> Tensor:
    return net(x)
