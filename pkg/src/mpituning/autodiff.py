"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation builds a node that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.  The graph is
only materialised for tensors that (transitively) require gradients, so the
frozen part of a detector costs no gradient bookkeeping at all.

Broadcasting follows numpy's right-aligned rules: missing leading axes and unit
axes are stretched, and the backward pass sums the gradient back over them.

Gradients are written only to leaves.  A leaf that already holds a gradient
makes ``backward`` raise unless ``accumulate=True`` is passed, so forgetting to
reset between optimisation steps is caught instead of silently doubling.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad}{tag})"

    # -- operators -----------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms --------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self, accumulate=False):
        backward(self, accumulate=accumulate)

    def zero_grad(self):
        self.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, backward_fn, op) -> Tensor:
    """Wrap ``data`` as the output of a custom op.

    ``backward_fn`` maps the upstream gradient to a tuple with one entry per
    parent (``None`` for parents that need no gradient).
    """
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), bw, "div")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "maximum")
    pick_a = a.data >= b.data

    def bw(g):
        return unbroadcast(g * pick_a, a.shape), unbroadcast(g * ~pick_a, b.shape)

    return make_node(np.where(pick_a, a.data, b.data), (a, b), bw, "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "minimum")
    pick_a = a.data <= b.data

    def bw(g):
        return unbroadcast(g * pick_a, a.shape), unbroadcast(g * ~pick_a, b.shape)

    return make_node(np.where(pick_a, a.data, b.data), (a, b), bw, "minimum")


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------

def neg(x) -> Tensor:
    x = as_tensor(x)
    return make_node(-x.data, (x,), lambda g: (-g,), "neg")


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    p = float(exponent)
    return make_node(x.data**p, (x,), lambda g: (g * p * x.data ** (p - 1.0),), "pow")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return make_node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "absolute")


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return make_node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def swish(x) -> Tensor:
    """x * sigmoid(x)."""
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = x.data * s
    return make_node(out, (x,), lambda g: (g * (s + out * (1.0 - s)),), "swish")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sin(x) -> Tensor:
    """Constant-only sine (no gradient is recorded)."""
    return Tensor(np.sin(as_tensor(x).data))


def cos(x) -> Tensor:
    """Constant-only cosine (no gradient is recorded)."""
    return Tensor(np.cos(as_tensor(x).data))


# ---------------------------------------------------------------------------
# reductions and normalisation
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim, op):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"{op}: axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim, "reduce_sum")
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(out, (x,), bw, "sum")


def reduce_mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim, "reduce_mean")
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return reduce_sum(x, axes, keepdims) * (1.0 / count)


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    (ax,) = _norm_axis(axis, x.ndim, "softmax")
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return make_node(s, (x,), bw, "softmax")


def layer_norm(x, gain, bias, eps=1e-5) -> Tensor:
    """Normalise over the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ContractError(f"layer_norm: eps must be positive, got {eps}")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: feature dim {d} does not match gain {gain.shape} / bias {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        return gx, gg, gb

    return make_node(out, (x, gain, bias), bw, "layer_norm")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes into rows: one large GEMM instead of many small ones
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(*lead, b.shape[-1])

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return make_node(out, (a, b), bw2, "matmul")

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight + bias with weight laid out (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for {x.ndim}-d tensor")
    inverse = np.argsort([a % x.ndim for a in axes])
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(x, a1, a2) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, tuple(axes))


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x, index) -> Tensor:
    """numpy-style indexing, including integer-array gathers."""
    x = as_tensor(x)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    try:
        out = x.data[index]
    except IndexError as exc:
        raise DimensionError(f"getitem: {exc} (shape {x.shape})") from None
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_node(np.array(out, dtype=DTYPE), (x,), bw, "getitem")


def concat(tensors: Sequence, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: need at least one tensor")
    nd = tensors[0].ndim
    (ax,) = _norm_axis(axis, nd, "concat")
    for t in tensors[1:]:
        if t.ndim != nd or any(
            t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax
        ):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in tensors]} differ off axis {ax}"
            )
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return make_node(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def stack(tensors: Sequence, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` that require gradients, parents first."""
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, accumulate: bool = False) -> None:
    """Populate ``.grad`` on every leaf that requires gradients.

    Raises ContractError for a non-scalar loss, or when a leaf already holds a
    gradient and ``accumulate`` is false.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not connected to any tensor that requires grad")
    order = topological_order(loss)
    if not accumulate:
        stale = [n for n in order if n.is_leaf and n.grad is not None]
        if stale:
            names = ", ".join(n.name or repr(n) for n in stale[:3])
            raise ContractError(f"backward: gradients were not reset before this pass ({names})")

    grads = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
    indices: np.ndarray | None = None,
) -> float:
    """Max relative error between the analytic and central-difference gradients.

    Relative error per element is ``|analytic - numeric| / max(1e-12, |numeric|)``.
    ``max_elements`` checks a random subset of entries for large tensors and
    ``indices`` an explicit set of flat positions.  Any NaN turns the result
    into ``inf``.
    """
    was = x.requires_grad
    saved_grad = x.grad
    x.requires_grad = True
    x.grad = None
    try:
        out = f(x)
        if not out.requires_grad:
            analytic = np.zeros(x.shape)
        else:
            backward(out)
            analytic = x.grad if x.grad is not None else np.zeros(x.shape)
        flat = x.data.reshape(-1)
        idx = np.arange(flat.size) if indices is None else np.asarray(indices)
        if max_elements is not None and idx.size > max_elements:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(idx, size=max_elements, replace=False))
        worst = 0.0
        with no_grad_for(x):
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = f(x).item()
                flat[i] = orig - h
                fm = f(x).item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                ana = analytic.reshape(-1)[i]
                if not (math.isfinite(num) and math.isfinite(ana)):
                    return math.inf
                worst = max(worst, abs(ana - num) / max(1e-12, abs(num)))
        return worst
    finally:
        x.grad = saved_grad
        x.requires_grad = was


class no_grad_for:
    """Temporarily mark a tensor as not requiring grad (cheap perturbation loops)."""

    def __init__(self, *tensors):
        self.tensors = tensors
        self.flags = [t.requires_grad for t in tensors]

    def __enter__(self):
        for t in self.tensors:
            t.requires_grad = False
        return self

    def __exit__(self, *exc):
        for t, f in zip(self.tensors, self.flags):
            t.requires_grad = f
        return False


# ---------------------------------------------------------------------------
# parameter registry
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameters, each flagged trainable or frozen.

    A tensor's ``requires_grad`` mirrors its trainable flag so frozen weights are
    never differentiated.  ``lock()`` pins the flags for the duration of a run.
    """

    def __init__(self):
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        self._trainable: dict[str, bool] = {}
        self.locked = False

    def add(self, name: str, data, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise ContractError(f"parameter {name!r} already registered")
        t = Tensor(np.array(data, dtype=DTYPE), requires_grad=trainable, name=name)
        self._tensors[name] = t
        self._trainable[name] = bool(trainable)
        return t

    def __getitem__(self, name) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def __iter__(self):
        return iter(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._tensors if n.startswith(prefix)]

    def is_trainable(self, name) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n, f in self._trainable.items() if f]

    def frozen_names(self) -> list[str]:
        return [n for n, f in self._trainable.items() if not f]

    def set_trainable(self, names: Iterable[str] | str, flag: bool) -> None:
        if self.locked:
            raise ContractError("trainable flags are locked during a training run")
        if isinstance(names, str):
            names = [names]
        for n in names:
            if n not in self._tensors:
                raise KeyError(n)
            self._trainable[n] = bool(flag)
            self._tensors[n].requires_grad = bool(flag)

    def freeze_all(self) -> None:
        self.set_trainable(list(self._tensors), False)

    def lock(self):
        store = self

        class _Lock:
            def __enter__(self_):
                store.locked = True
                return store

            def __exit__(self_, *exc):
                store.locked = False
                return False

        return _Lock()

    def count(self, trainable_only: bool = False, prefix: str = "") -> int:
        return sum(
            t.size for n, t in self._tensors.items()
            if n.startswith(prefix) and (self._trainable[n] or not trainable_only)
        )

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def snapshot(self, names: Iterable[str] | None = None) -> dict[str, bytes]:
        names = self._tensors if names is None else names
        return {n: self._tensors[n].data.tobytes() for n in names}

    def changed_since(self, snap: dict[str, bytes]) -> list[str]:
        """Names whose bytes differ from ``snap``."""
        return [n for n, b in snap.items() if self._tensors[n].data.tobytes() != b]


class inference:
    """Disable gradient tracking on every tensor of the given stores."""

    def __init__(self, *stores: ParamStore):
        self.stores = stores
        self.saved = []

    def __enter__(self):
        for store in self.stores:
            for t in store._tensors.values():
                self.saved.append((t, t.requires_grad))
                t.requires_grad = False
        return self

    def __exit__(self, *exc):
        for t, flag in self.saved:
            t.requires_grad = flag
        self.saved.clear()
        return False
