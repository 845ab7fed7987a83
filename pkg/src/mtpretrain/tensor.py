"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation records its parents and a closure mapping the output
gradient to parent gradients.  ``Tensor.backward`` topologically sorts the
recorded graph and visits each node exactly once in reverse order.  Storage
is a plain C-contiguous ``numpy.float64`` array, so ``t.data.ravel()`` is the
row-major flat buffer and ``t.shape`` the extent list.

Operations whose result could leave the finite range on finite input
(``exp``, ``log``, ``sqrt``, division, negative powers) raise
:class:`~mtpretrain.errors.DomainError` instead of silently storing inf/nan.
"""

import contextlib
import math
import threading

import numpy as np

from .errors import DomainError

__all__ = [
    "Tensor", "as_tensor", "no_grad", "is_grad_enabled",
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "absolute",
    "sqrt", "sigmoid", "tanh", "gelu", "matmul", "tsum", "mean",
    "reshape", "transpose", "getitem", "concat", "where", "softmax",
    "log_softmax", "clamp_max", "clamp", "l2_normalize",
]

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """N-dimensional float64 array that can take part in reverse-mode AD.

    Leaf tensors created with ``requires_grad=True`` are parameters: they own
    a gradient accumulator (``grad``) that ``backward`` adds into.  Derived
    tensors keep their parents and a backward closure while gradients are
    enabled.
    """

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name
        self._parents = ()
        self._backward = None

    @classmethod
    def _make(cls, data, parents, backward):
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        out.data = data if data.flags.c_contiguous else data.copy()
        out.grad = None
        out.name = None
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic protocol ---------------------------------------------------
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
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        """Same values, no graph connection (the stop-gradient)."""
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- reverse mode -----------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Returns the list of leaves reached, in the order they were visited.
        """
        if self.size != 1:
            raise ValueError("backward() needs a scalar output")
        if not self.requires_grad:
            return []
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): np.ones_like(self.data)}
        reached = []
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                reached.append(node)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return reached

    # -- operators ----------------------------------------------------------
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
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return absolute(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise arithmetic ------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return Tensor._make(out, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    """``a ** exponent`` for a constant scalar exponent."""
    a = as_tensor(a)
    e = float(exponent)
    if e < 0 and np.any(a.data == 0):
        raise DomainError("zero raised to a negative power")
    if e != int(e) and np.any(a.data < 0):
        raise DomainError("negative base with fractional exponent")
    out = np.power(a.data, e)

    def backward(g):
        if e == 0:
            return (np.zeros_like(a.data),)
        if e == 1:
            return (g,)
        return (g * e * np.power(a.data, e - 1),)

    return Tensor._make(out, (a,), backward)


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp produced a non-finite value")
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    if not np.all(a.data > 0):
        raise DomainError("log of a non-positive value")
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))


def absolute(a):
    a = as_tensor(a)
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sqrt(a):
    a = as_tensor(a)
    if not np.all(a.data > 0):
        raise DomainError("sqrt needs strictly positive input for a finite gradient")
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Tanh-approximated GELU (smooth everywhere, so finite differences agree)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (a,), backward)


# -- linear algebra and reductions -----------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least two dimensions")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if b.ndim == 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return _unbroadcast(ga, a.shape), gb
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make(out, (a, b), backward)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(a.data, axes), (a,),
                        lambda g: (np.transpose(g, inverse),))


def getitem(a, idx):
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._make(a.data[idx], (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(out, tuple(tensors), backward)


def where(cond, a, b):
    """Select from ``a`` where ``cond`` (a constant boolean array) else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return Tensor._make(np.where(cond, a.data, b.data), (a, b), backward)


# -- normalizers ------------------------------------------------------------

def _check_tau(tau):
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")


def softmax(a, tau=1.0, axis=-1):
    """Max-stabilized softmax of ``a / tau`` along ``axis``."""
    _check_tau(tau)
    a = as_tensor(a)
    z = a.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / tau,)

    return Tensor._make(out, (a,), backward)


def log_softmax(a, tau=1.0, axis=-1):
    _check_tau(tau)
    a = as_tensor(a)
    z = a.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        p = np.exp(out)
        return ((g - p * g.sum(axis=axis, keepdims=True)) / tau,)

    return Tensor._make(out, (a,), backward)


def clamp_max(a, t_max):
    """``min(a, t_max)``; gradient passes only where ``a < t_max`` strictly."""
    a = as_tensor(a)
    if not math.isfinite(t_max):
        if t_max > 0:
            return Tensor._make(a.data.copy(), (a,), lambda g: (g,))
        raise DomainError("clamp threshold must be finite or +inf")
    keep = a.data < t_max
    return Tensor._make(np.where(keep, a.data, t_max), (a,),
                        lambda g: (np.where(keep, g, 0.0),))


def clamp(a, lo, hi):
    a = as_tensor(a)
    keep = (a.data > lo) & (a.data < hi)
    return Tensor._make(np.clip(a.data, lo, hi), (a,), lambda g: (np.where(keep, g, 0.0),))


def l2_normalize(a, axis=-1, floor=1e-12):
    """Scale slices along ``axis`` to unit L2 norm (norm floored at ``floor``)."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, floor)
    out = a.data / denom
    active = norm > floor

    def backward(g):
        radial = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(active, (g - out * radial) / denom, g / denom),)

    return Tensor._make(out, (a,), backward)
