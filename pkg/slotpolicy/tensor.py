"""
tensor.py - Minimal reverse-mode automatic differentiation on numpy arrays

A Tensor wraps an ndarray in the engine's precision dtype. Ops applied to
tensors that require gradients record a node on the tape; ``backward()``
walks the tape once in reverse topological order and accumulates exact
analytic gradients into the leaf tensors.

Broadcasting is limited to scalars and trailing-suffix operands (bias add).
Anything else is a ShapeError naming the op and both shapes.
"""

import os
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NonFiniteError, ShapeError, TapeError

PRECISIONS = {"f32": np.float32, "f64": np.float64}

_dtype = PRECISIONS.get(os.environ.get("SLOTPOLICY_PRECISION", "f32"), np.float32)
_local = threading.local()

Scalar = Union[int, float]


def get_precision() -> str:
    """Name of the active precision mode ('f32' or 'f64')."""
    return "f64" if _dtype == np.float64 else "f32"


def set_precision(name: str) -> None:
    """
    Select the engine precision.

    Must be called before any model is built: tensors keep the dtype they
    were created with and ops refuse to mix dtypes.
    """
    global _dtype
    if name not in PRECISIONS:
        raise ValueError(f"Invalid precision: {name}. Use 'f32' or 'f64'")
    _dtype = PRECISIONS[name]


def dtype():
    return _dtype


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    """Ops inside this block record nothing on the tape."""
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    """
    n-dimensional array with optional gradient tape participation.

    Args:
        data: Array-like payload, converted to the engine dtype
        requires_grad: Accumulate gradients into ``.grad`` on backward
        name: Optional label used in error messages and checkpoints

    Examples:
        >>> x = Tensor([1.0, 2.0], requires_grad=True)
        >>> (x * x).sum().backward()
        >>> x.grad
        array([2., 4.])
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- tape ---------------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Backpropagate from this tensor.

        The tape is consumed: interior nodes release their closures, and a
        second backward over any of them raises TapeError instead of
        silently accumulating stale gradients.
        """
        if not self.requires_grad:
            raise TapeError(f"backward: tensor ({self._op}) does not require grad")
        if self._consumed:
            raise TapeError(f"backward: tape already consumed at op '{self._op}'; run the forward pass again")
        if grad is None:
            if self.data.size != 1:
                raise TapeError(f"backward: non-scalar output of shape {self.shape} needs an explicit gradient")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"backward: seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

        for node in order:
            if node._backward is not None:
                node._consumed = True
                node._backward = None
                node._parents = ()

    # -- operator sugar -----------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _topological_order(root: Tensor) -> List[Tensor]:
    """Nodes reachable from root, root first, each before its parents."""
    post: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        if node._consumed:
            raise TapeError(f"backward: tape already consumed at op '{node._op}'; run the forward pass again")
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    post.reverse()
    return post


def _wrap(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def as_tensor(value) -> Tensor:
    """Return ``value`` unchanged if it is a Tensor, else wrap it as a constant."""
    return _wrap(value)


def _check_dtypes(op: str, *tensors: Tensor) -> None:
    first = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != first:
            raise ShapeError(f"{op}: dtype mismatch {first} vs {t.data.dtype}")


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)) and all(np.all(np.isfinite(p.data)) for p in parents):
        raise NonFiniteError(f"{op}: produced non-finite values from finite inputs")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out._consumed = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _is_suffix(small: Tuple[int, ...], big: Tuple[int, ...]) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _broadcast_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or _is_suffix(a.shape, b.shape) or _is_suffix(b.shape, a.shape):
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape} (only scalar/suffix broadcast supported)")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape((-1,) + shape).sum(axis=0)


# -- elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_dtypes("add", a, b)
    _broadcast_shapes("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_dtypes("sub", a, b)
    _broadcast_shapes("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_dtypes("mul", a, b)
    _broadcast_shapes("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_dtypes("div", a, b)
    _broadcast_shapes("div", a, b)

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make("div", a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


# -- elementwise unary ----------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _make("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def softplus(x: Tensor) -> Tensor:
    y = np.logaddexp(0.0, x.data).astype(x.data.dtype)
    sig = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _make("softplus", y, (x,), lambda g: (g * sig,))


# -- linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Batched matrix product.

    ``a`` is (..., n, k); ``b`` is either (..., k, m) with identical batch
    dims or a 2-D weight (k, m) shared across the batch.
    """
    _check_dtypes("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            k, m = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), backward)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """
    2-D convolution lowered to a single matmul (im2col).

    Args:
        x: Input (N, H, W, C_in)
        w: Kernel (kh, kw, C_in, C_out)
        b: Optional bias (C_out,)
        stride: Spatial stride
        pad: Zero padding on every border

    Returns:
        Output (N, H_out, W_out, C_out)
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    if b is not None and b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match kernel {w.shape}")
    _check_dtypes("conv2d", x, w, *([b] if b is not None else []))
    n, h, wd, c = x.shape
    kh, kw, _, co = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape} with pad {pad}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    patches = [xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
               for i in range(kh) for j in range(kw)]
    cols = np.stack(patches, axis=3).reshape(n * ho * wo, kh * kw * c)
    w2 = w.data.reshape(kh * kw * c, co)
    out = cols @ w2
    if b is not None:
        out = out + b.data
    out = out.reshape(n, ho, wo, co)

    def backward(g):
        g2 = g.reshape(-1, co)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ w2.T).reshape(n, ho, wo, kh, kw, c)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, pad:pad + h, pad:pad + wd, :] if pad else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _make("conv2d", out, parents, backward)


def upsample(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of an (N, H, W, C) tensor."""
    if x.ndim != 4:
        raise ShapeError(f"upsample: expected (N, H, W, C), got {x.shape}")
    if factor == 1:
        return x
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def backward(g):
        return (g.reshape(n, h, factor, w, factor, c).sum(axis=(2, 4)),)

    return _make("upsample", out, (x,), backward)


# -- normalisation ----------------------------------------------------------------

def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: input {x.shape} with gain {gain.shape} and bias {bias.shape}")
    _check_dtypes("layernorm", x, gain, bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).reshape(-1, d).sum(axis=0), g.reshape(-1, d).sum(axis=0)

    return _make("layernorm", out, (x, gain, bias), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
    y = x.data - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", y, (x,), backward)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
    p = np.exp(x.data - lse)
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * p,)

    return _make("logsumexp", out, (x,), backward)


def renormalize(x: Tensor, axis: int, eps: float = 0.0) -> Tensor:
    """Divide by the sum over ``axis`` (plus eps), e.g. to turn weights into a weighted mean."""
    s = x.data.sum(axis=axis, keepdims=True) + eps
    y = x.data / s

    def backward(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) / s,)

    return _make("renormalize", y, (x,), backward)


# -- reductions and shape ops -------------------------------------------------------

def _norm_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk, x.shape).copy(),)

    return _make("sum", np.asarray(out, dtype=x.data.dtype), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    _check_dtypes("concat", *tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}")
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def expand(x: Tensor, axis: int, size: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat the tensor ``size`` times along it."""
    ax = axis if axis >= 0 else x.ndim + 1 + axis
    out = np.repeat(np.expand_dims(x.data, ax), size, axis=ax)
    return _make("expand", out, (x,), lambda g: (g.sum(axis=ax),))


def take_rows(table: Tensor, indices) -> Tensor:
    """Embedding lookup: rows of a 2-D table selected by integer indices."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"take_rows: indices out of range for table {table.shape}")

    def backward(g):
        gt = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make("take_rows", table.data[idx], (table,), backward)


def getitem(x: Tensor, key) -> Tensor:
    """Basic indexing (ints, slices, Ellipsis, None)."""
    keys = key if isinstance(key, tuple) else (key,)
    for k in keys:
        if not (k is None or k is Ellipsis or isinstance(k, (int, np.integer, slice))):
            raise ShapeError(f"getitem: only basic indexing is supported, got {type(k).__name__}")
    out = np.array(x.data[key])

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[key] += g
        return (gx,)

    return _make("getitem", out, (x,), backward)


# -- composite cells -------------------------------------------------------------------

def gru_cell(x: Tensor, h: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """
    Gated recurrent unit update, gates ordered (reset, update, new).

    r = σ(x W_ir + b_ir + h W_hr + b_hr)
    z = σ(x W_iz + b_iz + h W_hz + b_hz)
    n = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
    h' = (1 − z) ⊙ n + z ⊙ h
    """
    d = h.shape[-1]
    if w_ih.shape != (x.shape[-1], 3 * d) or w_hh.shape != (d, 3 * d):
        raise ShapeError(f"gru_cell: weights {w_ih.shape}, {w_hh.shape} do not fit input {x.shape} and state {h.shape}")
    gi = add(matmul(x, w_ih), b_ih)
    gh = add(matmul(h, w_hh), b_hh)
    r = sigmoid(add(gi[..., :d], gh[..., :d]))
    z = sigmoid(add(gi[..., d:2 * d], gh[..., d:2 * d]))
    n = tanh(add(gi[..., 2 * d:], mul(r, gh[..., 2 * d:])))
    return add(n, mul(z, sub(h, n)))


def global_norm(tensors: Iterable[Tensor]) -> float:
    """L2 norm of the concatenated gradients of ``tensors``."""
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))
