"""
nn.py - Parameterised layers built on the tensor engine
"""

import math
from typing import Dict, List, Mapping, Tuple

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .rng import Stream
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor owned by a Module."""

    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """
    Base class for anything holding parameters.

    Parameters are discovered from instance attributes in definition order:
    Parameters, sub-Modules, and lists of Modules. Names are dotted paths,
    e.g. ``attn.to_q.weight``.
    """

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, sub in enumerate(value):
                    out.update(sub.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        if strict:
            missing = sorted(set(params) - set(arrays))
            unexpected = sorted(set(arrays) - set(params))
            if missing or unexpected:
                raise KeyError(f"load_arrays: missing {missing[:5]} unexpected {unexpected[:5]}")
        for name, p in params.items():
            if name not in arrays:
                continue
            value = np.asarray(arrays[name])
            if value.shape != p.shape:
                raise ValueError(f"load_arrays: '{name}' has shape {value.shape}, expected {p.shape}")
            p.data = value.astype(p.data.dtype).copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> None:
        """Stop all parameters from participating in the tape."""
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None


def _uniform(stream: Stream, shape: Tuple[int, ...], bound: float, name: str) -> Parameter:
    return Parameter(stream.generator().uniform(-bound, bound, size=shape), name=name)


def _const(value: float, shape: Tuple[int, ...], name: str) -> Parameter:
    return Parameter(np.full(shape, value), name=name)


class Linear(Module):
    """y = x W + b over the last axis."""

    def __init__(self, d_in: int, d_out: int, stream: Stream, bias: bool = True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = _uniform(stream.split("weight"), (d_in, d_out), bound, "weight")
        self.bias = _uniform(stream.split("bias"), (d_out,), bound, "bias") if bias else None
        self.d_in = d_in
        self.d_out = d_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"linear: input {x.shape} does not end in {self.d_in}")
        lead = x.shape[:-1]
        flat = x if x.ndim >= 2 else x.reshape(1, self.d_in)
        y = flat @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y if x.ndim >= 2 else y.reshape(lead + (self.d_out,))


class Conv2d(Module):
    """k×k convolution over NHWC tensors."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stream: Stream, stride: int = 1, pad: int = None):
        bound = 1.0 / math.sqrt(c_in * kernel * kernel)
        self.weight = _uniform(stream.split("weight"), (kernel, kernel, c_in, c_out), bound, "weight")
        self.bias = _uniform(stream.split("bias"), (c_out,), bound, "bias")
        self.stride = stride
        self.pad = kernel // 2 if pad is None else pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = _const(1.0, (dim,), "gain")
        self.bias = _const(0.0, (dim,), "bias")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gain, self.bias, self.eps)


class GRUCell(Module):
    """GRU update of a (..., hidden) state from a (..., d_in) input."""

    def __init__(self, d_in: int, hidden: int, stream: Stream):
        bound = 1.0 / math.sqrt(hidden)
        self.w_ih = _uniform(stream.split("w_ih"), (d_in, 3 * hidden), bound, "w_ih")
        self.w_hh = _uniform(stream.split("w_hh"), (hidden, 3 * hidden), bound, "w_hh")
        self.b_ih = _uniform(stream.split("b_ih"), (3 * hidden,), bound, "b_ih")
        self.b_hh = _uniform(stream.split("b_hh"), (3 * hidden,), bound, "b_hh")

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return T.gru_cell(x, h, self.w_ih, self.w_hh, self.b_ih, self.b_hh)


class MLP(Module):
    """Two-layer perceptron with ReLU."""

    def __init__(self, d_in: int, hidden: int, d_out: int, stream: Stream):
        self.fc1 = Linear(d_in, hidden, stream.split("fc1"))
        self.fc2 = Linear(hidden, d_out, stream.split("fc2"))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Self-attention over the token axis of a (B, L, E) tensor."""

    def __init__(self, dim: int, heads: int, stream: Stream):
        if dim % heads:
            raise ValueError(f"attention dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.to_q = Linear(dim, dim, stream.split("q"), bias=False)
        self.to_k = Linear(dim, dim, stream.split("k"), bias=False)
        self.to_v = Linear(dim, dim, stream.split("v"), bias=False)
        self.proj = Linear(dim, dim, stream.split("proj"))

    def _split(self, x: Tensor) -> Tensor:
        b, l, e = x.shape
        return x.reshape(b, l, self.heads, e // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor) -> Tensor:
        b, l, e = x.shape
        q, k, v = self._split(self.to_q(x)), self._split(self.to_k(x)), self._split(self.to_v(x))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(e // self.heads))
        out = T.softmax(scores, axis=-1) @ v
        return self.proj(out.transpose(0, 2, 1, 3).reshape(b, l, e))


class TransformerBlock(Module):
    """Pre-norm transformer encoder block: x + MHA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, stream: Stream, mlp_ratio: int = 2):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, stream.split("attn"))
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, dim, stream.split("mlp"))

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def position_map(height: int, width: int) -> np.ndarray:
    """
    (height, width, 4) map of each cell centre's distance to the top, bottom,
    left and right borders, in [0, 1].
    """
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy, 1.0 - yy, xx, 1.0 - xx], axis=-1)


class PositionEmbedding(Module):
    """Learned linear projection of the 4-channel border-distance map."""

    def __init__(self, height: int, width: int, dim: int, stream: Stream):
        self.proj = Linear(4, dim, stream)
        self._grid = position_map(height, width)

    def __call__(self) -> Tensor:
        return self.proj(Tensor(self._grid))
