"""
savi.py - Object-centric video encoder (slot attention for video)

Pipeline per clip:

    frames ──CNN + positional encoding──▶ FeatureGrid (N = H'·W' locations)
    frame 0: slots ~ learned Gaussian ──slot attention (iters_first)──▶ S_0
    frame t: predictor(S_{t-1}) ──slot attention (iters_later)──▶ S_t
    every S_t ──spatial broadcast decoder──▶ per-slot RGB + alpha,
                                             alpha softmaxed across slots

The holistic baseline shares the CNN and decoder but pools the feature grid
into a single token per frame, so downstream code sees a SlotSet with K = 1.
"""

import logging
import math
from dataclasses import dataclass, fields
from typing import List, Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import (MLP, Conv2d, GRUCell, LayerNorm, Linear, Module, Parameter,
                 PositionEmbedding, TransformerBlock)
from .rng import Stream
from .tensor import Tensor

logger = logging.getLogger(__name__)

ENCODER_KINDS = ("savi", "holistic")


@dataclass
class SaviConfig:
    """Encoder hyper-parameters (``[encoder]`` config section)."""
    kind: str = "savi"
    image_size: int = 64
    slots: int = 6
    slot_dim: int = 64
    iters_first: int = 3
    iters_later: int = 2
    clip_len: int = 4
    cnn_channels: Tuple[int, ...] = (32, 32, 32, 32, 32)
    cnn_strides: Tuple[int, ...] = (2, 2, 1, 1, 1)
    predictor_depth: int = 1
    predictor_heads: int = 4
    decoder_grid: int = 8
    decoder_channels: int = 32
    mlp_hidden: int = 128

    def validate(self) -> "SaviConfig":
        if self.kind not in ENCODER_KINDS:
            raise ConfigError(f"encoder.kind: expected one of {ENCODER_KINDS}, got '{self.kind}'")
        for f in fields(self):
            value = getattr(self, f.name)
            values = value if isinstance(value, tuple) else (value,)
            if f.name != "kind" and any(v <= 0 for v in values):
                raise ConfigError(f"encoder.{f.name}: all values must be positive, got {value}")
        if len(self.cnn_channels) != len(self.cnn_strides):
            raise ConfigError("encoder.cnn_channels and encoder.cnn_strides must have the same length")
        if self.image_size % self.stride_total:
            raise ConfigError(f"encoder.image_size {self.image_size} not divisible by total CNN stride {self.stride_total}")
        factor = self.image_size // self.decoder_grid
        if self.image_size % self.decoder_grid or factor & (factor - 1):
            raise ConfigError(f"encoder.image_size {self.image_size} must be decoder_grid {self.decoder_grid} "
                              f"times a power of two")
        if self.slot_dim % self.predictor_heads:
            raise ConfigError(f"encoder.slot_dim {self.slot_dim} not divisible by predictor_heads {self.predictor_heads}")
        return self

    @property
    def stride_total(self) -> int:
        return int(np.prod(self.cnn_strides))

    @property
    def feature_size(self) -> int:
        return self.image_size // self.stride_total

    @property
    def upsample_stages(self) -> int:
        return int(round(math.log2(self.image_size // self.decoder_grid)))


@dataclass
class FeatureGrid:
    """Flattened CNN features, positional encoding already added: values (B, H·W, dim)."""
    height: int
    width: int
    dim: int
    values: Tensor


@dataclass
class SlotSet:
    """Slot matrix S_t, batched: slots (B, K, D)."""
    slots: Tensor

    @property
    def K(self) -> int:
        return self.slots.shape[-2]

    @property
    def D(self) -> int:
        return self.slots.shape[-1]


@dataclass
class DecodeResult:
    """Per-slot RGB (B, K, H, W, 3), masks (B, K, H, W), composite (B, H, W, 3)."""
    rgb: Tensor
    masks: Tensor
    composite: Tensor


ArrayLike = Union[np.ndarray, Tensor]


class CnnEncoder(Module):
    """Stack of ReLU conv layers followed by an additive positional encoding."""

    def __init__(self, config: SaviConfig, stream: Stream):
        self.convs = []
        c_in = 3
        for i, (c_out, stride) in enumerate(zip(config.cnn_channels, config.cnn_strides)):
            self.convs.append(Conv2d(c_in, c_out, 3, stream.split("conv", i), stride=stride))
            c_in = c_out
        self.pos = PositionEmbedding(config.feature_size, config.feature_size, c_in, stream.split("pos"))
        self._image_size = config.image_size

    def __call__(self, images: ArrayLike) -> FeatureGrid:
        x = T.as_tensor(images)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if x.ndim != 4 or x.shape[1:] != (self._image_size, self._image_size, 3):
            raise ShapeError(f"encode_frame: expected images of shape (B, {self._image_size}, "
                             f"{self._image_size}, 3), got {x.shape}")
        for conv in self.convs:
            x = T.relu(conv(x))
        x = x + self.pos()
        b, h, w, c = x.shape
        return FeatureGrid(h, w, c, x.reshape(b, h * w, c))


class SlotAttention(Module):
    """
    Iterative slot attention with softmax over the slot axis.

    Each feature location distributes a unit of attention across slots; per
    slot, the attention weights are renormalised over locations to form a
    weighted mean of the values, which drives a GRU update and a residual MLP.
    """

    def __init__(self, feature_dim: int, slot_dim: int, mlp_hidden: int, stream: Stream, eps: float = 1e-8):
        self.norm_inputs = LayerNorm(feature_dim)
        self.to_k = Linear(feature_dim, slot_dim, stream.split("k"), bias=False)
        self.to_v = Linear(feature_dim, slot_dim, stream.split("v"), bias=False)
        self.norm_slots = LayerNorm(slot_dim)
        self.to_q = Linear(slot_dim, slot_dim, stream.split("q"), bias=False)
        self.gru = GRUCell(slot_dim, slot_dim, stream.split("gru"))
        self.norm_mlp = LayerNorm(slot_dim)
        self.mlp = MLP(slot_dim, mlp_hidden, slot_dim, stream.split("mlp"))
        self.eps = eps
        self._scale = 1.0 / math.sqrt(slot_dim)

    def __call__(self, features: Tensor, slots: Tensor, iters: int) -> Tuple[Tensor, Tensor]:
        b, k_slots, d = slots.shape
        if k_slots == 0:
            raise ShapeError("slot_attention: slot set is empty (K = 0)")
        if iters < 1:
            raise ValueError(f"slot_attention: iters must be >= 1, got {iters}")
        inputs = self.norm_inputs(features)
        k = self.to_k(inputs)
        v = self.to_v(inputs)
        attn = None
        for _ in range(iters):
            prev = slots
            q = self.to_q(self.norm_slots(slots))
            logits = (k @ q.transpose(0, 2, 1)) * self._scale
            attn = T.softmax(logits, axis=-1)
            weights = T.renormalize(attn + self.eps, axis=1)
            updates = weights.transpose(0, 2, 1) @ v
            slots = self.gru(updates.reshape(b * k_slots, d), prev.reshape(b * k_slots, d)).reshape(b, k_slots, d)
            slots = slots + self.mlp(self.norm_mlp(slots))
        return slots, attn


class BroadcastDecoder(Module):
    """
    Spatial broadcast decoder.

    Each slot is tiled over a G×G grid, the positional encoding is added, and
    a shared CNN with nearest-neighbour upsampling produces RGB plus an alpha
    logit per slot. Channel width halves at each upsampling stage (floor 8).
    """

    def __init__(self, config: SaviConfig, stream: Stream):
        g, d, c = config.decoder_grid, config.slot_dim, config.decoder_channels
        self.pos = PositionEmbedding(g, g, d, stream.split("pos"))
        self.conv_in = Conv2d(d, c, 3, stream.split("conv_in"))
        self.stages = []
        for i in range(config.upsample_stages):
            c_next = max(c // 2, 8) if i > 0 else c
            self.stages.append(Conv2d(c, c_next, 3, stream.split("stage", i)))
            c = c_next
        self.conv_out = Conv2d(c, 4, 1, stream.split("conv_out"))
        self._grid = g

    def __call__(self, slots: Tensor) -> DecodeResult:
        b, k, d = slots.shape
        g = self._grid
        x = T.expand(T.expand(slots.reshape(b * k, d), 1, g), 2, g) + self.pos()
        x = T.relu(self.conv_in(x))
        for conv in self.stages:
            x = T.relu(conv(T.upsample(x, 2)))
        out = self.conv_out(x)
        _, h, w, _ = out.shape
        out = out.reshape(b, k, h, w, 4)
        rgb = out[..., :3]
        masks = T.softmax(out[..., 3], axis=1)
        composite = T.sum(T.expand(masks, -1, 3) * rgb, axis=1)
        return DecodeResult(rgb, masks, composite)


class _EncoderBase(Module):
    config: SaviConfig

    def encode_frame(self, image: ArrayLike) -> FeatureGrid:
        """CNN features for (H, W, 3) or (B, H, W, 3) images in [0, 1]."""
        return self.cnn(image)

    def decode_slots(self, slots: Union[SlotSet, Tensor]) -> DecodeResult:
        s = slots.slots if isinstance(slots, SlotSet) else slots
        if s.ndim == 2:
            s = s.reshape((1,) + s.shape)
        return self.decoder(s)

    @staticmethod
    def _clip_tensor(frames: ArrayLike) -> Tensor:
        x = T.as_tensor(frames)
        if x.ndim == 4:
            x = x.reshape((1,) + x.shape)
        if x.ndim != 5 or x.shape[1] < 1:
            raise ShapeError(f"savi_unroll: expected frames (B, T, H, W, 3) with T >= 1, got {x.shape}")
        return x


class Savi(_EncoderBase):
    """
    Slot attention for video.

    Args:
        config: Encoder hyper-parameters
        stream: Initialisation stream for all weights

    Examples:
        >>> model = Savi(SaviConfig(), Stream(0))
        >>> slots, decoded = model.savi_unroll(clip, Stream(1))
    """

    def __init__(self, config: SaviConfig, stream: Stream):
        self.config = config.validate()
        d = config.slot_dim
        self.cnn = CnnEncoder(config, stream.split("cnn"))
        self.slot_mu = Parameter(stream.split("slot_mu").generator().normal(0.0, 1.0 / math.sqrt(d), size=(d,)),
                                 name="slot_mu")
        self.slot_log_std = Parameter(np.full((d,), math.log(1.0 / math.sqrt(d))), name="slot_log_std")
        self.slot_attention_module = SlotAttention(config.cnn_channels[-1], d, config.mlp_hidden,
                                                   stream.split("slot_attention"))
        self.predictor = [TransformerBlock(d, config.predictor_heads, stream.split("predictor", i))
                          for i in range(config.predictor_depth)]
        self.decoder = BroadcastDecoder(config, stream.split("decoder"))

    def initial_slots(self, batch: int, stream: Stream) -> SlotSet:
        """K draws from the learned diagonal Gaussian, fresh per video."""
        noise = stream.generator().standard_normal((batch, self.config.slots, self.config.slot_dim))
        return SlotSet(self.slot_mu + T.exp(self.slot_log_std) * Tensor(noise))

    def slot_attention(self, features: Union[FeatureGrid, Tensor], slots_init: Union[SlotSet, Tensor],
                       iters: int) -> Tuple[SlotSet, Tensor]:
        """Returns refined slots and the final-iteration attention (B, N, K)."""
        feats = features.values if isinstance(features, FeatureGrid) else features
        init = slots_init.slots if isinstance(slots_init, SlotSet) else slots_init
        if feats.ndim == 2:
            feats = feats.reshape((1,) + feats.shape)
        if init.ndim == 2:
            init = init.reshape((1,) + init.shape)
        slots, attn = self.slot_attention_module(feats, init, iters)
        return SlotSet(slots), attn

    def predict(self, slots: SlotSet) -> SlotSet:
        """Advance slots one frame with the predictor transformer (intra-frame self-attention)."""
        x = slots.slots
        for block in self.predictor:
            x = block(x)
        return SlotSet(x)

    def decode_predicted(self, slots: SlotSet) -> DecodeResult:
        """Decode the predictor's guess for the next frame, before correction."""
        return self.decode_slots(self.predict(slots))

    def savi_unroll(self, frames: ArrayLike, stream: Stream,
                    decode: bool = True) -> Tuple[List[SlotSet], Optional[List[DecodeResult]]]:
        """
        Encode a clip frame by frame.

        Args:
            frames: (B, T, H, W, 3) or (T, H, W, 3) in [0, 1]
            stream: Source of the initial slot draw
            decode: Also decode every frame

        Returns:
            (per-frame SlotSet list, per-frame DecodeResult list or None)
        """
        clip = self._clip_tensor(frames)
        b, t_len, h, w, _ = clip.shape
        grid = self.encode_frame(clip.reshape(b * t_len, h, w, 3))
        n, c = grid.values.shape[1:]
        feats = grid.values.reshape(b, t_len, n, c)

        slots_per_frame: List[SlotSet] = []
        decoded: List[DecodeResult] = []
        slots = self.initial_slots(b, stream)
        for t in range(t_len):
            if t == 0:
                slots, _ = self.slot_attention(feats[:, 0], slots, self.config.iters_first)
            else:
                slots, _ = self.slot_attention(feats[:, t], self.predict(slots), self.config.iters_later)
            slots_per_frame.append(slots)
            if decode:
                decoded.append(self.decode_slots(slots))
        return slots_per_frame, (decoded if decode else None)


class HolisticEncoder(_EncoderBase):
    """Single-token baseline: spatial mean of CNN features, projected to slot_dim."""

    def __init__(self, config: SaviConfig, stream: Stream):
        self.config = config.validate()
        self.cnn = CnnEncoder(config, stream.split("cnn"))
        self.to_token = Linear(config.cnn_channels[-1], config.slot_dim, stream.split("to_token"))
        self.decoder = BroadcastDecoder(config, stream.split("decoder"))

    def savi_unroll(self, frames: ArrayLike, stream: Stream,
                    decode: bool = True) -> Tuple[List[SlotSet], Optional[List[DecodeResult]]]:
        clip = self._clip_tensor(frames)
        b, t_len, h, w, _ = clip.shape
        grid = self.encode_frame(clip.reshape(b * t_len, h, w, 3))
        tokens = self.to_token(T.mean(grid.values, axis=1)).reshape(b, t_len, 1, self.config.slot_dim)
        per_frame = [SlotSet(tokens[:, t]) for t in range(t_len)]
        decoded = [self.decode_slots(s) for s in per_frame] if decode else None
        return per_frame, decoded


Encoder = Union[Savi, HolisticEncoder]


def build_encoder(config: SaviConfig, stream: Stream) -> Encoder:
    """Instantiate the encoder named by ``config.kind``."""
    if config.kind == "holistic":
        return HolisticEncoder(config, stream)
    return Savi(config, stream)


def recon_loss(pred: ArrayLike, target: ArrayLike) -> Tensor:
    """Mean squared error over all frames, pixels and channels."""
    p, t = T.as_tensor(pred), T.as_tensor(target)
    if p.shape != t.shape:
        raise ShapeError(f"recon_loss: prediction shape {p.shape} != target shape {t.shape}")
    diff = p - t
    return T.mean(diff * diff)


def stack_composites(decoded: List[DecodeResult]) -> Tensor:
    """Per-frame composites stacked into a (B, T, H, W, 3) clip."""
    frames = [d.composite.reshape((d.composite.shape[0], 1) + d.composite.shape[1:]) for d in decoded]
    return T.concat(frames, axis=1)


def slot_history(encoder: Encoder, frames: ArrayLike, stream: Stream) -> Tensor:
    """(B, H, K, D) slot history for (B, H, img, img, 3) frame windows, computed without the tape."""
    with T.no_grad():
        per_frame, _ = encoder.savi_unroll(frames, stream, decode=False)
    b = per_frame[0].slots.shape[0]
    stacked = np.stack([s.slots.data for s in per_frame], axis=1)
    return Tensor(stacked.reshape((b, len(per_frame)) + stacked.shape[2:]))
