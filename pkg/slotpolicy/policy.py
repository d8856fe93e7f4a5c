"""
policy.py - Transformer observation trunk and Gaussian-mixture action head

The trunk reads a history of H slot sets (B, H, K, D). Every slot is
projected to the trunk width and tagged with a learned per-frame temporal
embedding; there is no per-slot index embedding, so the trunk treats the
slots of a frame as an unordered set. A learnable [ACT] token is appended,
the sequence goes through pre-norm transformer blocks, and the [ACT] row is
the history summary fed to the mixture head.
"""

import logging
import math
from dataclasses import dataclass, fields
from typing import Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, NonFiniteError, ShapeError
from .nn import MLP, LayerNorm, Linear, Module, Parameter, TransformerBlock
from .rng import Stream
from .tensor import Tensor

logger = logging.getLogger(__name__)

ACTION_DIM = 7
STD_FLOOR = 1e-4
SAMPLE_MODES = ("deterministic", "stochastic")
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Action:
    """Relative end-effector motion plus gripper command (>0 closes)."""
    dpos: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    drot: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    gripper: float = -1.0

    def to_array(self) -> np.ndarray:
        return np.array(list(self.dpos) + list(self.drot) + [self.gripper], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Action":
        a = np.asarray(values, dtype=np.float64).reshape(-1)
        if a.size != ACTION_DIM:
            raise ShapeError(f"Action.from_array: expected {ACTION_DIM} values, got {a.size}")
        return cls(tuple(float(v) for v in a[:3]), tuple(float(v) for v in a[3:6]), float(a[6]))

    def clamped(self, max_step: float) -> "Action":
        """Gripper into [-1, 1] and each dpos component into [-max_step, max_step]."""
        dpos = tuple(float(np.clip(v, -max_step, max_step)) for v in self.dpos)
        return Action(dpos, self.drot, float(np.clip(self.gripper, -1.0, 1.0)))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.to_array())))


@dataclass
class PolicyConfig:
    """Trunk and head hyper-parameters (``[policy]`` config section)."""
    history: int = 2
    trunk_dim: int = 64
    depth: int = 2
    heads: int = 4
    mixtures: int = 5
    slot_proj_dim: int = 64
    max_step: float = 0.05

    def validate(self) -> "PolicyConfig":
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"policy.{f.name}: must be positive, got {getattr(self, f.name)}")
        if self.trunk_dim % self.heads:
            raise ConfigError(f"policy.trunk_dim {self.trunk_dim} not divisible by policy.heads {self.heads}")
        return self


@dataclass
class GmmParams:
    """Mixture logits (B, M), means (B, M, 7) and raw scales (B, M, 7); std = softplus(raw) + floor."""
    logits: Tensor
    means: Tensor
    log_stds: Tensor

    @property
    def M(self) -> int:
        return self.logits.shape[-1]

    def stds(self) -> Tensor:
        return T.softplus(self.log_stds) + STD_FLOOR

    def batched(self) -> "GmmParams":
        if self.logits.ndim == 1:
            m = self.logits.shape[0]
            return GmmParams(self.logits.reshape(1, m), self.means.reshape(1, m, ACTION_DIM),
                             self.log_stds.reshape(1, m, ACTION_DIM))
        return self

    def check_finite(self) -> None:
        for name in ("logits", "means", "log_stds"):
            if not np.all(np.isfinite(getattr(self, name).data)):
                raise NonFiniteError(f"GMM parameter '{name}' contains non-finite values")


def std_to_raw(std: Union[float, np.ndarray]) -> np.ndarray:
    """Inverse of the std parameterisation: raw value giving exactly ``std``."""
    return np.log(np.expm1(np.asarray(std, dtype=np.float64) - STD_FLOOR))


def pad_history(frames: np.ndarray, length: int, axis: int = 0) -> Tuple[np.ndarray, bool]:
    """
    Left-pad a frame history to ``length`` by repeating its earliest frame.

    Longer histories keep their most recent ``length`` entries. Returns the
    window and whether padding was applied.
    """
    frames = np.asarray(frames)
    n = frames.shape[axis]
    if n == 0:
        raise ShapeError("pad_history: history is empty")
    if n >= length:
        return np.take(frames, range(n - length, n), axis=axis), False
    first = np.take(frames, [0], axis=axis)
    reps = np.repeat(first, length - n, axis=axis)
    return np.concatenate([reps, frames], axis=axis), True


class SlotPolicy(Module):
    """
    [ACT]-token transformer trunk with a GMM head.

    Args:
        config: Policy hyper-parameters
        slot_dim: Width D of the incoming slots (or holistic tokens)
        stream: Initialisation stream

    Examples:
        >>> policy = SlotPolicy(PolicyConfig(), slot_dim=64, stream=Stream(0))
        >>> params = policy(history)           # history (B, H, K, D)
        >>> action = sample_action(params, rng, "deterministic", 0.05)
    """

    def __init__(self, config: PolicyConfig, slot_dim: int, stream: Stream):
        self.config = config.validate()
        e, m = config.trunk_dim, config.mixtures
        self.slot_proj = MLP(slot_dim, config.slot_proj_dim, e, stream.split("slot_proj"))
        self.time_embed = Parameter(stream.split("time_embed").generator().normal(0.0, 0.02, size=(config.history, e)),
                                    name="time_embed")
        self.act_token = Parameter(stream.split("act_token").generator().normal(0.0, 0.02, size=(e,)),
                                   name="act_token")
        self.blocks = [TransformerBlock(e, config.heads, stream.split("block", i)) for i in range(config.depth)]
        self.norm = LayerNorm(e)
        self.head = Linear(e, m * (1 + 2 * ACTION_DIM), stream.split("head"))
        # Small weights, zero logits and means, stds starting at softplus(ln(e - 1)) = 1.
        self.head.weight.data *= 0.1
        bias = np.zeros(m * (1 + 2 * ACTION_DIM))
        bias[m * (1 + ACTION_DIM):] = math.log(math.e - 1.0)
        self.head.bias.data = bias.astype(self.head.bias.data.dtype)
        self.slot_dim = slot_dim

    def _history_tensor(self, slot_history) -> Tuple[Tensor, bool]:
        if isinstance(slot_history, (list, tuple)):
            frames = [s.slots if hasattr(s, "slots") else T.as_tensor(s) for s in slot_history]
            frames = [f.reshape((1,) + f.shape) if f.ndim == 2 else f for f in frames]
            x = T.concat([f.reshape((f.shape[0], 1) + f.shape[1:]) for f in frames], axis=1)
        else:
            x = T.as_tensor(slot_history)
            if x.ndim == 3:
                x = x.reshape((1,) + x.shape)
        if x.ndim != 4 or x.shape[-1] != self.slot_dim:
            raise ShapeError(f"trunk_forward: expected slot history (B, H, K, {self.slot_dim}), got {x.shape}")
        h = self.config.history
        n = x.shape[1]
        if n < h:
            logger.debug("trunk_forward: left-padding a %d-frame history to %d", n, h)
            return T.concat([x[:, :1]] * (h - n) + [x], axis=1), True
        if n > h:
            x = x[:, n - h:]
        return x, False

    def trunk_forward(self, slot_history, return_padded: bool = False) -> Union[Tensor, Tuple[Tensor, bool]]:
        """
        Summarise a slot history into the [ACT] embedding.

        Args:
            slot_history: (B, H, K, D) / (H, K, D) array or Tensor, or a list of
                          H SlotSets; shorter histories are left-padded
            return_padded: Also return whether the history was padded

        Returns:
            (B, trunk_dim) Tensor, or (Tensor, padded) with return_padded
        """
        x, padded = self._history_tensor(slot_history)
        b, h, k, _ = x.shape
        e = self.config.trunk_dim
        tokens = self.slot_proj(x) + T.expand(self.time_embed, 1, k)
        tokens = tokens.reshape(b, h * k, e)
        act = T.expand(T.expand(self.act_token, 0, 1), 0, b)
        x = T.concat([tokens, act], axis=1)
        for block in self.blocks:
            x = block(x)
        out = self.norm(x[:, h * k])
        return (out, padded) if return_padded else out

    def head_forward(self, act_embedding: Tensor) -> GmmParams:
        b = act_embedding.shape[0]
        m = self.config.mixtures
        out = self.head(act_embedding)
        logits = out[:, :m]
        means = out[:, m:m * (1 + ACTION_DIM)].reshape(b, m, ACTION_DIM)
        raw = out[:, m * (1 + ACTION_DIM):].reshape(b, m, ACTION_DIM)
        return GmmParams(logits, means, raw)

    def __call__(self, slot_history) -> GmmParams:
        return self.head_forward(self.trunk_forward(slot_history))


def gmm_nll(params: GmmParams, actions) -> Tensor:
    """
    Mean negative log-likelihood of ``actions`` (B, 7) under the mixture.

    -log Σ_m softmax(logits)_m · N(a; μ_m, diag σ_m²), via log-sum-exp.
    """
    params = params.batched()
    params.check_finite()
    a = T.as_tensor(actions)
    if a.ndim == 1:
        a = a.reshape(1, a.shape[0])
    b, m = params.logits.shape
    if a.shape != (b, ACTION_DIM) or params.means.shape != (b, m, ACTION_DIM):
        raise ShapeError(f"gmm_nll: actions {a.shape} do not match mixture means {params.means.shape}")
    stds = params.stds()
    z = (T.expand(a, 1, m) - params.means) / stds
    log_norm = (T.sum(z * z, axis=-1) * -0.5 - T.sum(T.log(stds), axis=-1)) - 0.5 * ACTION_DIM * _LOG_2PI
    log_prob = T.logsumexp(T.log_softmax(params.logits, axis=-1) + log_norm, axis=-1)
    return T.mean(-log_prob)


def sample_action(params: GmmParams, rng: np.random.Generator, mode: str = "deterministic",
                  max_step: float = 0.05, index: int = 0) -> Action:
    """
    Draw one action from batch row ``index`` of the mixture.

    deterministic: mean of the highest-weight component (lowest index on ties).
    stochastic: component from softmax(logits), then the diagonal Gaussian.
    """
    if mode not in SAMPLE_MODES:
        raise ValueError(f"sample_action: mode must be one of {SAMPLE_MODES}, got '{mode}'")
    params = params.batched()
    logits = params.logits.data[index].astype(np.float64)
    means = params.means.data[index].astype(np.float64)
    if mode == "deterministic":
        comp = int(np.argmax(logits))
        value = means[comp]
    else:
        w = np.exp(logits - logits.max())
        comp = int(rng.choice(len(w), p=w / w.sum()))
        std = np.logaddexp(0.0, params.log_stds.data[index, comp].astype(np.float64)) + STD_FLOOR
        value = means[comp] + std * rng.standard_normal(ACTION_DIM)
    return Action.from_array(value).clamped(max_step)


def mixture_weights(params: GmmParams) -> np.ndarray:
    logits = params.batched().logits.data
    w = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return w / w.sum(axis=-1, keepdims=True)
