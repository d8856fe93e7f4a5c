"""
optim.py - Adam optimizer and learning-rate schedule
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from .errors import NonFiniteError
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Per-parameter first/second moments, step count and hyper-parameters."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: Optional[float] = None) -> AdamState:
    """
    Apply one bias-corrected Adam update in place.

    All gradients are validated before anything is touched, so a NaN in
    any parameter aborts the whole step.

    Args:
        params: name -> parameter tensor (updated in place)
        grads: name -> gradient array; missing names count as zero gradient
        state: Moments and step count (mutated and returned)
        lr: Learning rate override for this step (e.g. from a schedule)

    Returns:
        The updated state
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"adam_step: gradient for unknown parameter '{name}'")
        if g.shape != params[name].shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape {params[name].shape} for '{name}'")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam_step: non-finite gradient for parameter '{name}'")

    rate = state.lr if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        p.data -= (rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.data.dtype)
    return state


class Adam:
    """
    Adam over a named parameter set.

    Examples:
        >>> opt = Adam(model.named_parameters(), lr=4e-4)
        >>> loss.backward()
        >>> opt.step()
        >>> opt.zero_grad()
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: Optional[float] = None) -> None:
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state, lr=lr)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Moments flattened into checkpoint entries (adam.m.<name>, adam.v.<name>)."""
        out = {}
        for name in self.params:
            if name in self.state.m:
                out[f"adam.m.{name}"] = self.state.m[name]
                out[f"adam.v.{name}"] = self.state.v[name]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        self.state.t = int(t)
        for name, p in self.params.items():
            m = arrays.get(f"adam.m.{name}")
            v = arrays.get(f"adam.v.{name}")
            if m is not None and v is not None:
                self.state.m[name] = np.array(m, dtype=p.data.dtype)
                self.state.v[name] = np.array(v, dtype=p.data.dtype)
        logger.debug("Restored Adam state at step %d for %d parameters", t, len(self.state.m))


def warmup_lr(step: int, base_lr: float, warmup: int) -> float:
    """Linear warmup from base_lr/warmup to base_lr, then constant (step is 0-based)."""
    if warmup <= 0 or step >= warmup:
        return base_lr
    return base_lr * (step + 1) / warmup
