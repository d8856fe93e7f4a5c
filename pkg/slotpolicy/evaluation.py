"""
evaluation.py - Closed-loop rollouts, success-rate protocol and reports

Rollout seeds for ``evaluate(n, repeats, seed_base)`` are
``seed_base + repeat * n + i``. Each rollout builds its own simulator and
controller streams from its seed, so results are a pure function of
(controller, task, level, seed_base) regardless of the worker count.
Headline numbers are mean ± population std across the repeat means.
"""

import csv
import functools
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .dataset import to_float_frames
from .expert import ScriptedExpert
from .images import write_ppm
from .parallel import map_chunks
from .policy import SAMPLE_MODES, Action, SlotPolicy, pad_history, sample_action
from .rng import Stream
from .savi import Encoder, Savi, SlotSet, slot_history
from .sim import LEVELS, MiniShape, SimConfig, WorldState

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
EPISODE_FIELDS = ("seed", "success", "length")

PathLike = Union[str, os.PathLike]


# -- controllers ---------------------------------------------------------------


class ZeroController:
    """Null policy: no motion, gripper open."""
    label = "zero"

    def reset(self, stream: Stream) -> None:
        pass

    def act(self, state: WorldState, image: np.ndarray) -> Action:
        return Action((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), 0.0)


class ExpertController:
    """Scripted expert in the loop (reads privileged state)."""
    label = "expert"

    def __init__(self, task: str, sim_config: Optional[SimConfig] = None, jitter: float = 0.0):
        self.task = task
        self.sim_config = sim_config or SimConfig()
        self.jitter = jitter
        self.expert: Optional[ScriptedExpert] = None

    def reset(self, stream: Stream) -> None:
        self.expert = ScriptedExpert(self.task, self.sim_config, jitter=self.jitter, stream=stream.split("expert"))

    def act(self, state: WorldState, image: np.ndarray) -> Action:
        return self.expert.act(state)


class PolicyController:
    """
    Frozen encoder + slot policy acting from rendered images only.

    Each step encodes the last H frames (left-padded at episode start) and
    samples an action from the GMM head.

    Args:
        encoder: Frozen encoder
        policy: Trained trunk and head
        mode: 'deterministic' (default) or 'stochastic'
        checkpoint: Identifier recorded in reports
    """

    def __init__(self, encoder: Encoder, policy: SlotPolicy, mode: str = "deterministic", checkpoint: str = ""):
        if mode not in SAMPLE_MODES:
            raise ValueError(f"PolicyController: mode must be one of {SAMPLE_MODES}, got '{mode}'")
        self.encoder = encoder
        self.policy = policy
        self.mode = mode
        self.checkpoint = checkpoint
        self.label = encoder.config.kind
        self._frames: List[np.ndarray] = []
        self._stream = Stream(0)
        self._rng = self._stream.generator()

    @classmethod
    def from_checkpoint(cls, path: PathLike, mode: str = "deterministic") -> "PolicyController":
        from .trainer import load_policy
        encoder, policy, _ = load_policy(path)
        return cls(encoder, policy, mode=mode, checkpoint=str(path))

    def reset(self, stream: Stream) -> None:
        self._frames = []
        self._stream = stream
        self._rng = stream.split("sample").generator()

    def history_window(self) -> np.ndarray:
        window, padded = pad_history(np.stack(self._frames[-self.policy.config.history:]), self.policy.config.history)
        if padded:
            logger.debug("Padding rollout history at step %d", len(self._frames) - 1)
        return window

    def act(self, state: WorldState, image: np.ndarray) -> Action:
        self._frames.append(image)
        step = len(self._frames) - 1
        frames = to_float_frames(self.history_window()[None])
        with T.no_grad():
            history = slot_history(self.encoder, frames, self._stream.split("slots", step))
            params = self.policy(history)
        return sample_action(params, self._rng, self.mode, self.policy.config.max_step)


Controller = Union[PolicyController, ExpertController, ZeroController]


# -- rollouts --------------------------------------------------------------------


@dataclass
class RolloutResult:
    seed: int
    success: bool
    length: int
    error: Optional[str] = None
    frames: Optional[List[np.ndarray]] = field(default=None, repr=False)


def rollout(controller: Controller, env: MiniShape, task: str, level: str, seed: int,
            dump_frames: bool = False) -> RolloutResult:
    """
    Run one closed-loop episode until success or the horizon.

    Controller or simulator exceptions end the episode as a failure; they
    are logged and never propagate.
    """
    frames: List[np.ndarray] = []
    length = 0
    try:
        state, image = env.reset(task, level, seed)
        controller.reset(Stream(seed).split("rollout"))
        ok = done = False
        while not done:
            if dump_frames:
                frames.append(image)
            action = controller.act(state, image)
            state, image, ok, done = env.step(state, action)
            length += 1
        if dump_frames:
            frames.append(image)
        return RolloutResult(int(seed), bool(ok), length, None, frames if dump_frames else None)
    except Exception as e:
        logger.warning("Rollout %s/%s seed %d failed at step %d: %s", task, level, seed, length, e)
        return RolloutResult(int(seed), False, length, f"{type(e).__name__}: {e}", frames if dump_frames else None)


def _rollout_chunk(seeds: List[int], controller: Controller, task: str, level: str,
                   sim_config: Optional[SimConfig], preset: str,
                   precision: Optional[str] = None) -> List[RolloutResult]:
    # spawned workers start at the default precision
    if precision and precision != T.get_precision():
        T.set_precision(precision)
    env = MiniShape(sim_config, preset)
    return [rollout(controller, env, task, level, seed) for seed in seeds]


# -- reports ---------------------------------------------------------------------


def format_cell(mean: float, std: float) -> str:
    """Table cell in the '0.88 ± 0.07' style."""
    return f"{mean:.2f} ± {std:.2f}"


@dataclass
class EvalReport:
    """Success rates of one controller on one (task, level)."""
    task: str
    level: str
    n_rollouts: int
    repeats: int
    successes: List[int]
    mean: float
    std: float
    seed_base: int
    checkpoint: str = ""
    encoder: str = ""
    episodes: List[Dict] = field(default_factory=list)
    schema_version: int = REPORT_SCHEMA_VERSION

    @property
    def repeat_means(self) -> List[float]:
        return [s / self.n_rollouts for s in self.successes]

    @property
    def cell(self) -> str:
        return format_cell(self.mean, self.std)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        data = json.loads(text)
        if data.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema version {data.get('schema_version')}")
        return cls(**data)

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path

    def write_episodes_csv(self, path: PathLike) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=EPISODE_FIELDS, extrasaction="ignore")
            writer.writeheader()
            for row in self.episodes:
                writer.writerow({"seed": row["seed"], "success": int(row["success"]), "length": row["length"]})
        return path


def summarize(successes: Sequence[int], n: int) -> tuple:
    """(mean, population std) of the per-repeat success rates."""
    means = np.asarray(successes, dtype=np.float64) / n
    return float(means.mean()), float(means.std())


def evaluate(controller: Controller, task: str, level: str, n: int = 100, repeats: int = 3,
             seed_base: int = 0, workers: Optional[int] = 1, sim_config: Optional[SimConfig] = None,
             preset: str = "full") -> EvalReport:
    """
    Success rate of ``controller`` over ``repeats`` blocks of ``n`` fresh seeds.

    Examples:
        >>> report = evaluate(ExpertController("push"), "push", "none", n=100, repeats=3)
        >>> print(report.cell)
    """
    seeds = [seed_base + r * n + i for r in range(repeats) for i in range(n)]
    run = functools.partial(_rollout_chunk, controller=controller, task=task, level=level,
                            sim_config=sim_config, preset=preset, precision=T.get_precision())
    results = map_chunks(run, seeds, workers)
    successes = []
    for r in range(repeats):
        block = results[r * n:(r + 1) * n]
        successes.append(sum(res.success for res in block))
        logger.info("%s/%s repeat %d: %d/%d successes", task, level, r + 1, successes[-1], n)
    mean, std = summarize(successes, n)
    episodes = [{"seed": res.seed, "success": res.success, "length": res.length, "error": res.error}
                for res in results]
    return EvalReport(task=task, level=level, n_rollouts=n, repeats=repeats, successes=successes,
                      mean=mean, std=std, seed_base=seed_base,
                      checkpoint=getattr(controller, "checkpoint", ""),
                      encoder=getattr(controller, "label", ""), episodes=episodes)


def comparison_table(reports: Sequence[EvalReport]) -> str:
    """Aligned text table: one row per (task, level), one column per encoder."""
    columns = sorted({r.encoder for r in reports})
    rows: Dict[tuple, Dict[str, str]] = {}
    for r in reports:
        rows.setdefault((r.task, r.level), {})[r.encoder] = r.cell
    order = sorted(rows, key=lambda k: (k[0], LEVELS.index(k[1]) if k[1] in LEVELS else len(LEVELS)))
    header = ["task", "level"] + columns
    body = [[task, "∅" if level == "none" else level] + [rows[(task, level)].get(c, "-") for c in columns]
            for task, level in order]
    widths = [max(len(str(row[i])) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(str(v).ljust(w) for v, w in zip(row, widths)).rstrip() for row in [header] + body]
    return "\n".join(lines)


def overall_summary(reports: Sequence[EvalReport]) -> Dict[str, Dict[str, float]]:
    """Mean success over tasks, per encoder and level."""
    grouped: Dict[str, Dict[str, List[float]]] = {}
    for r in reports:
        grouped.setdefault(r.encoder, {}).setdefault(r.level, []).append(r.mean)
    return {enc: {lvl: float(np.mean(v)) for lvl, v in levels.items()} for enc, levels in grouped.items()}


def directional_notes(reports: Sequence[EvalReport]) -> List[str]:
    """Success drop of each shifted level relative to ∅, logged and never asserted."""
    base = {(r.task, r.encoder): r.mean for r in reports if r.level == "none"}
    notes = []
    for r in reports:
        key = (r.task, r.encoder)
        if r.level == "none" or key not in base:
            continue
        drop = base[key] - r.mean
        notes.append(f"{r.task}/{r.encoder}: {r.level} changes success by {-drop:+.2f} relative to ∅")
    for note in notes:
        logger.info(note)
    return notes


# -- slot decomposition dumps -------------------------------------------------------


@dataclass
class Decomposition:
    frame: int
    paths: List[Path]
    composite: np.ndarray
    masks: np.ndarray


def decompose_rollout(controller: PolicyController, env: MiniShape, task: str, level: str, seed: int,
                      out_dir: PathLike, frames: Sequence[int] = (0,), predicted: bool = False) -> List[Decomposition]:
    """
    Roll out once and dump, for each selected frame, the input, the composite
    reconstruction and K mask-weighted slot images (plus the predicted next
    frame when ``predicted`` is set and the encoder has a predictor).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = rollout(controller, env, task, level, seed, dump_frames=True)
    images = result.frames or []
    encoder = controller.encoder
    history = controller.policy.config.history
    dumps = []
    for t in frames:
        if t >= len(images):
            logger.warning("Frame %d beyond rollout length %d (seed %d); skipped", t, len(images), seed)
            continue
        window, _ = pad_history(np.stack(images[max(0, t - history + 1):t + 1]), history)
        stream = Stream(seed).split("decompose", t)
        with T.no_grad():
            slots, decoded = encoder.savi_unroll(to_float_frames(window[None]), stream)
        last = decoded[-1]
        rgb, masks, composite = last.rgb.data[0], last.masks.data[0], last.composite.data[0]
        paths = [write_ppm(out / f"frame{t}_input.ppm", images[t]),
                 write_ppm(out / f"frame{t}_recon.ppm", composite)]
        for k in range(masks.shape[0]):
            paths.append(write_ppm(out / f"frame{t}_slot{k}.ppm", rgb[k] * masks[k][..., None]))
        if predicted and isinstance(encoder, Savi):
            with T.no_grad():
                nxt = encoder.decode_predicted(SlotSet(slots[-1].slots))
            paths.append(write_ppm(out / f"frame{t}_predicted.ppm", nxt.composite.data[0]))
        dumps.append(Decomposition(t, paths, composite, masks))
    logger.info("Wrote %d decomposed frames to %s", len(dumps), out)
    return dumps
