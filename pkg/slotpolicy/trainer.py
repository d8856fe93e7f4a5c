"""
trainer.py - Two-phase training: encoder pretraining, then behavior cloning

    pretrain  clips (B, T, H, W, 3) -> savi_unroll -> composite MSE -> Adam
    bc        histories (B, H, ...) -> frozen encoder (no tape) -> slots
              -> trunk + GMM head -> NLL of the expert action -> Adam

Batches for step s are drawn from ``Stream(seed).split("batch", s)``, so a
background prefetch thread never changes which batches a run sees, and a
resumed run continues with the same batches it would have seen.
"""

import csv
import logging
import queue
import threading
import time
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, flatten, restore
from .dataset import ClipBatch, EpisodeStore, TransitionBatch, load_batch
from .errors import CheckpointError, ConfigError, FrozenEncoderError, NonFiniteError
from .optim import Adam, warmup_lr
from .policy import PolicyConfig, SlotPolicy, gmm_nll
from .rng import Stream
from .savi import Encoder, SaviConfig, build_encoder, recon_loss, slot_history, stack_composites

logger = logging.getLogger(__name__)

METRICS_FIELDS = ("step", "loss", "grad_norm", "wall_time")
ENCODER_PREFIX = "encoder."
POLICY_PREFIX = "policy."


def _prefixed(prefix: str, arrays: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {prefix + name: value for name, value in arrays.items()}


def _strip(prefix: str, arrays: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {name[len(prefix):]: value for name, value in arrays.items() if name.startswith(prefix)}


def load_encoder(path: Union[str, Path]) -> Encoder:
    """Rebuild an encoder from a pretrain or policy checkpoint."""
    params, meta = load_checkpoint(path)
    if "encoder.kind" not in meta:
        raise CheckpointError(f"{path}: checkpoint carries no encoder configuration")
    config = restore(SaviConfig, "encoder", meta)
    encoder = build_encoder(config, Stream(0))
    encoder.load_arrays(_strip(ENCODER_PREFIX, params))
    encoder.freeze()
    return encoder


def load_policy(path: Union[str, Path]) -> Tuple[Encoder, SlotPolicy, Dict[str, str]]:
    """Frozen encoder, policy and metadata from a self-contained policy checkpoint."""
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "policy":
        raise CheckpointError(f"{path}: not a policy checkpoint (kind={meta.get('kind')!r})")
    encoder = build_encoder(restore(SaviConfig, "encoder", meta), Stream(0))
    encoder.load_arrays(_strip(ENCODER_PREFIX, params))
    encoder.freeze()
    policy = SlotPolicy(restore(PolicyConfig, "policy", meta), encoder.config.slot_dim, Stream(0))
    policy.load_arrays(_strip(POLICY_PREFIX, params))
    policy.freeze()
    return encoder, policy, meta


class Prefetcher:
    """
    Produce batches for a range of steps on one background thread.

    Args:
        sample: step -> batch; must depend on the step only
        steps: Step indices, consumed in order
        depth: Bounded queue size
    """

    _DONE = object()

    def __init__(self, sample: Callable[[int], object], steps: Iterable[int], depth: int = 2):
        self._sample = sample
        self._steps = list(steps)
        self._queue: "queue.Queue" = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="slotpolicy-prefetch", daemon=True)
        self._thread.start()

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self) -> None:
        try:
            for step in self._steps:
                if not self._put((step, self._sample(step))):
                    return
        except BaseException as e:
            self._put(e)
            return
        self._put(self._DONE)

    def __iter__(self) -> Iterator[Tuple[int, object]]:
        while True:
            item = self._queue.get()
            if item is self._DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5)

    def __enter__(self) -> "Prefetcher":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class Trainer:
    """
    Runs one training phase ('pretrain' or 'bc') of a resolved Config.

    Args:
        config: Resolved configuration; ``train.phase`` selects the phase
        store: Training episodes (opened from ``data.dataset`` by ``fit`` if omitted)

    Examples:
        >>> trainer = Trainer(load_config("pretrain.cfg"))
        >>> trainer.fit()
        >>> trainer.save_checkpoint("runs/enc/pretrain_last.spck")
    """

    def __init__(self, config: Config, store: Optional[EpisodeStore] = None):
        self.config = config
        self.train = config.train.resolved()
        config.train.validate()
        self.stream = Stream(config.run.seed)
        self.store = store
        self.step = 0
        self.losses: List[float] = []

        if self.train.phase == "pretrain":
            self.encoder = build_encoder(config.encoder, self.stream.split("init", "encoder"))
            self.policy: Optional[SlotPolicy] = None
            trainable = self.encoder.named_parameters()
        else:
            self.encoder = load_encoder(self.train.encoder_checkpoint)
            config.encoder = self.encoder.config
            self.policy = SlotPolicy(config.policy, self.encoder.config.slot_dim, self.stream.split("init", "policy"))
            trainable = self.policy.named_parameters()
        self.optimizer = Adam(trainable, lr=self.train.lr)
        logger.info("%s phase: %d trainable parameters", self.train.phase,
                    sum(p.data.size for p in trainable.values()))

    # -- steps ---------------------------------------------------------------

    @property
    def phase(self) -> str:
        return self.train.phase

    def batch_length(self) -> int:
        return self.encoder.config.clip_len if self.phase == "pretrain" else self.config.policy.history

    def sample_batch(self, store: EpisodeStore, step: int) -> Union[ClipBatch, TransitionBatch]:
        mode = "clip" if self.phase == "pretrain" else "transition"
        return load_batch(store, mode, self.train.batch_size, self.stream.split("batch", step), self.batch_length())

    def _check_loss(self, loss: T.Tensor, step: int) -> float:
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite loss {value} at step {step} "
                                 f"(seed {self.config.run.seed}, batch stream {self.stream.split('batch', step)!r})")
        return value

    def _update(self, loss: T.Tensor, step: int) -> Tuple[float, float]:
        value = self._check_loss(loss, step)
        self.optimizer.zero_grad()
        loss.backward()
        grad_norm = T.global_norm(self.optimizer.params.values())
        self.optimizer.step(warmup_lr(step, self.train.lr, self.train.warmup))
        return value, grad_norm

    def pretrain_loss(self, batch: ClipBatch, stream: Stream) -> T.Tensor:
        frames = T.Tensor(batch.frames)
        _, decoded = self.encoder.savi_unroll(frames, stream)
        return recon_loss(stack_composites(decoded), frames)

    def bc_loss(self, batch: TransitionBatch, stream: Stream) -> T.Tensor:
        history = slot_history(self.encoder, batch.history, stream)
        return gmm_nll(self.policy(history), batch.actions)

    def pretrain_step(self, batch: ClipBatch, step: Optional[int] = None) -> float:
        """One reconstruction update on a clip batch; returns the loss."""
        step = self.step if step is None else step
        loss = self.pretrain_loss(batch, self.stream.split("slots", step))
        value, _ = self._update(loss, step)
        return value

    def bc_step(self, batch: TransitionBatch, step: Optional[int] = None) -> float:
        """
        One behavior-cloning update; the encoder stays off the tape.

        Raises:
            FrozenEncoderError: an encoder parameter ended up with a gradient
        """
        step = self.step if step is None else step
        loss = self.bc_loss(batch, self.stream.split("slots", step))
        value, _ = self._update(loss, step)
        self.assert_encoder_frozen()
        return value

    def assert_encoder_frozen(self) -> None:
        for name, p in self.encoder.named_parameters().items():
            if p.requires_grad or p.grad is not None:
                raise FrozenEncoderError(f"encoder parameter '{name}' is trainable or received a gradient "
                                         f"during behavior cloning")

    def train_step(self, batch, step: int) -> Tuple[float, float]:
        stream = self.stream.split("slots", step)
        if self.phase == "pretrain":
            return self._update(self.pretrain_loss(batch, stream), step)
        result = self._update(self.bc_loss(batch, stream), step)
        self.assert_encoder_frozen()
        return result

    # -- loop ------------------------------------------------------------------

    def open_store(self, split: str = "train") -> EpisodeStore:
        tasks = None if self.train.pooled else self.config.data.tasks
        return EpisodeStore(Path(self.config.data.dataset), split=split, tasks=tasks)

    def fit(self, steps: Optional[int] = None, out_dir: Optional[Union[str, Path]] = None) -> List[float]:
        """
        Train until ``steps`` (default ``train.steps``) total steps have run.

        Writes ``metrics.csv`` and periodic checkpoints under ``out_dir``
        (default ``run.out``); returns the losses of the steps run here.
        """
        total = self.train.steps if steps is None else steps
        out = Path(out_dir or self.config.run.out)
        out.mkdir(parents=True, exist_ok=True)
        store = self.store if self.store is not None else self.open_store("train")
        self.store = store
        losses: List[float] = []
        started = time.time()

        metrics_path = out / "metrics.csv"
        new_file = self.step == 0 or not metrics_path.exists()
        with open(metrics_path, "w" if new_file else "a", newline="") as f:
            writer = csv.writer(f)
            if new_file:
                writer.writerow(METRICS_FIELDS)
            source = range(self.step, total)
            def sample(s: int):
                return self.sample_batch(store, s)

            batches: Iterable[Tuple[int, object]]
            prefetcher = Prefetcher(sample, source) if self.train.prefetch else None
            batches = prefetcher if prefetcher is not None else ((s, sample(s)) for s in source)
            try:
                for step, batch in batches:
                    loss, grad_norm = self.train_step(batch, step)
                    losses.append(loss)
                    self.losses.append(loss)
                    self.step = step + 1
                    if self.step % self.train.log_every == 0 or self.step == total:
                        wall = time.time() - started
                        writer.writerow([self.step, f"{loss:.8g}", f"{grad_norm:.8g}", f"{wall:.3f}"])
                        f.flush()
                        logger.info("%s step %d/%d loss %.5f grad_norm %.4f", self.phase, self.step, total,
                                    loss, grad_norm)
                    if self.train.checkpoint_every and self.step % self.train.checkpoint_every == 0:
                        self.save_checkpoint(out / f"{self.checkpoint_stem()}_{self.step}.spck")
            finally:
                if prefetcher is not None:
                    prefetcher.close()
        self.save_checkpoint(out / f"{self.checkpoint_stem()}_last.spck")
        return losses

    def validation_loss(self, store: Optional[EpisodeStore] = None, batches: Optional[int] = None) -> float:
        """Mean reconstruction MSE or NLL over held-out batches (no updates)."""
        store = store if store is not None else self.open_store("val")
        count = self.train.val_batches if batches is None else batches
        mode = "clip" if self.phase == "pretrain" else "transition"
        total = 0.0
        with T.no_grad():
            for i in range(count):
                batch = load_batch(store, mode, self.train.batch_size, self.stream.split("val", i), self.batch_length())
                stream = self.stream.split("val-slots", i)
                loss = self.pretrain_loss(batch, stream) if self.phase == "pretrain" else self.bc_loss(batch, stream)
                total += loss.item()
        return total / max(count, 1)

    # -- checkpoints -----------------------------------------------------------

    def checkpoint_stem(self) -> str:
        return "pretrain" if self.phase == "pretrain" else "policy"

    def checkpoint_arrays(self) -> Dict[str, np.ndarray]:
        arrays = _prefixed(ENCODER_PREFIX, self.encoder.state_arrays())
        if self.policy is not None:
            arrays.update(_prefixed(POLICY_PREFIX, self.policy.state_arrays()))
        arrays.update(self.optimizer.state_arrays())
        return arrays

    def checkpoint_metadata(self) -> Dict[str, str]:
        meta = {"kind": "encoder" if self.policy is None else "policy", "step": str(self.step),
                "adam_t": str(self.optimizer.state.t), "seed": str(self.config.run.seed),
                "precision": T.get_precision()}
        meta.update(flatten("encoder", self.encoder.config))
        if self.policy is not None:
            meta.update(flatten("policy", self.policy.config))
            meta["encoder_checkpoint"] = str(self.train.encoder_checkpoint)
        return meta

    def save_checkpoint(self, path: Union[str, Path]) -> str:
        """Weights, Adam moments and step; refuses non-finite parameters."""
        written = save_checkpoint(path, self.checkpoint_arrays(), self.checkpoint_metadata())
        logger.info("Saved checkpoint %s (step %d)", written, self.step)
        return written

    def resume(self, path: Union[str, Path]) -> int:
        """Restore weights, Adam moments and step from ``path``; returns the step."""
        params, meta = load_checkpoint(path)
        expected = "encoder" if self.policy is None else "policy"
        if meta.get("kind") != expected:
            raise ConfigError(f"{path}: cannot resume {self.phase} from a '{meta.get('kind')}' checkpoint")
        if self.policy is None:
            self.encoder.load_arrays(_strip(ENCODER_PREFIX, params))
        else:
            self.policy.load_arrays(_strip(POLICY_PREFIX, params))
        self.optimizer.load_state_arrays(params, int(meta.get("adam_t", 0)))
        self.step = int(meta.get("step", 0))
        logger.info("Resumed %s from %s at step %d", self.phase, path, self.step)
        return self.step
