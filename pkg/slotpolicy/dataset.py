"""
dataset.py - RoboShape-mini episode shards, manifest, loaders and batching

Shard layout (little-endian):

    magic "RSHP" | version u32
    per episode:  payload length u32 | payload | CRC32(payload) u32
    payload:      task u8 | level u8 | seed u64 | length u32 | height u16 |
                  width u16 | action_dim u8 | success u8 |
                  frames u8[length, height, width, 3] | actions f32[length, 7]

Shards are append-only. ``manifest.json`` next to the shards lists every
episode with its shard, byte offset and split, so readers never depend on
episode order inside a file.
"""

import functools
import json
import logging
import os
import struct
import threading
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import CorruptEpisodeError, DatasetError, ExpertTimeout
from .expert import ScriptedExpert
from .parallel import map_chunks
from .policy import ACTION_DIM, pad_history
from .rng import Stream
from .sim import LEVELS, TASKS, MiniShape, SimConfig

logger = logging.getLogger(__name__)

MAGIC = b"RSHP"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
_HEADER = struct.Struct("<BBQIHHBB")
_U32 = struct.Struct("<I")

PathLike = Union[str, os.PathLike]


@dataclass
class EpisodeRecord:
    """One demonstration: frame t is the observation before action t."""
    task: str
    level: str
    seed: int
    frames: np.ndarray
    actions: np.ndarray
    success: bool = True

    @property
    def length(self) -> int:
        return int(self.frames.shape[0])

    def validate(self) -> "EpisodeRecord":
        if self.length == 0:
            raise DatasetError(f"episode seed {self.seed}: empty episode (length 0)")
        if self.frames.ndim != 4 or self.frames.shape[3] != 3 or self.frames.dtype != np.uint8:
            raise DatasetError(f"episode seed {self.seed}: frames must be uint8 (L, H, W, 3), "
                               f"got {self.frames.dtype} {self.frames.shape}")
        if self.actions.shape != (self.length, ACTION_DIM):
            raise DatasetError(f"episode seed {self.seed}: actions shape {self.actions.shape} != "
                               f"({self.length}, {ACTION_DIM})")
        if self.task not in TASKS or self.level not in LEVELS:
            raise DatasetError(f"episode seed {self.seed}: unknown task/level {self.task}/{self.level}")
        return self

    def __eq__(self, other) -> bool:
        if not isinstance(other, EpisodeRecord):
            return NotImplemented
        return ((self.task, self.level, self.seed, self.success) == (other.task, other.level, other.seed, other.success)
                and np.array_equal(self.frames, other.frames) and np.array_equal(self.actions, other.actions))


def encode_episode(record: EpisodeRecord) -> bytes:
    """Length-prefixed, CRC-suffixed episode block."""
    record.validate()
    length, height, width, _ = record.frames.shape
    header = _HEADER.pack(TASKS.index(record.task), LEVELS.index(record.level), record.seed,
                          length, height, width, ACTION_DIM, int(bool(record.success)))
    payload = b"".join([
        header,
        np.ascontiguousarray(record.frames, dtype=np.uint8).tobytes(),
        np.ascontiguousarray(record.actions, dtype="<f4").tobytes(),
    ])
    return _U32.pack(len(payload)) + payload + _U32.pack(zlib.crc32(payload))


def decode_episode(payload: bytes, crc: int, where: str = "") -> EpisodeRecord:
    if zlib.crc32(payload) != crc:
        raise CorruptEpisodeError(f"{where}: CRC32 mismatch (stored {crc:#010x}, computed {zlib.crc32(payload):#010x})")
    task_id, level_id, seed, length, height, width, action_dim, ok = _HEADER.unpack_from(payload, 0)
    if action_dim != ACTION_DIM or task_id >= len(TASKS) or level_id >= len(LEVELS):
        raise DatasetError(f"{where}: invalid episode header")
    n_frames = length * height * width * 3
    expected = _HEADER.size + n_frames + length * ACTION_DIM * 4
    if len(payload) != expected:
        raise DatasetError(f"{where}: payload is {len(payload)} bytes, header implies {expected}")
    off = _HEADER.size
    frames = np.frombuffer(payload, dtype=np.uint8, count=n_frames, offset=off).reshape(length, height, width, 3)
    actions = np.frombuffer(payload, dtype="<f4", count=length * ACTION_DIM, offset=off + n_frames)
    return EpisodeRecord(TASKS[task_id], LEVELS[level_id], int(seed), frames.copy(),
                         actions.reshape(length, ACTION_DIM).astype(np.float32), bool(ok))


class ShardWriter:
    """
    Append-only writer for one shard file.

    Examples:
        >>> with ShardWriter("data/push-000.rshp") as w:
        ...     offset = w.write_episode(record)
    """

    def __init__(self, path: PathLike):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            exists = self.path.exists() and self.path.stat().st_size > 0
            if exists:
                with open(self.path, "rb") as f:
                    _read_file_header(f, self.path)
            self._file = open(self.path, "ab")
            if not exists:
                self._file.write(MAGIC + _U32.pack(FORMAT_VERSION))
        except OSError as e:
            raise DatasetError(f"{self.path}: cannot open shard for writing: {e}") from e
        self.count = 0

    def write_episode(self, record: EpisodeRecord) -> int:
        """Append one episode; returns its byte offset in the shard."""
        block = encode_episode(record)
        try:
            offset = self._file.tell()
            self._file.write(block)
        except OSError as e:
            raise DatasetError(f"{self.path}: write failed: {e}") from e
        self.count += 1
        return offset

    def close(self) -> None:
        try:
            self._file.close()
        except OSError as e:
            raise DatasetError(f"{self.path}: close failed: {e}") from e

    def __enter__(self) -> "ShardWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_episode(path: PathLike, record: EpisodeRecord) -> int:
    """Append a single episode to the shard at ``path``; returns its offset."""
    with ShardWriter(path) as writer:
        return writer.write_episode(record)


def _read_file_header(f, path) -> None:
    head = f.read(8)
    if len(head) < 8 or head[:4] != MAGIC:
        raise DatasetError(f"{path}: not an RSHP shard (bad magic)")
    (version,) = _U32.unpack(head[4:])
    if version != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported shard version {version}")


def _read_block(f, path, offset: int) -> EpisodeRecord:
    f.seek(offset)
    raw = f.read(4)
    if len(raw) < 4:
        raise DatasetError(f"{path}@{offset}: truncated episode length")
    (n,) = _U32.unpack(raw)
    payload = f.read(n)
    tail = f.read(4)
    if len(payload) < n or len(tail) < 4:
        raise DatasetError(f"{path}@{offset}: truncated episode payload")
    return decode_episode(payload, _U32.unpack(tail)[0], where=f"{path}@{offset}")


def read_shard(path: PathLike) -> Iterator[EpisodeRecord]:
    """Iterate over every episode of a shard in file order."""
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as f:
        _read_file_header(f, path)
        offset = 8
        while offset < size:
            record = _read_block(f, path, offset)
            offset = f.tell()
            yield record


def read_episode(path: PathLike, offset: int) -> EpisodeRecord:
    with open(path, "rb") as f:
        _read_file_header(f, path)
        return _read_block(f, path, offset)


def split_of(seed: int, ratio: float = 0.9) -> str:
    """'train' or 'val', a pure function of the episode seed."""
    return "train" if zlib.crc32(str(int(seed)).encode("ascii")) % 100 < round(ratio * 100) else "val"


@dataclass
class DatasetManifest:
    """Shard list, per-episode index and split assignment (``manifest.json``)."""
    format_version: int = FORMAT_VERSION
    seed: int = 0
    level: str = "none"
    preset: str = "full"
    split_ratio: float = 0.9
    shards: List[Dict] = field(default_factory=list)
    tasks: Dict[str, int] = field(default_factory=dict)
    episodes: List[Dict] = field(default_factory=list)
    root: Optional[Path] = field(default=None, repr=False, compare=False)

    def to_json(self) -> str:
        data = asdict(self)
        data.pop("root")
        return json.dumps(data, indent=2, sort_keys=True)

    def save(self, out_dir: PathLike) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def load(cls, path: PathLike) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            data = json.loads(path.read_text())
        except (OSError, ValueError) as e:
            raise DatasetError(f"{path}: cannot read manifest: {e}") from e
        if data.get("format_version") != FORMAT_VERSION:
            raise DatasetError(f"{path}: unsupported manifest version {data.get('format_version')}")
        return cls(**data, root=path.parent)


def collect_episode(task: str, level: str, seed: int, preset: str = "full",
                    sim_config: Optional[SimConfig] = None, jitter: float = 0.0) -> Optional[EpisodeRecord]:
    """
    Run the scripted expert for one seeded episode.

    Returns:
        The record, or None if the expert timed out or never succeeded
        (the episode is discarded)
    """
    env = MiniShape(sim_config, preset)
    state, image = env.reset(task, level, seed)
    expert = ScriptedExpert(task, env.config, jitter=jitter, stream=Stream(seed).split("expert"))
    frames: List[np.ndarray] = []
    actions: List[np.ndarray] = []
    ok = done = False
    try:
        while not done:
            frames.append(image)
            action = expert.act(state)
            actions.append(action.to_array())
            state, image, ok, done = env.step(state, action)
    except ExpertTimeout as e:
        logger.warning("Discarding %s episode seed %d: %s", task, seed, e)
        return None
    if not ok:
        logger.warning("Discarding %s episode seed %d: no success within %d steps", task, seed, env.config.horizon)
        return None
    return EpisodeRecord(task, level, int(seed), np.stack(frames), np.stack(actions).astype(np.float32), True)


def _collect_chunk(attempts: List[Tuple[str, int]], level: str, preset: str,
                   sim_config: Optional[SimConfig], jitter: float) -> List[Optional[EpisodeRecord]]:
    return [collect_episode(task, level, seed, preset, sim_config, jitter) for task, seed in attempts]


def episode_seed(seed: int, task: str, attempt: int) -> int:
    return Stream(seed).split("episode", task, attempt).integer_seed()


def generate_dataset(out_dir: PathLike, tasks: Sequence[str], level: str = "none", episodes: int = 2000,
                     seed: int = 0, shard_episodes: int = 250, split_ratio: float = 0.9, preset: str = "full",
                     jitter: float = 0.0, sim_config: Optional[SimConfig] = None,
                     workers: Optional[int] = 1) -> DatasetManifest:
    """
    Collect ``episodes`` successful expert demonstrations per task into shards.

    Output is byte-identical for equal arguments whatever the worker count:
    attempts are numbered, collected in parallel chunks, and written in
    attempt order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(seed=int(seed), level=level, preset=preset, split_ratio=split_ratio, root=out_dir)
    collect = functools.partial(_collect_chunk, level=level, preset=preset, sim_config=sim_config, jitter=jitter)
    max_attempts = 2 * episodes + 100

    for task in tasks:
        if task not in TASKS:
            raise DatasetError(f"unknown task '{task}'")
        records: List[EpisodeRecord] = []
        attempt = 0
        while len(records) < episodes:
            if attempt >= max_attempts:
                raise DatasetError(f"{task}: only {len(records)} of {episodes} episodes succeeded "
                                   f"after {attempt} attempts")
            need = episodes - len(records)
            batch = [(task, episode_seed(seed, task, attempt + i)) for i in range(need)]
            attempt += need
            records.extend(r for r in map_chunks(collect, batch, workers) if r is not None)

        for start in range(0, episodes, shard_episodes):
            name = f"{task}-{start // shard_episodes:03d}.rshp"
            chunk = records[start:start + shard_episodes]
            shard_path = out_dir / name
            if shard_path.exists():
                shard_path.unlink()
            with ShardWriter(shard_path) as writer:
                for record in chunk:
                    offset = writer.write_episode(record)
                    manifest.episodes.append({"task": task, "seed": record.seed, "shard": name, "offset": offset,
                                              "length": record.length, "split": split_of(record.seed, split_ratio)})
            manifest.shards.append({"file": name, "task": task, "episodes": len(chunk)})
            logger.info("Wrote %s (%d episodes)", shard_path, len(chunk))
        manifest.tasks[task] = episodes
        logger.info("%s: %d episodes from %d attempts", task, episodes, attempt)

    manifest.save(out_dir)
    return manifest


def dataset_stats(manifest: DatasetManifest) -> Dict:
    """Totals for the ``stats`` subcommand."""
    lengths = [e["length"] for e in manifest.episodes]
    splits: Dict[str, int] = {}
    for e in manifest.episodes:
        splits[e["split"]] = splits.get(e["split"], 0) + 1
    return {
        "format_version": manifest.format_version,
        "level": manifest.level,
        "preset": manifest.preset,
        "shards": len(manifest.shards),
        "episodes": len(manifest.episodes),
        "tasks": dict(manifest.tasks),
        "splits": splits,
        "frames": int(sum(lengths)),
        "mean_length": float(np.mean(lengths)) if lengths else 0.0,
        "max_length": int(max(lengths)) if lengths else 0,
    }


class EpisodeStore:
    """
    Random access to one split of a dataset, with an LRU cache of decoded episodes.

    Args:
        manifest: DatasetManifest or path to it (file or directory)
        split: 'train', 'val' or None for all episodes
        tasks: Restrict to these tasks (None keeps every task)
        cache_size: Decoded episodes kept in memory
    """

    def __init__(self, manifest: Union[DatasetManifest, PathLike], split: Optional[str] = "train",
                 tasks: Optional[Sequence[str]] = None, cache_size: int = 64):
        self.manifest = manifest if isinstance(manifest, DatasetManifest) else DatasetManifest.load(manifest)
        self.root = Path(self.manifest.root or ".")
        self.index = [e for e in self.manifest.episodes
                      if (split is None or e["split"] == split) and (tasks is None or e["task"] in tasks)]
        self.split = split
        self._cache: "OrderedDict[int, EpisodeRecord]" = OrderedDict()
        self._cache_size = cache_size
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, i: int) -> EpisodeRecord:
        with self._lock:
            if i in self._cache:
                self._cache.move_to_end(i)
                return self._cache[i]
        entry = self.index[i]
        record = read_episode(self.root / entry["shard"], entry["offset"])
        with self._lock:
            self._cache[i] = record
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return record


@dataclass
class ClipBatch:
    frames: np.ndarray


@dataclass
class TransitionBatch:
    history: np.ndarray
    actions: np.ndarray
    padded: np.ndarray


def to_float_frames(frames: np.ndarray) -> np.ndarray:
    """uint8 frames to [0, 1] in the engine dtype."""
    return (np.asarray(frames, dtype=np.float64) / 255.0).astype(T.dtype())


def load_batch(store: EpisodeStore, mode: str, batch_size: int, stream: Stream,
               length: int) -> Union[ClipBatch, TransitionBatch]:
    """
    Sample a batch from the store.

    Args:
        store: Episodes to draw from
        mode: 'clip' (random T-frame windows) or 'transition'
              (H-frame history ending at t, plus actions[t])
        batch_size: Number of samples
        stream: Sampling stream; equal streams give equal batches
        length: T for clips, H for transitions; short episodes are left-padded
                by repeating their first frame
    """
    if len(store) == 0:
        raise DatasetError(f"no episodes in split '{store.split}'")
    rng = stream.generator()
    if mode == "clip":
        clips = []
        for _ in range(batch_size):
            ep = store[int(rng.integers(len(store)))]
            if ep.length >= length:
                start = int(rng.integers(0, ep.length - length + 1))
                clips.append(ep.frames[start:start + length])
            else:
                clips.append(pad_history(ep.frames, length)[0])
        return ClipBatch(to_float_frames(np.stack(clips)))
    if mode == "transition":
        histories, actions, padded = [], [], []
        for _ in range(batch_size):
            ep = store[int(rng.integers(len(store)))]
            t = int(rng.integers(0, ep.length))
            window, was_padded = pad_history(ep.frames[max(0, t - length + 1):t + 1], length)
            histories.append(window)
            actions.append(ep.actions[t])
            padded.append(was_padded)
        return TransitionBatch(to_float_frames(np.stack(histories)),
                               np.stack(actions).astype(T.dtype()), np.array(padded))
    raise ValueError(f"load_batch: mode must be 'clip' or 'transition', got '{mode}'")
