"""
sim.py - MiniShape: seeded 2.5D top-down tabletop simulator

World frame: the table is the square [-1, 1]² and the end-effector height z
lies in [0, 1]. Object footprints are axis-aligned squares of side
2·half_size whatever their drawn shape. The end-effector is a point for
contact purposes.

Dynamics are quasi-static:
  * the ee moves by the clamped dpos; drot is carried but ignored
  * entering the red cube's footprint from outside below contact_height
    pushes the cube out along the axis of least penetration; the push is
    stopped by other objects and the table edge, the ee then rests on the face
  * closing the gripper near the cube (xy within grasp_radius, z below
    grasp_height) attaches it; a held cube follows the ee exactly
  * opening drops the cube: into the bin if its centre is over the bin,
    otherwise onto the nearest free spot of the table
"""

import logging
import math
from dataclasses import dataclass, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, PlacementError, SimulationError
from .policy import Action
from .rng import Stream

logger = logging.getLogger(__name__)

TASKS = ("push", "pick", "place")
LEVELS = ("none", "L1", "L2", "L3")
PRESETS = ("full", "reduced")
SHAPES = ("cube", "sphere", "triangle")

Color = Tuple[float, float, float]

TRAIN_DISTRACTOR_COLORS: Dict[str, Color] = {
    "gray": (0.5, 0.5, 0.5),
    "blue": (0.2, 0.3, 0.9),
    "green": (0.2, 0.8, 0.3),
    "brown": (0.55, 0.35, 0.2),
    "cyan": (0.2, 0.8, 0.8),
    "purple": (0.6, 0.3, 0.8),
    "yellow": (0.9, 0.9, 0.2),
}
UNSEEN_DISTRACTOR_COLORS: Dict[str, Color] = {
    "pink": (0.95, 0.6, 0.75),
    "orange": (0.95, 0.55, 0.1),
    "lime": (0.7, 0.95, 0.2),
    "black": (0.05, 0.05, 0.05),
    "dark-green": (0.05, 0.35, 0.1),
    "dark-blue": (0.05, 0.1, 0.4),
    "dark-red": (0.45, 0.05, 0.05),
}
TRAIN_BACKGROUNDS: Dict[str, Color] = {
    "red": (0.6, 0.15, 0.15),
    "green": (0.15, 0.5, 0.2),
    "blue": (0.15, 0.2, 0.6),
    "white": (0.95, 0.95, 0.95),
    "black": (0.1, 0.1, 0.1),
}
UNSEEN_BACKGROUNDS: Dict[str, Color] = {
    "yellow": (0.85, 0.8, 0.2),
    "pink": (0.9, 0.55, 0.7),
    "cyan": (0.2, 0.75, 0.75),
    "orange": (0.9, 0.5, 0.1),
    "dark-green": (0.05, 0.3, 0.1),
}
TABLE_COLORS: Dict[str, Color] = {
    "black": (0.12, 0.12, 0.12),
    "white": (0.92, 0.92, 0.92),
}

CUBE_COLOR: Color = (0.9, 0.1, 0.1)
CUBE_HALF_SIZE = 0.05
# an ee within this distance of a face counts as touching it, not inside
CONTACT_TOL = 1e-9
BIN_COLOR: Color = (0.1, 0.6, 0.15)
BIN_HALF_SIZE = 0.12
MARKER_COLOR: Color = (0.9, 0.1, 0.9)
EE_COLOR: Color = (0.6, 0.6, 0.6)
EE_GRIP_COLOR: Color = (0.3, 0.3, 0.3)

TRAIN_SIZE_RANGES = ((0.04, 0.07),)
NOVEL_SIZE_RANGES = ((0.025, 0.035), (0.075, 0.09))

VIEW_EXTENT = 1.25
PLACEMENT_ATTEMPTS = 100
GAP = 0.02


@dataclass
class SimConfig:
    """Simulator tolerances and limits (``[sim]`` config section)."""
    image_size: int = 64
    horizon: int = 120
    max_step: float = 0.05
    eps_target: float = 0.05
    eps_lift: float = 0.04
    grasp_radius: float = 0.06
    grasp_height: float = 0.06
    contact_height: float = 0.08
    hold_steps: int = 5
    lift_height: float = 0.25

    def validate(self) -> "SimConfig":
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"sim.{f.name}: must be positive, got {getattr(self, f.name)}")
        if self.grasp_height > self.contact_height:
            raise ConfigError("sim.grasp_height must not exceed sim.contact_height")
        return self


@dataclass(frozen=True)
class LevelConfig:
    """Sampling distributions for one generalisation level."""
    level: str
    distractor_palette: Dict[str, Color]
    background_palette: Dict[str, Color]
    table_palette: Dict[str, Color]
    size_ranges: Tuple[Tuple[float, float], ...]
    count_range: Tuple[int, int] = (1, 3)
    fixed_background: bool = False

    @classmethod
    def for_level(cls, level: str, preset: str = "full") -> "LevelConfig":
        """
        ``none`` is the training distribution; L1 swaps the distractor palette,
        L2 the background palette, L3 the distractor sizes.
        """
        if level not in LEVELS:
            raise ConfigError(f"level: expected one of {LEVELS}, got '{level}'")
        if preset not in PRESETS:
            raise ConfigError(f"preset: expected one of {PRESETS}, got '{preset}'")
        reduced = preset == "reduced"
        return cls(
            level=level,
            distractor_palette=UNSEEN_DISTRACTOR_COLORS if level == "L1" else TRAIN_DISTRACTOR_COLORS,
            background_palette=UNSEEN_BACKGROUNDS if level == "L2" else TRAIN_BACKGROUNDS,
            table_palette=TABLE_COLORS,
            size_ranges=NOVEL_SIZE_RANGES if level == "L3" else TRAIN_SIZE_RANGES,
            count_range=(1, 1) if reduced else (1, 3),
            fixed_background=reduced,
        )


@dataclass(frozen=True)
class SceneObject:
    id: int
    shape: str
    half_size: float
    color: Color
    pos: Tuple[float, float]
    role: str
    z: float = 0.0
    in_bin: bool = False


@dataclass(frozen=True)
class Goal:
    """Target point (push), lift pose (pick) or bin object id (place)."""
    kind: str
    point: Tuple[float, float, float]
    bin_id: Optional[int] = None


@dataclass
class WorldState:
    task: str
    level: str
    seed: int
    ee: Tuple[float, float, float]
    grip_closed: bool
    held: Optional[int]
    objects: List[SceneObject]
    goal: Goal
    background: Color
    table: Color
    stream: Stream
    step_count: int = 0
    hold_count: int = 0
    done: bool = False

    @property
    def cube(self) -> SceneObject:
        return next(o for o in self.objects if o.role == "target-object")

    @property
    def bin(self) -> Optional[SceneObject]:
        return next((o for o in self.objects if o.role == "bin"), None)

    @property
    def distractors(self) -> List[SceneObject]:
        return [o for o in self.objects if o.role == "distractor"]

    def copy(self) -> "WorldState":
        return replace(self, objects=list(self.objects))

    def with_object(self, obj: SceneObject) -> "WorldState":
        """Copy with the object of the same id replaced."""
        out = self.copy()
        out.objects = [obj if o.id == obj.id else o for o in out.objects]
        return out


# -- geometry -------------------------------------------------------------------

def _overlap(a_pos, a_hs, b_pos, b_hs, gap: float = 0.0) -> bool:
    """Footprints intersect with positive area (after inflating by gap)."""
    return (abs(a_pos[0] - b_pos[0]) < a_hs + b_hs + gap
            and abs(a_pos[1] - b_pos[1]) < a_hs + b_hs + gap)


def _inside(point, obj: SceneObject, margin: float = 0.0) -> bool:
    """Strictly inside the footprint shrunk by ``margin``."""
    lim = obj.half_size - margin
    return abs(point[0] - obj.pos[0]) < lim and abs(point[1] - obj.pos[1]) < lim


def _on_table(pos, hs: float) -> bool:
    return abs(pos[0]) <= 1.0 - hs and abs(pos[1]) <= 1.0 - hs


def _rect_hit(pos, hs: float, lo: Tuple[float, float], hi: Tuple[float, float], gap: float) -> bool:
    return (pos[0] + hs + gap > lo[0] and pos[0] - hs - gap < hi[0]
            and pos[1] + hs + gap > lo[1] and pos[1] - hs - gap < hi[1])


def over_bin(pos, bin_obj: SceneObject) -> bool:
    return abs(pos[0] - bin_obj.pos[0]) <= bin_obj.half_size and abs(pos[1] - bin_obj.pos[1]) <= bin_obj.half_size


def push_corridor(cube: SceneObject, target: Sequence[float]) -> List[Tuple[Tuple[float, float], Tuple[float, float]]]:
    """Rectangles swept by the cube on an x-then-y push from its position to target."""
    (cx, cy), hs = cube.pos, cube.half_size
    tx, ty = target[0], target[1]
    return [
        ((min(cx, tx) - hs, cy - hs), (max(cx, tx) + hs, cy + hs)),
        ((tx - hs, min(cy, ty) - hs), (tx + hs, max(cy, ty) + hs)),
    ]


# -- scene sampling -----------------------------------------------------------------

def _sample_size(rng: np.random.Generator, ranges: Tuple[Tuple[float, float], ...]) -> float:
    lo, hi = ranges[int(rng.integers(len(ranges)))]
    return float(rng.uniform(lo, hi))


def _choose(rng: np.random.Generator, palette: Dict[str, Color]) -> Color:
    names = sorted(palette)
    return palette[names[int(rng.integers(len(names)))]]


def _place(rng: np.random.Generator, hs: float, extent: float, ok) -> Tuple[float, float]:
    bound = min(extent, 1.0 - hs)
    for _ in range(PLACEMENT_ATTEMPTS):
        pos = (float(rng.uniform(-bound, bound)), float(rng.uniform(-bound, bound)))
        if ok(pos):
            return pos
    raise PlacementError(f"could not place object of half_size {hs:.3f} after {PLACEMENT_ATTEMPTS} attempts")


def sample_scene(task: str, level: LevelConfig, seed: int, config: SimConfig) -> WorldState:
    """Draw a fresh scene; every random choice comes from the seed."""
    if task not in TASKS:
        raise ConfigError(f"task: expected one of {TASKS}, got '{task}'")
    stream = Stream(seed).split("scene", task)
    rng = stream.generator()

    background_palette = level.background_palette
    if level.fixed_background:
        background = background_palette[sorted(background_palette)[0]]
    else:
        background = _choose(rng, background_palette)
    table = _choose(rng, level.table_palette)

    cube_pos = (float(rng.uniform(-0.6, 0.6)), float(rng.uniform(-0.6, 0.6)))
    cube = SceneObject(0, "cube", CUBE_HALF_SIZE, CUBE_COLOR, cube_pos, "target-object")
    objects = [cube]
    blocked: List[Tuple[Tuple[float, float], Tuple[float, float]]] = []

    if task == "push":
        def target_ok(p):
            d = math.hypot(p[0] - cube_pos[0], p[1] - cube_pos[1])
            return 0.25 <= d <= 0.6
        tx, ty = _place(rng, 0.0, 0.65, target_ok)
        goal = Goal("target", (tx, ty, 0.0))
        blocked = push_corridor(cube, (tx, ty))
    elif task == "pick":
        goal = Goal("lift", (cube_pos[0], cube_pos[1], config.lift_height))
        r = 0.2
        blocked = [((cube_pos[0] - r, cube_pos[1] - r), (cube_pos[0] + r, cube_pos[1] + r))]
    else:
        def bin_ok(p):
            return (math.hypot(p[0] - cube_pos[0], p[1] - cube_pos[1]) >= 0.4
                    and not _overlap(p, BIN_HALF_SIZE, cube_pos, CUBE_HALF_SIZE, GAP))
        bin_pos = _place(rng, BIN_HALF_SIZE, 0.8, bin_ok)
        objects.append(SceneObject(1, "cube", BIN_HALF_SIZE, BIN_COLOR, bin_pos, "bin"))
        goal = Goal("bin", (bin_pos[0], bin_pos[1], 0.0), bin_id=1)
        r = 0.2
        blocked = [((cube_pos[0] - r, cube_pos[1] - r), (cube_pos[0] + r, cube_pos[1] + r))]

    lo, hi = level.count_range
    count = int(rng.integers(lo, hi + 1))
    for _ in range(count):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = _choose(rng, level.distractor_palette)
        hs = _sample_size(rng, level.size_ranges)

        def free(p, hs=hs):
            if any(_overlap(p, hs, o.pos, o.half_size, GAP) for o in objects):
                return False
            return not any(_rect_hit(p, hs, a, b, GAP) for a, b in blocked)

        pos = _place(rng, hs, 0.9, free)
        objects.append(SceneObject(len(objects), shape, hs, color, pos, "distractor"))

    ee = (float(rng.uniform(-0.8, 0.8)), float(rng.uniform(-0.8, 0.8)), float(rng.uniform(0.15, 0.3)))
    return WorldState(task=task, level=level.level, seed=int(seed), ee=ee, grip_closed=False, held=None,
                      objects=objects, goal=goal, background=background, table=table, stream=stream)


# -- dynamics ---------------------------------------------------------------------------

def _push_limit(cube: SceneObject, axis: int, new_c: float, others: Sequence[SceneObject]) -> float:
    """Clamp the cube's new centre coordinate on ``axis`` against the table and other footprints."""
    hs = cube.half_size
    old = cube.pos[axis]
    other_axis = 1 - axis
    new_c = min(max(new_c, -1.0 + hs), 1.0 - hs)
    for o in others:
        if abs(cube.pos[other_axis] - o.pos[other_axis]) >= hs + o.half_size:
            continue
        reach = hs + o.half_size
        if new_c < old and o.pos[axis] <= old - reach:
            new_c = max(new_c, o.pos[axis] + reach)
        elif new_c > old and o.pos[axis] >= old + reach:
            new_c = min(new_c, o.pos[axis] - reach)
    return new_c


def _settle(cube: SceneObject, others: Sequence[SceneObject]) -> Tuple[float, float]:
    """Nearest free table position for a dropped cube (spiral search)."""
    hs = cube.half_size
    start = (min(max(cube.pos[0], -1.0 + hs), 1.0 - hs), min(max(cube.pos[1], -1.0 + hs), 1.0 - hs))

    def free(p):
        return _on_table(p, hs) and not any(_overlap(p, hs, o.pos, o.half_size) for o in others)

    if free(start):
        return start
    for ring in range(1, 200):
        r = 0.01 * ring
        for k in range(16):
            ang = 2.0 * math.pi * k / 16
            p = (start[0] + r * math.cos(ang), start[1] + r * math.sin(ang))
            if free(p):
                return p
    raise SimulationError("no free position to drop the cube")


def success(state: WorldState, config: SimConfig) -> bool:
    """Task predicate on the current state."""
    cube = state.cube
    if state.task == "push":
        if state.held is not None:
            return False
        gx, gy, _ = state.goal.point
        return math.hypot(cube.pos[0] - gx, cube.pos[1] - gy) < config.eps_target
    if state.task == "pick":
        return state.held == cube.id and state.hold_count >= config.hold_steps
    return state.held is None and cube.in_bin


def _near_lift_goal(state: WorldState, config: SimConfig) -> bool:
    cube = state.cube
    gx, gy, gz = state.goal.point
    return math.sqrt((cube.pos[0] - gx) ** 2 + (cube.pos[1] - gy) ** 2 + (cube.z - gz) ** 2) < config.eps_lift


def _check_action(state: WorldState, action: Action) -> None:
    if state.done:
        raise SimulationError(f"step called on a finished episode (seed {state.seed}, step {state.step_count})")
    if not action.is_finite():
        raise SimulationError(f"non-finite action {action.to_array().tolist()}")


def advance(state: WorldState, action: Action, config: SimConfig) -> WorldState:
    """Pure transition function (no rendering)."""
    _check_action(state, action)
    a = action.clamped(config.max_step)
    new = state.copy()
    new.step_count += 1
    cube = state.cube
    others = [o for o in state.objects if o.role == "distractor"]
    px, py, pz = state.ee

    if state.held is not None:
        lim = 1.0 - cube.half_size
        x = min(max(px + a.dpos[0], -lim), lim)
        y = min(max(py + a.dpos[1], -lim), lim)
    else:
        x = min(max(px + a.dpos[0], -1.0), 1.0)
        y = min(max(py + a.dpos[1], -1.0), 1.0)
    z = min(max(pz + a.dpos[2], 0.0), 1.0)

    pushable = state.held is None and cube.z == 0.0 and not cube.in_bin
    if pushable and z < config.contact_height and pz < config.contact_height \
            and _inside((x, y), cube, CONTACT_TOL) and not _inside((px, py), cube, CONTACT_TOL):
        before = (px - cube.pos[0], py - cube.pos[1])
        # axes on which the ee started on or beyond a face
        faces = [i for i in (0, 1) if abs(before[i]) >= cube.half_size - CONTACT_TOL]
        if len(faces) == 1:
            axis = faces[0]
        else:
            pen = (cube.half_size - abs(x - cube.pos[0]), cube.half_size - abs(y - cube.pos[1]))
            axis = 0 if pen[0] <= pen[1] else 1
        ee_axis = (x, y)[axis]
        side = 1.0 if before[axis] > 0.0 else -1.0
        wanted = ee_axis - side * cube.half_size
        c_new = _push_limit(cube, axis, wanted, others)
        pos = list(cube.pos)
        pos[axis] = c_new
        cube = replace(cube, pos=(pos[0], pos[1]))
        if axis == 0:
            x = c_new + side * cube.half_size
        else:
            y = c_new + side * cube.half_size
        new = new.with_object(cube)

    new.ee = (x, y, z)
    closing = a.gripper > 0.0
    held = state.held
    if closing and not state.grip_closed and held is None and not cube.in_bin:
        if math.hypot(x - cube.pos[0], y - cube.pos[1]) <= config.grasp_radius and z < config.grasp_height:
            held = cube.id
    elif not closing and state.grip_closed and held is not None:
        held = None
        bin_obj = state.bin
        if bin_obj is not None and over_bin(cube.pos, bin_obj):
            cube = replace(cube, z=0.0, in_bin=True)
        else:
            cube = replace(cube, z=0.0, pos=_settle(cube, others))
        new = new.with_object(cube)
    new.grip_closed = closing
    new.held = held

    if held is not None:
        cube = replace(new.cube, pos=(x, y), z=z)
        new = new.with_object(cube)

    if state.task == "pick":
        new.hold_count = state.hold_count + 1 if held is not None and _near_lift_goal(new, config) else 0
    new.done = success(new, config) or new.step_count >= config.horizon
    return new


# -- rendering -------------------------------------------------------------------------------

def color_u8(color: Color) -> np.ndarray:
    """RGB triple in [0, 1] to the exact uint8 pixel value render() writes."""
    return np.round(np.asarray(color, dtype=np.float64) * 255.0).astype(np.uint8)


def pixel_of(point: Sequence[float], size: int) -> Tuple[int, int]:
    """(row, col) of the pixel containing a world point."""
    scale = size / (2.0 * VIEW_EXTENT)
    col = int(math.floor((point[0] + VIEW_EXTENT) * scale))
    row = int(math.floor((VIEW_EXTENT - point[1]) * scale))
    return min(max(row, 0), size - 1), min(max(col, 0), size - 1)


def _grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    centers = (np.arange(size) + 0.5) * (2.0 * VIEW_EXTENT / size)
    xs = centers - VIEW_EXTENT
    ys = VIEW_EXTENT - centers
    return np.meshgrid(xs, ys, indexing="xy")


def silhouette(obj: SceneObject, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    cx, cy = obj.pos
    hs = obj.half_size
    dx, dy = X - cx, Y - cy
    if obj.shape == "sphere":
        return dx * dx + dy * dy <= hs * hs
    if obj.shape == "triangle":
        return (dy >= -hs) & (dy <= hs) & (np.abs(dx) <= (hs - dy) / 2.0)
    return (np.abs(dx) <= hs) & (np.abs(dy) <= hs)


def render(state: WorldState, size: int = 64) -> np.ndarray:
    """Top-down flat-shaded (size, size, 3) uint8 image."""
    X, Y = _grid(size)
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = color_u8(state.background)
    img[(np.abs(X) <= 1.0) & (np.abs(Y) <= 1.0)] = color_u8(state.table)

    if state.goal.kind == "target":
        gx, gy, _ = state.goal.point
        r2 = (X - gx) ** 2 + (Y - gy) ** 2
        img[(r2 <= 0.085 ** 2) & (r2 >= 0.05 ** 2)] = color_u8(MARKER_COLOR)

    resting = [o for o in state.objects if o.id != state.held]
    resting.sort(key=lambda o: (o.role != "bin", o.in_bin, o.id))
    for obj in resting:
        img[silhouette(obj, X, Y)] = color_u8(obj.color)
    if state.held is not None:
        held = next(o for o in state.objects if o.id == state.held)
        img[silhouette(held, X, Y)] = color_u8(held.color)

    ex, ey, ez = state.ee
    r2 = (X - ex) ** 2 + (Y - ey) ** 2
    outer = 0.06 + 0.04 * ez
    inner = max(outer - (0.02 + 0.05 * ez), 0.0)
    img[(r2 <= outer * outer) & (r2 >= inner * inner)] = color_u8(EE_COLOR)
    if state.grip_closed:
        img[r2 <= min(inner, 0.03) ** 2] = color_u8(EE_GRIP_COLOR)
    return img


class MiniShape:
    """
    Environment facade over the pure sampling, transition and render functions.

    Examples:
        >>> env = MiniShape(SimConfig())
        >>> state, image = env.reset("push", "L1", seed=3)
        >>> state, image, ok, done = env.step(state, Action((0.05, 0.0, 0.0)))
    """

    def __init__(self, config: Optional[SimConfig] = None, preset: str = "full"):
        self.config = (config or SimConfig()).validate()
        if preset not in PRESETS:
            raise ConfigError(f"preset: expected one of {PRESETS}, got '{preset}'")
        self.preset = preset

    def reset(self, task: str, level: str, seed: int) -> Tuple[WorldState, np.ndarray]:
        state = sample_scene(task, LevelConfig.for_level(level, self.preset), seed, self.config)
        return state, self.render(state)

    def step(self, state: WorldState, action: Action,
             render: bool = True) -> Tuple[WorldState, Optional[np.ndarray], bool, bool]:
        new = advance(state, action, self.config)
        image = self.render(new) if render else None
        return new, image, success(new, self.config), new.done

    def render(self, state: WorldState) -> np.ndarray:
        return render(state, self.config.image_size)

    def success(self, state: WorldState) -> bool:
        return success(state, self.config)
