"""
expert.py - Scripted oracle planners for the three MiniShape tasks

Each expert walks a fixed phase sequence and drives the end-effector with a
unit-gain proportional controller toward the phase waypoint, clamped to
max_step per axis:

    push   per axis (x, then y): approach-behind -> push
    pick   approach-above -> descend -> close -> lift -> hold
    place  approach-above -> descend -> close -> lift -> transport
           -> center-over-bin -> open

Rotation components are always zero. A phase that overruns its budget
raises ExpertTimeout; callers discard that episode.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ExpertTimeout
from .policy import Action
from .rng import Stream
from .sim import SimConfig, WorldState, success

logger = logging.getLogger(__name__)

TRAVEL_HEIGHT = 0.15
PUSH_HEIGHT = 0.03
GRASP_DEPTH = 0.02
CARRY_HEIGHT = 0.25
DROP_HEIGHT = 0.1
APPROACH_MARGIN = 0.03
AXIS_TOLERANCE = 0.005
REACHED = 1e-6

PHASES: Dict[str, Tuple[str, ...]] = {
    "push": ("approach-behind-x", "push-x", "approach-behind-y", "push-y", "done"),
    "pick": ("approach-above", "descend", "close", "lift", "hold"),
    "place": ("approach-above", "descend", "close", "lift", "transport", "center-over-bin", "open", "done"),
}

TIMEOUTS: Dict[str, int] = {
    "approach-behind-x": 60, "push-x": 40, "approach-behind-y": 60, "push-y": 40,
    "approach-above": 60, "descend": 15, "close": 3, "lift": 20, "hold": 20,
    "transport": 60, "center-over-bin": 15, "open": 3, "done": 10,
}


@dataclass
class ExpertPhase:
    """Current phase name, steps spent in it and the latest waypoint."""
    name: str
    steps: int = 0
    waypoint: Optional[Tuple[float, float, float]] = None


def _reached(ee, waypoint) -> bool:
    return max(abs(e - w) for e, w in zip(ee, waypoint)) <= REACHED


def _xy_reached(ee, xy) -> bool:
    return abs(ee[0] - xy[0]) <= REACHED and abs(ee[1] - xy[1]) <= REACHED


class ScriptedExpert:
    """
    Phase-memory planner for one episode.

    Args:
        task: push | pick | place
        config: Simulator tolerances (max_step, lift height, ...)
        jitter: Uniform xy offset bound for the approach-above and transport
                waypoints (0 disables); push waypoints are never jittered
        stream: Source of the jitter draws

    Examples:
        >>> expert = ScriptedExpert("push", SimConfig())
        >>> action = expert.act(state)
    """

    def __init__(self, task: str, config: SimConfig, jitter: float = 0.0, stream: Optional[Stream] = None):
        self.task = task
        self.config = config
        self.jitter = jitter
        self._rng = (stream or Stream(0)).split("jitter").generator()
        self.reset()

    def reset(self) -> None:
        self._index = 0
        self.phase = ExpertPhase(PHASES[self.task][0])
        self._offset = self._draw_offset()

    def _draw_offset(self) -> Tuple[float, float]:
        if self.jitter <= 0:
            return (0.0, 0.0)
        dx, dy = self._rng.uniform(-self.jitter, self.jitter, size=2)
        return (float(dx), float(dy))

    def _advance(self) -> None:
        self._index += 1
        self.phase = ExpertPhase(PHASES[self.task][self._index])
        self._offset = self._draw_offset()
        logger.debug("expert %s -> phase %s", self.task, self.phase.name)

    # -- waypoint geometry ---------------------------------------------------

    def _push_axis(self) -> int:
        return 0 if self.phase.name.endswith("-x") else 1

    def approach_waypoint(self, state: WorldState, axis: int = 0) -> Tuple[float, float]:
        """Point behind the cube on ``axis``, opposite the direction to the target."""
        cube = state.cube
        target = state.goal.point[axis]
        s = 1.0 if target >= cube.pos[axis] else -1.0
        behind = list(cube.pos)
        behind[axis] = cube.pos[axis] - s * (cube.half_size + APPROACH_MARGIN)
        return behind[0], behind[1]

    def _travel_to(self, ee, xy, final_z: float) -> Tuple[Tuple[float, float, float], bool]:
        """Rise, travel at safe height, then descend; returns (waypoint, arrived)."""
        if _xy_reached(ee, xy):
            wp = (xy[0], xy[1], final_z)
            return wp, _reached(ee, wp)
        if ee[2] >= TRAVEL_HEIGHT - REACHED:
            return (xy[0], xy[1], max(TRAVEL_HEIGHT, min(ee[2], CARRY_HEIGHT))), False
        return (ee[0], ee[1], TRAVEL_HEIGHT), False

    def _phase_target(self, state: WorldState) -> Tuple[Optional[Tuple[float, float, float]], float, bool]:
        """(waypoint or None for zero motion, gripper command, phase complete)."""
        name = self.phase.name
        ee = state.ee
        cube = state.cube
        gx, gy, gz = state.goal.point

        if name.startswith("approach-behind") or name.startswith("push-"):
            axis = self._push_axis()
            remaining = (gx, gy)[axis] - cube.pos[axis]
            if abs(remaining) <= AXIS_TOLERANCE:
                return None, 1.0, True
            if name.startswith("approach-behind"):
                bx, by = self.approach_waypoint(state, axis)
                wp, arrived = self._travel_to(ee, (bx, by), PUSH_HEIGHT)
                return wp, 1.0, arrived
            s = 1.0 if remaining > 0 else -1.0
            wp = [cube.pos[0], cube.pos[1], PUSH_HEIGHT]
            wp[axis] = (gx, gy)[axis] - s * cube.half_size
            return (wp[0], wp[1], wp[2]), 1.0, False

        if name == "approach-above":
            above = (cube.pos[0] + self._offset[0], cube.pos[1] + self._offset[1])
            wp, arrived = self._travel_to(ee, above, TRAVEL_HEIGHT)
            return wp, -1.0, arrived
        if name == "descend":
            wp = (cube.pos[0], cube.pos[1], GRASP_DEPTH)
            return wp, -1.0, _reached(ee, wp)
        if name == "close":
            return None, 1.0, state.held is not None
        if name == "lift":
            wp = (gx, gy, gz) if self.task == "pick" else (ee[0], ee[1], CARRY_HEIGHT)
            return wp, 1.0, _reached(ee, wp)
        if name == "hold":
            return None, 1.0, False
        if name == "transport":
            wp = (gx + self._offset[0], gy + self._offset[1], CARRY_HEIGHT)
            return wp, 1.0, _reached(ee, wp)
        if name == "center-over-bin":
            wp = (gx, gy, DROP_HEIGHT)
            return wp, 1.0, _reached(ee, wp)
        if name == "open":
            return None, -1.0, state.held is None
        return None, 1.0 if state.grip_closed else -1.0, False

    # -- control -------------------------------------------------------------------

    def act(self, state: WorldState) -> Action:
        """
        Next action for ``state``.

        Raises:
            ExpertTimeout: the current phase exceeded its step budget
        """
        if success(state, self.config):
            return Action((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), 1.0 if state.grip_closed else -1.0)

        for _ in range(len(PHASES[self.task])):
            waypoint, gripper, complete = self._phase_target(state)
            if not complete or self._index == len(PHASES[self.task]) - 1:
                break
            self._advance()

        self.phase.steps += 1
        self.phase.waypoint = waypoint
        if self.phase.steps > TIMEOUTS[self.phase.name]:
            raise ExpertTimeout(f"{self.task} expert: phase '{self.phase.name}' exceeded "
                                f"{TIMEOUTS[self.phase.name]} steps (seed {state.seed}, step {state.step_count})")
        if waypoint is None:
            dpos = (0.0, 0.0, 0.0)
        else:
            m = self.config.max_step
            dpos = tuple(float(np.clip(w - e, -m, m)) for w, e in zip(waypoint, state.ee))
        return Action(dpos, (0.0, 0.0, 0.0), gripper)


def expert_action(state: WorldState, expert: ScriptedExpert) -> Action:
    """Functional form of ``expert.act``."""
    return expert.act(state)


def phase_names(task: str) -> List[str]:
    return list(PHASES[task])
