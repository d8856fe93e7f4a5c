"""
Unit tests for the MiniShape simulator
"""

from dataclasses import replace

import numpy as np
import pytest

from slotpolicy.errors import ConfigError, SimulationError
from slotpolicy.policy import Action
from slotpolicy.sim import (CUBE_COLOR, NOVEL_SIZE_RANGES, TABLE_COLORS, TASKS, TRAIN_BACKGROUNDS,
                            TRAIN_DISTRACTOR_COLORS, TRAIN_SIZE_RANGES, UNSEEN_BACKGROUNDS,
                            UNSEEN_DISTRACTOR_COLORS, Goal, LevelConfig, MiniShape, SimConfig, advance,
                            color_u8, pixel_of, sample_scene, success)

ZERO = Action((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), -1.0)


def _isolated_cube(env, ee=(0.8, 0.8, 0.2), goal=(0.6, -0.6, 0.0)):
    """Push scene with only the cube, placed at the origin."""
    state, _ = env.reset("push", "none", 0)
    cube = replace(state.cube, pos=(0.0, 0.0))
    state.objects = [cube]
    state.ee = ee
    state.goal = Goal("target", goal)
    return state


def _in_ranges(value, ranges):
    return any(lo <= value <= hi for lo, hi in ranges)


class TestReset:
    @pytest.mark.parametrize("task", ["push", "pick", "place"])
    def test_same_seed_same_scene(self, task):
        env = MiniShape(SimConfig(image_size=32))
        s1, img1 = env.reset(task, "none", 11)
        s2, img2 = env.reset(task, "none", 11)
        assert s1.objects == s2.objects
        assert s1.ee == s2.ee
        assert np.array_equal(img1, img2)

    def test_different_seeds_differ(self):
        env = MiniShape()
        assert env.reset("push", "none", 1)[0].objects != env.reset("push", "none", 2)[0].objects

    def test_image_format(self):
        _, img = MiniShape(SimConfig(image_size=16)).reset("pick", "none", 0)
        assert img.shape == (16, 16, 3)
        assert img.dtype == np.uint8

    def test_place_has_bin(self):
        state, _ = MiniShape().reset("place", "none", 5)
        assert state.bin is not None
        assert state.goal.bin_id == state.bin.id

    @pytest.mark.parametrize("seed", range(10))
    def test_l1_draws_unseen_distractor_colors(self, seed):
        state, _ = MiniShape().reset("push", "L1", seed)
        assert state.distractors
        assert all(d.color in UNSEEN_DISTRACTOR_COLORS.values() for d in state.distractors)

    @pytest.mark.parametrize("seed", range(10))
    def test_l2_draws_unseen_background(self, seed):
        state, _ = MiniShape().reset("pick", "L2", seed)
        assert state.background in UNSEEN_BACKGROUNDS.values()

    @pytest.mark.parametrize("seed", range(10))
    def test_l3_sizes_outside_training_range(self, seed):
        state, _ = MiniShape().reset("push", "L3", seed)
        for d in state.distractors:
            assert _in_ranges(d.half_size, NOVEL_SIZE_RANGES)
            assert not _in_ranges(d.half_size, TRAIN_SIZE_RANGES)

    @pytest.mark.slow
    @pytest.mark.parametrize("level", ["none", "L1", "L2", "L3"])
    def test_level_changes_only_its_own_axis(self, level):
        level_config = LevelConfig.for_level(level)
        config = SimConfig()
        distractor_colors = set((UNSEEN_DISTRACTOR_COLORS if level == "L1" else TRAIN_DISTRACTOR_COLORS).values())
        backgrounds = set((UNSEEN_BACKGROUNDS if level == "L2" else TRAIN_BACKGROUNDS).values())
        sizes = NOVEL_SIZE_RANGES if level == "L3" else TRAIN_SIZE_RANGES
        for seed in range(1000):
            state = sample_scene(TASKS[seed % len(TASKS)], level_config, seed, config)
            assert state.background in backgrounds
            assert state.table in TABLE_COLORS.values()
            assert state.cube.color == CUBE_COLOR
            assert 1 <= len(state.distractors) <= 3
            for d in state.distractors:
                assert d.color in distractor_colors
                assert _in_ranges(d.half_size, sizes)

    def test_training_level_sizes(self):
        state, _ = MiniShape().reset("push", "none", 4)
        assert all(_in_ranges(d.half_size, TRAIN_SIZE_RANGES) for d in state.distractors)

    def test_reduced_preset(self):
        env = MiniShape(preset="reduced")
        backgrounds = {env.reset("push", "none", s)[0].background for s in range(5)}
        assert len(backgrounds) == 1
        assert all(len(env.reset("push", "none", s)[0].distractors) == 1 for s in range(5))

    def test_unknown_task_and_level(self):
        env = MiniShape()
        with pytest.raises(ConfigError):
            env.reset("stack", "none", 0)
        with pytest.raises(ConfigError):
            env.reset("push", "L4", 0)
        with pytest.raises(ConfigError):
            LevelConfig.for_level("none", preset="tiny")


class TestDynamics:
    def test_push_moves_cube_along_x(self):
        env = MiniShape(SimConfig(max_step=0.1))
        state = _isolated_cube(env, ee=(0.10, 0.0, 0.03))
        new = advance(state, Action((-0.06, 0.0, 0.0)), env.config)
        assert new.ee[0] == pytest.approx(0.04)
        assert new.cube.pos[0] == pytest.approx(-0.01)
        assert new.cube.pos[1] == 0.0
        assert state.cube.pos == (0.0, 0.0)

    def test_push_at_max_step_keeps_contact(self):
        env = MiniShape()
        state = _isolated_cube(env, ee=(0.08, 0.0, 0.03))
        trace = []
        for _ in range(8):
            state = advance(state, Action((-0.05, 0.0, 0.0)), env.config)
            trace.append((state.ee[0], state.cube.pos[0]))
        for ee_x, cube_x in trace:
            assert ee_x - cube_x == pytest.approx(0.05)
        assert trace[-1][1] == pytest.approx(-0.37)

    def test_push_from_face_onto_center(self):
        env = MiniShape()
        state = _isolated_cube(env, ee=(0.0, -0.05, 0.03))
        for k in range(1, 6):
            state = advance(state, Action((0.0, 0.05, 0.0)), env.config)
            assert state.cube.pos[1] == pytest.approx(0.05 * k)
            assert state.ee[1] == pytest.approx(0.05 * k - 0.05)
        assert state.cube.pos[0] == 0.0

    def test_sliding_along_a_face_does_not_push(self):
        env = MiniShape()
        state = _isolated_cube(env, ee=(0.05, -0.2, 0.03))
        for _ in range(8):
            state = advance(state, Action((0.0, 0.05, 0.0)), env.config)
        assert state.cube.pos == (0.0, 0.0)
        assert state.ee[1] == pytest.approx(0.2)

    def test_no_push_above_contact_height(self):
        env = MiniShape(SimConfig(max_step=0.1))
        state = _isolated_cube(env, ee=(0.10, 0.0, 0.2))
        new = advance(state, Action((-0.06, 0.0, 0.0)), env.config)
        assert new.cube.pos == (0.0, 0.0)

    def test_zero_action_leaves_scene_unchanged(self):
        env = MiniShape()
        state, _ = env.reset("push", "none", 3)
        new, _, _, _ = env.step(state, ZERO)
        assert new.ee == state.ee
        assert new.objects == state.objects
        assert new.step_count == 1

    def test_action_clamped_to_max_step(self):
        env = MiniShape()
        state = _isolated_cube(env, ee=(0.5, 0.5, 0.2))
        new = advance(state, Action((0.3, -0.3, 0.0)), env.config)
        assert new.ee[:2] == pytest.approx((0.55, 0.45))

    def test_grasp_and_carry(self):
        env = MiniShape()
        state = _isolated_cube(env, ee=(0.0, 0.0, 0.02))
        state = advance(state, Action((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), 1.0), env.config)
        assert state.held == state.cube.id
        state = advance(state, Action((0.05, 0.0, 0.05), (0.0, 0.0, 0.0), 1.0), env.config)
        assert state.cube.pos == pytest.approx((0.05, 0.0))
        assert state.cube.z == pytest.approx(0.07)
        state = advance(state, Action((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), -1.0), env.config)
        assert state.held is None
        assert state.cube.z == 0.0

    def test_push_success_uses_target_tolerance(self):
        env = MiniShape()
        state = _isolated_cube(env, goal=(0.04, 0.0, 0.0))
        assert success(state, env.config)
        state.goal = Goal("target", (0.05, 0.0, 0.0))
        assert not success(state, env.config)

    def test_horizon_ends_episode(self):
        env = MiniShape(SimConfig(image_size=8, horizon=3))
        state, _ = env.reset("pick", "none", 0)
        done = False
        for _ in range(3):
            assert not done
            state, _, ok, done = env.step(state, ZERO, render=False)
        assert done and not ok

    def test_step_after_done(self):
        env = MiniShape()
        state, _ = env.reset("push", "none", 0)
        state.done = True
        with pytest.raises(SimulationError, match="finished"):
            env.step(state, ZERO)

    def test_nan_action(self):
        env = MiniShape()
        state, _ = env.reset("push", "none", 0)
        with pytest.raises(SimulationError, match="non-finite"):
            env.step(state, Action((float("nan"), 0.0, 0.0)))


class TestRender:
    def test_cube_center_pixel(self):
        env = MiniShape()
        state = _isolated_cube(env)
        img = env.render(state)
        row, col = pixel_of(state.cube.pos, env.config.image_size)
        assert np.array_equal(img[row, col], color_u8(CUBE_COLOR))

    def test_render_is_pure(self):
        env = MiniShape()
        state, img = env.reset("place", "L2", 8)
        assert np.array_equal(env.render(state), img)

    def test_pixel_of_corners(self):
        assert pixel_of((-1.25, 1.25), 64) == (0, 0)
        assert pixel_of((1.25, -1.25), 64) == (63, 63)


def test_sim_config_validation():
    with pytest.raises(ConfigError, match="max_step"):
        SimConfig(max_step=0.0).validate()
    with pytest.raises(ConfigError, match="grasp_height"):
        SimConfig(grasp_height=0.1, contact_height=0.08).validate()
