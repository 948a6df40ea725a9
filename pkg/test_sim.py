#!/usr/bin/env python3
"""Tests for the micro simulator: scorer, lattice expert, scene generation and rasterization."""

import numpy as np
import pytest

from conftest import straight_scene
from maskplan.codec import BOS_ID, MASK_ID, SEP_ID
from maskplan.config import SimConfig
from maskplan.models import InfeasibleSceneError, Obstacle, SimulationError, Trajectory, Waypoint
from maskplan.sim import (PROFILES, expert_plan, generate_scene, lattice_members, load_scenes, rasterize,
                          save_scenes, scene_context, score)


def _straight(speed=8.0, waypoints=8, dt=0.5, y=0.0):
    return Trajectory([Waypoint(speed * dt * (k + 1), y, 0.0) for k in range(waypoints)], dt=dt)


def test_expert_scores_full_marks_on_easy_scenes():
    cfg = SimConfig()
    for seed in range(3):
        scene = generate_scene(seed, "easy", cfg)
        b = score(scene, expert_plan(scene, cfg), cfg)
        assert (b.nc, b.dac, b.ttc, b.comfort) == (1.0, 1.0, 1.0, 1.0)
        assert b.pdms >= cfg.easy_expert_threshold


def test_straight_drive_on_empty_road():
    scene = straight_scene()
    b = score(scene, _straight(), reference_progress=32.0)
    assert (b.nc, b.dac, b.ttc, b.comfort, b.ep) == (1.0, 1.0, 1.0, 1.0, 1.0)
    assert b.pdms == pytest.approx(1.0)


def test_collision_zeroes_the_score():
    scene = straight_scene(obstacles=[(20.0, 0.0, 0.0)])
    b = score(scene, _straight(), reference_progress=32.0)
    assert b.nc == 0.0
    assert b.pdms == 0.0


def test_short_time_to_collision_without_contact():
    scene = straight_scene(obstacles=[(38.0, 0.0, 0.0)])
    b = score(scene, _straight(), reference_progress=32.0)
    assert b.nc == 1.0
    assert b.ttc == 0.0
    assert b.pdms == pytest.approx((2.0 + 5.0) / 12.0)


def test_leaving_the_corridor():
    scene = straight_scene()
    assert score(scene, _straight(y=10.0), reference_progress=32.0).dac == 0.0
    partly = Trajectory([Waypoint(4.0 * (k + 1), 3.8 if k == 7 else 0.0, 0.0) for k in range(8)])
    assert score(scene, partly, reference_progress=32.0).dac == pytest.approx(7.0 / 8.0)


def test_harsh_acceleration_breaks_comfort():
    scene = straight_scene()
    xs = [4.0, 8.0, 12.0, 16.0, 26.0, 36.0, 46.0, 56.0]
    b = score(scene, Trajectory([Waypoint(x, 0.0, 0.0) for x in xs]), reference_progress=32.0)
    assert b.comfort == 0.0
    assert b.ep == 1.0


def test_standing_still_is_bounded_by_comfort_weight():
    scene = straight_scene()
    still = Trajectory([Waypoint(0.0, 0.0, 0.0)] * 8)
    b = score(scene, still, reference_progress=32.0)
    assert b.ttc == 0.0 and b.ep == 0.0
    assert b.pdms <= 2.0 / 12.0 + 1e-12


def test_malformed_inputs_never_raise():
    scene = straight_scene()
    assert score(scene, None).malformed
    assert score(scene, _straight(waypoints=3)).malformed
    assert score(scene, Trajectory([Waypoint(float("nan"), 0.0, 0.0)] * 8)).malformed
    assert score(scene, _straight(waypoints=3)).pdms == 0.0


def test_expert_dominates_every_lattice_member():
    cfg = SimConfig(lateral_samples=3, speed_profiles=(0.0, 1.0))
    scene = straight_scene(obstacles=[(12.0, 3.0, 0.0)], horizon=1.5)
    expert = score(scene, expert_plan(scene, cfg), cfg).pdms
    members = list(lattice_members(scene, cfg))
    assert len(members) == 2 * 3 ** 3
    assert all(expert >= score(scene, m, cfg).pdms for m in members)


def test_expert_avoids_an_obstacle_in_lane():
    scene = straight_scene(obstacles=[(20.0, 0.0, 0.0)])
    b = score(scene, expert_plan(scene))
    assert b.nc == 1.0 and b.dac == 1.0


def test_blocked_road_is_infeasible():
    scene = straight_scene(obstacles=[(14.0, y, 0.0) for y in (-3.0, -1.0, 1.0, 3.0)], ego_speed=10.0)
    with pytest.raises(InfeasibleSceneError):
        expert_plan(scene, SimConfig(speed_profiles=(0.0,)))


def test_scene_generation_is_deterministic_and_follows_profiles():
    cfg = SimConfig()
    for difficulty in ("easy", "medium", "hard"):
        a = generate_scene(5, difficulty, cfg)
        b = generate_scene(5, difficulty, cfg)
        assert a.to_dict() == b.to_dict()
        lo, hi = PROFILES[difficulty].obstacles
        assert len(a.obstacles) <= hi
        assert a.reference_progress is not None and a.reference_progress > 0
    easy = generate_scene(5, "easy", cfg)
    assert all(o.is_static for o in easy.obstacles)
    with pytest.raises(SimulationError):
        generate_scene(5, "extreme", cfg)


def test_rasterize_is_ego_aligned():
    cfg = SimConfig(raster_size=16, raster_resolution=1.0)
    scene = straight_scene(obstacles=[(6.0, 3.0, 0.0)])
    grid, command = rasterize(scene, cfg)
    assert grid.shape == (4, 16, 16)
    assert command == 3
    occupied = grid[1]
    assert occupied[:8, :8].sum() > 0
    assert occupied[8:, :].sum() == 0 and occupied[:, 8:].sum() == 0
    assert grid[0][8, 8] == 1.0 and grid[0][0, 0] == 0.0
    assert np.all(grid[3] == pytest.approx(8.0 / cfg.v_max))
    np.testing.assert_array_equal(grid[2], grid[1])


def test_rasterize_moves_obstacles_to_the_horizon_midpoint():
    cfg = SimConfig(raster_size=16, raster_resolution=1.0)
    scene = straight_scene(obstacles=[(0.0, 5.0, 2.0)])
    grid, _ = rasterize(scene, cfg)
    rows_now = np.flatnonzero(grid[1].any(axis=1))
    rows_later = np.flatnonzero(grid[2].any(axis=1))
    assert rows_later.mean() < rows_now.mean()


def test_scene_context_layout(codec):
    cfg = SimConfig(raster_size=16)
    seq = scene_context(straight_scene(), codec, cfg)
    assert seq.context == [BOS_ID, 3, SEP_ID]
    assert np.all(seq.response == MASK_ID)
    assert seq.grid.shape == (4, 16, 16)


def test_scene_files_round_trip(tmp_path):
    path = str(tmp_path / "scenes.jsonl")
    scenes = [straight_scene(obstacles=[(20.0, 1.0, 0.5)]), straight_scene()]
    assert save_scenes(path, scenes) == 2
    loaded = load_scenes(path)
    assert [s.to_dict() for s in loaded] == [s.to_dict() for s in scenes]
    assert isinstance(loaded[0].obstacles[0], Obstacle)
    with pytest.raises(SimulationError):
        save_scenes(path, scenes)
    save_scenes(path, scenes[:1], force=True)
    assert len(load_scenes(path)) == 1


def test_bad_scene_line_is_named(tmp_path):
    path = tmp_path / "bad.jsonl"
    save_scenes(str(path), [straight_scene()])
    with open(path, "a", encoding="utf-8") as f:
        f.write("{not json\n")
    with pytest.raises(SimulationError) as info:
        load_scenes(str(path))
    assert ":2:" in info.value.message
