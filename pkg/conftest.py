"""Shared fixtures: laptop-sized configurations and a couple of generated scenes."""

import numpy as np
import pytest

from maskplan.codec import TrajectoryCodec
from maskplan.config import RunConfig
from maskplan.models import Obstacle, Scene
from maskplan.planner import PlannerModel
from maskplan.rft import TokenScorer
from maskplan.sim import generate_scene


def tiny_config(output_dir: str = "runs") -> RunConfig:
    cfg = RunConfig(output_dir=output_dir)
    cfg.codec.spatial_min, cfg.codec.spatial_max, cfg.codec.spatial_bins = -40.0, 40.0, 320
    cfg.codec.heading_bins = 90
    cfg.codec.waypoints = 4
    cfg.model.d_model = 16
    cfg.model.n_heads = 2
    cfg.model.d_ff = 32
    cfg.model.n_shared_blocks = 1
    cfg.model.n_expert_blocks = 1
    cfg.model.max_context_len = 16
    cfg.model.grid_size = 16
    cfg.model.patch_size = 8
    cfg.sim.raster_size = 16
    cfg.sim.raster_resolution = 2.0
    cfg.sim.lateral_samples = 5
    cfg.diffusion.steps = 4
    cfg.diffusion.tau = 2
    cfg.sft.epochs = 3
    cfg.sft.batch_size = 2
    cfg.sft.warmup_epochs = 1
    cfg.rft.group_size = 3
    cfg.rft.online_samples = 2
    cfg.rft.steps = 4
    cfg.rft.tau = 2
    cfg.rft.batch_size = 2
    cfg.eval.steps_grid = "2,4"
    return cfg.resolve()


def straight_scene(obstacles=(), ego_speed: float = 8.0, horizon: float = 4.0) -> Scene:
    """Straight corridor along +x, ego at the origin."""
    centerline = [(float(x), 0.0) for x in np.arange(-10.0, 92.0, 2.0)]
    return Scene(seed=0, difficulty="easy", centerline=centerline, half_width=3.5, ego_x=0.0, ego_y=0.0,
                 ego_heading=0.0, ego_speed=ego_speed, reference_speed=ego_speed,
                 obstacles=[Obstacle(x=x, y=y, heading=0.0, length=4.5, width=2.0, vx=vx)
                            for x, y, vx in obstacles],
                 command="straight", horizon=horizon)


@pytest.fixture
def cfg(tmp_path):
    return tiny_config(str(tmp_path / "runs"))


@pytest.fixture
def codec(cfg):
    return TrajectoryCodec(cfg.codec)


@pytest.fixture
def scorer(cfg, codec):
    return TokenScorer(codec, cfg.sim)


@pytest.fixture
def model(cfg):
    m = PlannerModel(cfg.model, seed=3)
    m.init_refinement_from_generation()
    return m


@pytest.fixture(scope="session")
def easy_scenes():
    cfg = tiny_config()
    return [generate_scene(seed, "easy", cfg.sim, horizon=2.0, dt=0.5) for seed in (11, 12)]
