"""
maskplan - masked-diffusion trajectory planning
A discrete-diffusion planner whose last transformer blocks are split into a
generation expert and a refinement expert, trained by SFT and then by
group-relative RL inside a small kinematic simulator.
"""

from .codec import TrajectoryCodec
from .config import RunConfig, load_config, save_config
from .models import (
    Waypoint, Trajectory, TokenSequence, Obstacle, Scene,
    RewardBreakdown, SceneResult, EvalReport, RepairReport, MaskplanError
)
from .pipeline import PlannerPipeline
from .planner import ExpertId, PlannerModel

__version__ = "0.1.0"
__all__ = [
    "PlannerPipeline",
    "PlannerModel",
    "ExpertId",
    "TrajectoryCodec",
    "RunConfig",
    "load_config",
    "save_config",
    "Waypoint",
    "Trajectory",
    "TokenSequence",
    "Obstacle",
    "Scene",
    "RewardBreakdown",
    "SceneResult",
    "EvalReport",
    "RepairReport",
    "MaskplanError"
]
