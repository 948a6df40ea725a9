"""
Data models shared across the planner, simulator and pipeline.
"""

from dataclasses import dataclass, asdict, field
from typing import Optional, Dict, Any, List, Tuple

import numpy as np


@dataclass
class Waypoint:
    """One trajectory sample in the ego frame."""
    x: float  # meters, forward
    y: float  # meters, left
    heading: float  # degrees

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.x, self.y, self.heading)


@dataclass
class Trajectory:
    """H waypoints spaced dt seconds apart, ego frame."""
    waypoints: List[Waypoint]
    dt: float = 0.5

    def __len__(self) -> int:
        return len(self.waypoints)

    def as_array(self) -> np.ndarray:
        """Return an (H, 3) array of x, y, heading."""
        return np.array([w.as_tuple() for w in self.waypoints], dtype=np.float64).reshape(-1, 3)

    @classmethod
    def from_array(cls, values, dt: float = 0.5) -> "Trajectory":
        arr = np.asarray(values, dtype=np.float64).reshape(-1, 3)
        return cls([Waypoint(float(x), float(y), float(h)) for x, y, h in arr], dt=dt)

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON export."""
        return asdict(self)


@dataclass
class TokenSequence:
    """
    Context prefix plus the fixed-length trajectory response region.

    The context holds special/command token ids; the rasterized scene grid
    travels alongside and is embedded by the model's patch projection.
    """
    context: List[int]
    response: np.ndarray
    grid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.response = np.asarray(self.response, dtype=np.int64).copy()

    @property
    def mask_flags(self) -> np.ndarray:
        from .codec import MASK_ID
        return self.response == MASK_ID

    def with_response(self, response) -> "TokenSequence":
        return TokenSequence(context=list(self.context), response=response, grid=self.grid)


@dataclass
class Obstacle:
    """Oriented box, static when vx == vy == 0."""
    x: float
    y: float
    heading: float  # radians
    length: float
    width: float
    vx: float = 0.0
    vy: float = 0.0

    @property
    def is_static(self) -> bool:
        return self.vx == 0.0 and self.vy == 0.0

    def position_at(self, t: float) -> Tuple[float, float]:
        return (self.x + self.vx * t, self.y + self.vy * t)


@dataclass
class Scene:
    """Procedural driving scene: corridor, ego state, obstacles, route command."""
    seed: int
    difficulty: str
    centerline: List[Tuple[float, float]]
    half_width: float
    ego_x: float
    ego_y: float
    ego_heading: float  # radians
    ego_speed: float
    reference_speed: float
    obstacles: List[Obstacle] = field(default_factory=list)
    command: str = "straight"
    horizon: float = 4.0
    reference_progress: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON export."""
        data = asdict(self)
        data["centerline"] = [list(p) for p in self.centerline]
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Scene":
        payload = dict(data)
        payload.pop("schema", None)
        payload["centerline"] = [tuple(p) for p in payload["centerline"]]
        payload["obstacles"] = [Obstacle(**o) for o in payload.get("obstacles", [])]
        return cls(**payload)


@dataclass
class RewardBreakdown:
    """Per-criterion sub-scores and the aggregated PDMS-like scalar."""
    nc: float = 0.0
    dac: float = 0.0
    ttc: float = 0.0
    comfort: float = 0.0
    ep: float = 0.0
    pdms: float = 0.0
    malformed: bool = False

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON export."""
        return asdict(self)


@dataclass
class SceneResult:
    """Evaluation outcome for one scene."""
    seed: int
    difficulty: str
    single: RewardBreakdown
    best_of_k: float
    samples: int

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON export."""
        return asdict(self)


@dataclass
class EvalReport:
    """Container for evaluation results."""
    scenes: List[SceneResult]
    steps: int
    refine: bool
    samples_per_scene: int
    config_hash: str
    seed: int

    def __iter__(self):
        yield from self.scenes

    def mean(self, criterion: str) -> float:
        if not self.scenes:
            return 0.0
        return float(np.mean([getattr(s.single, criterion) for s in self.scenes]))

    def mean_best_of_k(self) -> float:
        if not self.scenes:
            return 0.0
        return float(np.mean([s.best_of_k for s in self.scenes]))

    def summary(self) -> Dict[str, Any]:
        return {
            "scenes": len(self.scenes),
            "steps": self.steps,
            "refine": self.refine,
            "samples_per_scene": self.samples_per_scene,
            "nc": self.mean("nc"),
            "dac": self.mean("dac"),
            "ttc": self.mean("ttc"),
            "comfort": self.mean("comfort"),
            "ep": self.mean("ep"),
            "pdms": self.mean("pdms"),
            "best_of_k": self.mean_best_of_k(),
        }

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON export."""
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "summary": self.summary(),
            "scenes": [s.to_dict() for s in self.scenes],
        }


@dataclass
class RepairCase:
    """One expert sequence with a single outlier token, before and after refinement."""
    seed: int
    position: int
    clean: float
    corrupted: float
    refined: float


@dataclass
class RepairReport:
    """How well the refinement expert undoes single-token corruptions."""
    cases: List[RepairCase]
    config_hash: str
    seed: int

    def __iter__(self):
        yield from self.cases

    def _mean(self, attr: str) -> float:
        if not self.cases:
            return 0.0
        return float(np.mean([getattr(c, attr) for c in self.cases]))

    @property
    def failing(self) -> int:
        """Corruptions that drop the score to zero."""
        return sum(1 for c in self.cases if c.corrupted == 0.0)

    @property
    def restored(self) -> int:
        return sum(1 for c in self.cases if c.corrupted == 0.0 and c.refined > 0.0)

    @property
    def restored_share(self) -> Optional[float]:
        return self.restored / self.failing if self.failing else None

    def summary(self) -> Dict[str, Any]:
        return {
            "cases": len(self.cases),
            "clean": self._mean("clean"),
            "corrupted": self._mean("corrupted"),
            "refined": self._mean("refined"),
            "failing": self.failing,
            "restored": self.restored,
            "restored_share": self.restored_share,
        }

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON export."""
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "summary": self.summary(),
            "cases": [asdict(c) for c in self.cases],
        }


class MaskplanError(Exception):
    """Base exception for every error raised by maskplan."""

    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


class CodecError(MaskplanError):
    """Raised when a value or token cannot be mapped by the trajectory codec."""

    def __init__(self, message: str, position: Optional[int] = None):
        self.position = position
        super().__init__(message)


class MaskedTokenError(CodecError):
    """A response still holds [MASK] tokens where a decoded one is required."""


class EngineError(MaskplanError):
    """Tensor engine misuse: shape mismatch, non-scalar loss, missing gradient."""


class ModelError(MaskplanError):
    """Invalid input or state for the planner model."""


class DiffusionError(MaskplanError):
    """Invalid corruption, schedule or sampler arguments."""


class SimulationError(MaskplanError):
    """Scene generation or planning failure."""


class InfeasibleSceneError(SimulationError):
    """The lattice planner found no collision-free, corridor-compliant path."""


class RftError(MaskplanError):
    """Reinforcement fine-tuning misuse, e.g. advantages from another group."""


class ConfigError(MaskplanError):
    """Unknown or invalid configuration key."""


class CheckpointError(MaskplanError):
    """Unreadable or incompatible checkpoint file."""


class PlotInputError(MaskplanError):
    """Malformed metrics or report input for plotting."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[str] = None):
        self.line = line
        self.column = column
        super().__init__(message)
