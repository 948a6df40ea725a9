"""
Trajectory codec: continuous waypoints <-> discrete tokens.

Vocabulary layout is contiguous::

    [special tokens][spatial bins][heading bins]

Each waypoint emits (x-token, y-token, heading-token), so a response of H
waypoints is 3*H tokens long.
"""

import math
from typing import List, Sequence, Tuple

import numpy as np

from .config import CodecConfig
from .models import CodecError, MaskedTokenError, Trajectory, Waypoint

MASK_ID = 0
BOS_ID = 1
SEP_ID = 2
COMMAND_IDS = {"straight": 3, "left": 4, "right": 5}

SPATIAL = "spatial"
HEADING = "heading"


def wrap_degrees(value: float) -> float:
    """Wrap an angle to (-180, 180]."""
    wrapped = math.fmod(value + 180.0, 360.0)
    if wrapped <= 0.0:
        wrapped += 360.0
    return wrapped - 180.0


class TrajectoryCodec:
    """Uniform binning of ego-frame waypoints into an extended vocabulary."""

    def __init__(self, config: CodecConfig = None):
        self.config = config or CodecConfig()
        self.config.validate()

    @property
    def spatial_offset(self) -> int:
        return self.config.base_vocab_size

    @property
    def heading_offset(self) -> int:
        return self.config.base_vocab_size + self.config.spatial_bins

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def response_len(self) -> int:
        return self.config.response_len

    def _axis(self, axis: str) -> Tuple[float, float, int]:
        cfg = self.config
        if axis == SPATIAL:
            return cfg.spatial_min, cfg.spatial_max, cfg.spatial_bins
        if axis == HEADING:
            return cfg.heading_min, cfg.heading_max, cfg.heading_bins
        raise CodecError(f"Unknown axis: {axis}")

    def clamp_to_range(self, value: float, axis: str) -> float:
        """Clamp into the axis range; headings are wrapped first."""
        lo, hi, _ = self._axis(axis)
        if axis == HEADING and math.isfinite(value):
            value = wrap_degrees(value)
        return min(max(value, lo), hi)

    def encode_coord(self, value: float, axis: str) -> int:
        """Bin index floor((value - min) / resolution), clamped to [0, bins-1]."""
        lo, hi, bins = self._axis(axis)
        if not math.isfinite(value):
            raise CodecError(f"Non-finite {axis} value: {value}")
        # (value - lo) * bins / span keeps the default 0.05/0.1 bin edges exact
        index = math.floor((value - lo) * bins / (hi - lo))
        return min(max(index, 0), bins - 1)

    def decode_bin(self, index: int, axis: str) -> float:
        """Bin center min + (index + 0.5) * resolution."""
        lo, hi, bins = self._axis(axis)
        if not 0 <= index < bins:
            raise CodecError(f"{axis} bin {index} outside [0, {bins})")
        return lo + (index + 0.5) * (hi - lo) / bins

    def position_axis(self, position: int) -> str:
        return HEADING if position % 3 == 2 else SPATIAL

    def position_range(self, position: int) -> Tuple[int, int]:
        """Half-open global id range valid at a response position."""
        if self.position_axis(position) == HEADING:
            return self.heading_offset, self.heading_offset + self.config.heading_bins
        return self.spatial_offset, self.spatial_offset + self.config.spatial_bins

    def position_ranges(self) -> np.ndarray:
        """(L, 2) array of valid id ranges per response position."""
        return np.array([self.position_range(i) for i in range(self.response_len)], dtype=np.int64)

    def encode_trajectory(self, trajectory: Trajectory) -> List[int]:
        if len(trajectory) != self.config.waypoints:
            raise CodecError(
                f"Trajectory has {len(trajectory)} waypoints, expected {self.config.waypoints}")
        tokens: List[int] = []
        for w in trajectory.waypoints:
            for value in (w.x, w.y):
                if not math.isfinite(value):
                    raise CodecError(f"Non-finite spatial value: {value}")
                tokens.append(self.spatial_offset + self.encode_coord(self.clamp_to_range(value, SPATIAL), SPATIAL))
            if not math.isfinite(w.heading):
                raise CodecError(f"Non-finite heading value: {w.heading}")
            tokens.append(self.heading_offset + self.encode_coord(self.clamp_to_range(w.heading, HEADING), HEADING))
        return tokens

    def decode_trajectory(self, tokens: Sequence[int]) -> Trajectory:
        tokens = [int(t) for t in tokens]
        if len(tokens) != self.response_len:
            raise CodecError(f"Response has {len(tokens)} tokens, expected {self.response_len}")
        for position, token in enumerate(tokens):
            if token == MASK_ID:
                raise MaskedTokenError(f"[MASK] remains at position {position}", position=position)
        values = []
        for position, token in enumerate(tokens):
            lo, hi = self.position_range(position)
            if not lo <= token < hi:
                raise CodecError(
                    f"Token {token} at position {position} is outside the {self.position_axis(position)} "
                    f"sub-vocabulary [{lo}, {hi})", position=position)
            values.append(self.decode_bin(token - lo, self.position_axis(position)))
        waypoints = [Waypoint(values[i], values[i + 1], values[i + 2]) for i in range(0, len(values), 3)]
        return Trajectory(waypoints, dt=self.config.dt)

    def random_token(self, position: int, rng: np.random.Generator) -> int:
        """Uniform draw from the sub-vocabulary of a response position."""
        lo, hi = self.position_range(position)
        return int(rng.integers(lo, hi))

    def command_token(self, command: str) -> int:
        if command not in COMMAND_IDS:
            raise CodecError(f"Unknown route command: {command}")
        return COMMAND_IDS[command]
