#!/usr/bin/env python3
"""Tests for the trajectory codec."""

import numpy as np
import pytest

from maskplan.codec import MASK_ID, COMMAND_IDS, HEADING, SPATIAL, TrajectoryCodec, wrap_degrees
from maskplan.config import CodecConfig
from maskplan.models import CodecError, MaskedTokenError, Trajectory, Waypoint


def test_default_layout():
    codec = TrajectoryCodec()
    assert codec.vocab_size == 6 + 4000 + 1800
    assert codec.response_len == 24
    assert codec.spatial_offset == 6
    assert codec.heading_offset == 4006
    assert COMMAND_IDS == {"straight": 3, "left": 4, "right": 5}


def test_zero_maps_to_center_bins():
    codec = TrajectoryCodec()
    assert codec.encode_coord(0.0, SPATIAL) == 2000
    assert codec.encode_coord(0.0, HEADING) == 900
    assert codec.encode_coord(0.05, SPATIAL) == 2001
    assert codec.encode_coord(-0.05, SPATIAL) == 1999


def test_out_of_range_values_clamp_to_edge_bins():
    codec = TrajectoryCodec()
    traj = Trajectory([Waypoint(150.0, -150.0, 0.0)] * 8)
    tokens = codec.encode_trajectory(traj)
    assert tokens[0] == codec.spatial_offset + 3999
    assert tokens[1] == codec.spatial_offset + 0


def test_heading_wraps_before_clamping():
    codec = TrajectoryCodec()
    assert wrap_degrees(270.0) == pytest.approx(-90.0)
    assert wrap_degrees(-180.0) == pytest.approx(180.0)
    assert codec.clamp_to_range(270.0, HEADING) == pytest.approx(-90.0)
    assert codec.clamp_to_range(135.0, HEADING) == pytest.approx(90.0)


def test_round_trip_error_within_half_resolution():
    codec = TrajectoryCodec()
    rng = np.random.default_rng(7)
    cfg = codec.config
    for _ in range(10_000 // 8):
        values = np.column_stack([
            rng.uniform(cfg.spatial_min, cfg.spatial_max, 8),
            rng.uniform(cfg.spatial_min, cfg.spatial_max, 8),
            rng.uniform(cfg.heading_min, cfg.heading_max, 8),
        ])
        decoded = codec.decode_trajectory(codec.encode_trajectory(Trajectory.from_array(values))).as_array()
        err = np.abs(decoded - values)
        assert np.all(err[:, :2] <= cfg.spatial_resolution / 2 + 1e-9)
        assert np.all(err[:, 2] <= cfg.heading_resolution / 2 + 1e-9)


def test_decode_rejects_mask_with_position():
    codec = TrajectoryCodec()
    tokens = codec.encode_trajectory(Trajectory([Waypoint(1.0, 0.0, 0.0)] * 8))
    tokens[4] = MASK_ID
    with pytest.raises(MaskedTokenError) as info:
        codec.decode_trajectory(tokens)
    assert info.value.position == 4


def test_decode_rejects_wrong_sub_vocabulary():
    codec = TrajectoryCodec()
    tokens = codec.encode_trajectory(Trajectory([Waypoint(1.0, 0.0, 0.0)] * 8))
    tokens[2] = codec.spatial_offset + 10  # heading slot
    with pytest.raises(CodecError) as info:
        codec.decode_trajectory(tokens)
    assert info.value.position == 2


def test_encode_rejects_non_finite_and_wrong_length():
    codec = TrajectoryCodec()
    with pytest.raises(CodecError):
        codec.encode_trajectory(Trajectory([Waypoint(float("nan"), 0.0, 0.0)] * 8))
    with pytest.raises(CodecError):
        codec.encode_trajectory(Trajectory([Waypoint(0.0, 0.0, 0.0)] * 3))
    with pytest.raises(CodecError):
        codec.decode_trajectory([codec.spatial_offset] * 5)


def test_random_token_respects_position_range():
    codec = TrajectoryCodec(CodecConfig(spatial_bins=10, heading_bins=6, waypoints=2))
    rng = np.random.default_rng(0)
    for position in range(codec.response_len):
        lo, hi = codec.position_range(position)
        assert all(lo <= codec.random_token(position, rng) < hi for _ in range(50))
    ranges = codec.position_ranges()
    assert ranges.shape == (6, 2)
    assert tuple(ranges[2]) == (16, 22)


def test_invalid_config_rejected():
    from maskplan.models import ConfigError
    with pytest.raises(ConfigError):
        TrajectoryCodec(CodecConfig(spatial_min=1.0, spatial_max=1.0))
    with pytest.raises(CodecError):
        TrajectoryCodec().command_token("reverse")
