"""
Micro driving simulator: procedural scenes, a lattice expert and a PDMS-like scorer.

Scenes are generated in the ego frame (ego at the origin, heading along +x,
+y to the left). Trajectories are always expressed in the ego frame; the
scorer maps them into the scene frame before any geometric check.
"""

import itertools
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import shapely
from shapely.geometry import LineString, Point, Polygon

from .codec import BOS_ID, COMMAND_IDS, MASK_ID, SEP_ID, TrajectoryCodec
from .config import SimConfig
from .models import (InfeasibleSceneError, Obstacle, RewardBreakdown, Scene, SimulationError,
                     TokenSequence, Trajectory, Waypoint)

logger = logging.getLogger(__name__)

SCENE_SCHEMA = 1
DIFFICULTIES = ("easy", "medium", "hard")
OBSTACLE_LENGTH = 4.5
OBSTACLE_WIDTH = 2.0


@dataclass(frozen=True)
class DifficultyProfile:
    """Knobs a difficulty level turns when a scene is generated."""
    obstacles: Tuple[int, int]
    max_curvature: float
    arc_range: Tuple[float, float]
    lateral_range: Tuple[float, float]
    moving_fraction: float
    obstacle_speed: Tuple[float, float]
    ego_speed: Tuple[float, float]


PROFILES = {
    "easy": DifficultyProfile((1, 2), 0.004, (25.0, 55.0), (2.2, 3.0), 0.0, (0.0, 0.0), (6.0, 9.0)),
    "medium": DifficultyProfile((3, 4), 0.010, (18.0, 55.0), (1.0, 3.0), 0.3, (2.0, 6.0), (6.0, 11.0)),
    "hard": DifficultyProfile((5, 6), 0.018, (15.0, 60.0), (0.0, 2.8), 0.5, (2.0, 6.0), (7.0, 12.0)),
}


# --- geometry helpers --------------------------------------------------------

def box_polygon(x: float, y: float, heading: float, length: float, width: float) -> Polygon:
    """Oriented rectangle centered at (x, y); heading in radians."""
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = length / 2.0, width / 2.0
    return Polygon([(x + c * dx - s * dy, y + s * dx + c * dy)
                    for dx, dy in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))])


def wrap_radians(angle):
    return (np.asarray(angle) + np.pi) % (2.0 * np.pi) - np.pi


def obstacle_polygon(obstacle: Obstacle, t: float) -> Polygon:
    x, y = obstacle.position_at(t)
    return box_polygon(x, y, obstacle.heading, obstacle.length, obstacle.width)


class CenterlineFrame:
    """Arc-length parameterization of a polyline centerline."""

    def __init__(self, centerline: Sequence[Tuple[float, float]]):
        pts = np.asarray(centerline, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise SimulationError("Centerline needs at least two points")
        self.points = pts
        seg = np.diff(pts, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.seg_theta = np.arctan2(seg[:, 1], seg[:, 0])
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.line = LineString(pts)

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def _segment(self, s: np.ndarray) -> np.ndarray:
        return np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.seg_len) - 1)

    def theta(self, s) -> np.ndarray:
        return self.seg_theta[self._segment(np.asarray(s, dtype=np.float64))]

    def to_xy(self, s, d) -> np.ndarray:
        """Frenet (arc, left offset) -> cartesian, broadcasting s against d."""
        s = np.asarray(s, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        idx = self._segment(s)
        along = s - self.cum[idx]
        theta = self.seg_theta[idx]
        bx = self.points[idx, 0] + along * np.cos(theta)
        by = self.points[idx, 1] + along * np.sin(theta)
        return np.stack([bx - d * np.sin(theta), by + d * np.cos(theta)], axis=-1)

    def project(self, x: float, y: float) -> float:
        return float(self.line.project(Point(x, y)))

    def offset(self, x: float, y: float) -> float:
        """Signed lateral offset, positive to the left of the centerline."""
        s = self.project(x, y)
        base = self.to_xy(s, 0.0)
        theta = float(self.theta(s))
        return float(-(x - base[0]) * math.sin(theta) + (y - base[1]) * math.cos(theta))


def _ego_to_scene(scene: Scene, xy: np.ndarray) -> np.ndarray:
    c, s = math.cos(scene.ego_heading), math.sin(scene.ego_heading)
    x, y = xy[..., 0], xy[..., 1]
    return np.stack([scene.ego_x + c * x - s * y, scene.ego_y + s * x + c * y], axis=-1)


def _scene_to_ego(scene: Scene, xy: np.ndarray) -> np.ndarray:
    c, s = math.cos(scene.ego_heading), math.sin(scene.ego_heading)
    x, y = xy[..., 0] - scene.ego_x, xy[..., 1] - scene.ego_y
    return np.stack([c * x + s * y, -s * x + c * y], axis=-1)


def ego_hits(scene: Scene, cfg: SimConfig, centers: np.ndarray, headings: np.ndarray,
             times: np.ndarray) -> np.ndarray:
    """For each ego placement (scene frame), whether its box intersects any obstacle at that time."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    headings = np.asarray(headings, dtype=np.float64).reshape(-1)
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    hits = np.zeros(centers.shape[0], dtype=bool)
    if not scene.obstacles or centers.shape[0] == 0:
        return hits
    ego_radius = 0.5 * math.hypot(cfg.ego_length, cfg.ego_width)
    for obstacle in scene.obstacles:
        ox = obstacle.x + obstacle.vx * times
        oy = obstacle.y + obstacle.vy * times
        reach = ego_radius + 0.5 * math.hypot(obstacle.length, obstacle.width)
        near = np.flatnonzero(~hits & (np.hypot(centers[:, 0] - ox, centers[:, 1] - oy) <= reach))
        for i in near:
            ego = box_polygon(centers[i, 0], centers[i, 1], headings[i], cfg.ego_length, cfg.ego_width)
            other = box_polygon(ox[i], oy[i], obstacle.heading, obstacle.length, obstacle.width)
            if ego.intersects(other):
                hits[i] = True
    return hits


def ttc_violations(scene: Scene, cfg: SimConfig, centers: np.ndarray, headings: np.ndarray,
                   speeds: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Project each placement along its heading for up to ttc_threshold seconds and test for contact."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    n = centers.shape[0]
    headings = np.asarray(headings, dtype=np.float64).reshape(-1)
    speeds = np.asarray(speeds, dtype=np.float64).reshape(-1)
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    steps = int(round(cfg.ttc_threshold / cfg.ttc_step))
    if n == 0 or steps < 1 or not scene.obstacles:
        return np.zeros(n, dtype=bool)
    lookahead = cfg.ttc_step * np.arange(1, steps + 1)
    travel = speeds[:, None] * lookahead[None, :]
    px = centers[:, 0:1] + travel * np.cos(headings)[:, None]
    py = centers[:, 1:2] + travel * np.sin(headings)[:, None]
    hits = ego_hits(scene, cfg, np.stack([px.ravel(), py.ravel()], axis=-1),
                    np.repeat(headings, steps), (times[:, None] + lookahead[None, :]).ravel())
    return hits.reshape(n, steps).any(axis=1)


# --- scorer ------------------------------------------------------------------

def _malformed() -> RewardBreakdown:
    return RewardBreakdown(malformed=True)


def expected_waypoints(scene: Scene, dt: float) -> int:
    return int(round(scene.horizon / dt))


def _kinematics(xy: np.ndarray, dt: float) -> np.ndarray:
    """Per-waypoint speed from finite differences between waypoints; waypoint 0 reuses waypoint 1's."""
    if xy.shape[0] < 2:
        return np.zeros(xy.shape[0])
    step = np.hypot(*np.diff(xy, axis=0).T) / dt
    return np.concatenate([[step[0]], step])


def arc_progress(scene: Scene, trajectory: Trajectory, frame: Optional[CenterlineFrame] = None) -> float:
    """Centerline arc length gained between the ego position and the last waypoint."""
    frame = frame or CenterlineFrame(scene.centerline)
    last = _ego_to_scene(scene, trajectory.as_array()[-1, :2])
    return frame.project(float(last[0]), float(last[1])) - frame.project(scene.ego_x, scene.ego_y)


def score(scene: Scene, trajectory: Optional[Trajectory], cfg: Optional[SimConfig] = None,
          reference_progress: Optional[float] = None) -> RewardBreakdown:
    """Score an ego-frame trajectory; never raises on malformed input."""
    cfg = cfg or SimConfig()
    if trajectory is None or len(trajectory) == 0 or trajectory.dt <= 0:
        return _malformed()
    if len(trajectory) != expected_waypoints(scene, trajectory.dt):
        return _malformed()
    values = trajectory.as_array()
    if not np.all(np.isfinite(values)):
        return _malformed()

    dt = trajectory.dt
    frame = CenterlineFrame(scene.centerline)
    xy = _ego_to_scene(scene, values[:, :2])
    headings = np.radians(values[:, 2]) + scene.ego_heading
    times = dt * np.arange(1, len(trajectory) + 1)

    nc = 0.0 if ego_hits(scene, cfg, xy, headings, times).any() else 1.0

    distances = np.array([frame.line.distance(Point(x, y)) for x, y in xy])
    if np.any(distances - scene.half_width > cfg.dac_exit_tolerance):
        dac = 0.0
    else:
        dac = float(np.mean(distances <= scene.half_width))

    progress = arc_progress(scene, trajectory, frame)
    speeds = _kinematics(xy, dt)
    stalled = progress < cfg.min_progress
    ttc = 0.0 if stalled or ttc_violations(scene, cfg, xy, headings, speeds, times).any() else 1.0

    accel = np.abs(np.diff(speeds[1:])) / dt if len(speeds) > 2 else np.zeros(0)
    yaw_rate = np.abs(wrap_radians(np.diff(headings))) / dt if len(headings) > 1 else np.zeros(0)
    comfortable = (accel.size == 0 or accel.max() <= cfg.max_accel + 1e-9) and \
                  (yaw_rate.size == 0 or yaw_rate.max() <= cfg.max_yaw_rate + 1e-9)
    comfort = 1.0 if comfortable else 0.0

    if reference_progress is None:
        reference_progress = scene.reference_progress
    if reference_progress is None:
        reference_progress = arc_progress(scene, expert_plan(scene, cfg, dt=dt), frame)
    if reference_progress <= 1e-9:
        ep = 1.0 if progress >= 0.0 else 0.0
    else:
        ep = float(np.clip(progress / reference_progress, 0.0, 1.0))

    weights = cfg.w_ttc + cfg.w_comfort + cfg.w_ep
    pdms = nc * dac * (cfg.w_ttc * ttc + cfg.w_comfort * comfort + cfg.w_ep * ep) / weights
    return RewardBreakdown(nc=nc, dac=dac, ttc=ttc, comfort=comfort, ep=ep, pdms=float(pdms))


# --- lattice expert ----------------------------------------------------------

@dataclass
class _ProfileLattice:
    accel: float
    speeds: np.ndarray   # (H,) nominal speed per stage
    points: np.ndarray   # (H, n, 2) scene-frame lattice nodes
    theta: np.ndarray    # (H,) corridor tangent per stage


def lattice_offsets(scene: Scene, cfg: SimConfig) -> np.ndarray:
    reach = cfg.lattice_margin * scene.half_width
    return np.linspace(-reach, reach, cfg.lateral_samples)


def _profile_lattice(scene: Scene, cfg: SimConfig, frame: CenterlineFrame, accel: float,
                     offsets: np.ndarray, waypoints: int, dt: float) -> _ProfileLattice:
    times = dt * np.arange(1, waypoints + 1)
    speeds = np.clip(scene.ego_speed + accel * times, 0.0, cfg.v_max)
    previous = np.concatenate([[scene.ego_speed], speeds[:-1]])
    arcs = frame.project(scene.ego_x, scene.ego_y) + np.cumsum(0.5 * dt * (previous + speeds))
    points = frame.to_xy(arcs[:, None], offsets[None, :])
    return _ProfileLattice(accel, speeds, points, frame.theta(arcs))


def _segment_headings(start: np.ndarray, end: np.ndarray, fallback: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    delta = end - start
    length = np.hypot(delta[..., 0], delta[..., 1])
    heading = np.where(length > 1e-6, np.arctan2(delta[..., 1], delta[..., 0]), fallback)
    return heading, length


def _solve_profile(scene: Scene, cfg: SimConfig, lattice: _ProfileLattice, offsets: np.ndarray,
                   ego_offset: float, dt: float) -> Optional[Tuple[float, List[int]]]:
    """Min-cost lateral index sequence under hard collision, TTC and comfort constraints."""
    pts, n = lattice.points, offsets.shape[0]
    horizon = pts.shape[0]
    times = dt * np.arange(1, horizon + 1)
    origin = np.array([scene.ego_x, scene.ego_y])
    yaw_limit = cfg.max_yaw_rate * dt + 1e-9
    accel_limit = cfg.max_accel * dt + 1e-9

    # stage 0: segment from the ego position to each node
    h0, len0 = _segment_headings(origin[None, :], pts[0], np.full(n, lattice.theta[0]))
    ok0 = ~ego_hits(scene, cfg, pts[0], h0, np.full(n, times[0]))
    if horizon == 1:
        ok0 &= ~ttc_violations(scene, cfg, pts[0], h0, np.zeros(n), np.full(n, times[0]))
    cost = np.where(ok0, cfg.w_lateral * offsets ** 2
                    + cfg.w_jerk * (offsets - ego_offset) ** 2, np.inf)
    if horizon == 1:
        best = int(np.argmin(cost))
        return (float(cost[best]), [best]) if np.isfinite(cost[best]) else None

    headings, speeds = [h0], [len0 / dt]
    back: List[np.ndarray] = []
    node_cost = cfg.w_lateral * offsets ** 2
    for k in range(1, horizon):
        # pair (j -> i) quantities, shape (n, n)
        start = np.broadcast_to(pts[k - 1][:, None, :], (n, n, 2))
        end = np.broadcast_to(pts[k][None, :, :], (n, n, 2))
        hk, lk = _segment_headings(start, end, np.full((n, n), lattice.theta[k]))
        vk = lk / dt
        flat_end = end.reshape(-1, 2)
        pair_ok = ~ego_hits(scene, cfg, flat_end, hk.ravel(), np.full(n * n, times[k]))
        pair_ok &= ~ttc_violations(scene, cfg, flat_end, hk.ravel(), vk.ravel(), np.full(n * n, times[k]))
        pair_ok = pair_ok.reshape(n, n)
        if k == 1:
            # waypoint 0 borrows the speed of waypoint 1
            flat_start = start.reshape(-1, 2)
            h0_pairs = np.broadcast_to(h0[:, None], (n, n))
            pair_ok &= ~ttc_violations(scene, cfg, flat_start, h0_pairs.ravel(), vk.ravel(),
                                       np.full(n * n, times[0])).reshape(n, n)
            pair_ok &= np.abs(wrap_radians(hk - h0[:, None])) <= yaw_limit
            jerk = (offsets[None, :] - 2.0 * offsets[:, None] + ego_offset) ** 2
            total = cost[:, None] + cfg.w_jerk * jerk + node_cost[None, :]
            cost = np.where(pair_ok, total, np.inf)
            back.append(np.zeros((n, n), dtype=np.int64))
        else:
            # triple (l -> j -> i), shape (n, n, n)
            prev_h, prev_v = headings[-1], speeds[-1]
            triple_ok = (np.abs(wrap_radians(hk[None, :, :] - prev_h[:, :, None])) <= yaw_limit) & \
                        (np.abs(vk[None, :, :] - prev_v[:, :, None]) <= accel_limit) & pair_ok[None, :, :]
            jerk = (offsets[None, None, :] - 2.0 * offsets[None, :, None] + offsets[:, None, None]) ** 2
            total = cost[:, :, None] + cfg.w_jerk * jerk + node_cost[None, None, :]
            total = np.where(triple_ok, total, np.inf)
            arg = np.argmin(total, axis=0)
            cost = np.take_along_axis(total, arg[None, :, :], axis=0)[0]
            back.append(arg)
        headings.append(hk)
        speeds.append(vk)

    if not np.isfinite(cost).any():
        return None
    j, i = np.unravel_index(int(np.argmin(cost)), cost.shape)
    best_cost = float(cost[j, i])
    path = [int(i), int(j)]
    for k in range(horizon - 1, 1, -1):
        l = int(back[k - 1][path[-1], path[-2]])
        path.append(l)
    path.reverse()
    return best_cost, path


def _lattice_trajectory(scene: Scene, lattice: _ProfileLattice, path: Sequence[int], dt: float) -> Trajectory:
    pts = np.array([lattice.points[k, i] for k, i in enumerate(path)])
    starts = np.vstack([[scene.ego_x, scene.ego_y], pts[:-1]])
    headings, _ = _segment_headings(starts, pts, lattice.theta)
    local = _scene_to_ego(scene, pts)
    degrees = np.degrees(wrap_radians(headings - scene.ego_heading))
    return Trajectory([Waypoint(float(x), float(y), float(h)) for (x, y), h in zip(local, degrees)], dt=dt)


def _fully_valid(scene: Scene, cfg: SimConfig, trajectory: Trajectory) -> bool:
    b = score(scene, trajectory, cfg, reference_progress=max(arc_progress(scene, trajectory), 1e-6))
    return not b.malformed and b.nc == 1.0 and b.dac == 1.0 and b.ttc == 1.0 and b.comfort == 1.0


def expert_plan(scene: Scene, cfg: Optional[SimConfig] = None, dt: float = 0.5) -> Trajectory:
    """Minimum-cost lattice trajectory that is collision free, inside the corridor, safe and comfortable."""
    cfg = cfg or SimConfig()
    waypoints = expected_waypoints(scene, dt)
    if waypoints < 1:
        raise SimulationError(f"Scene horizon {scene.horizon}s holds no waypoint at dt={dt}")
    frame = CenterlineFrame(scene.centerline)
    offsets = lattice_offsets(scene, cfg)
    ego_offset = frame.offset(scene.ego_x, scene.ego_y)
    candidates = []
    for accel in cfg.speed_profiles:
        lattice = _profile_lattice(scene, cfg, frame, accel, offsets, waypoints, dt)
        solved = _solve_profile(scene, cfg, lattice, offsets, ego_offset, dt)
        if solved is None:
            continue
        cost, path = solved
        cost += cfg.w_speed * float(np.mean((lattice.speeds - scene.reference_speed) ** 2))
        candidates.append((cost, accel, lattice, path))
    for cost, accel, lattice, path in sorted(candidates, key=lambda c: (c[0], c[1])):
        trajectory = _lattice_trajectory(scene, lattice, path, dt)
        if _fully_valid(scene, cfg, trajectory):
            logger.debug("Expert plan for scene %d: accel %.1f, cost %.3f", scene.seed, accel, cost)
            return trajectory
    raise InfeasibleSceneError(f"No feasible lattice trajectory for scene {scene.seed}")


def lattice_members(scene: Scene, cfg: Optional[SimConfig] = None, dt: float = 0.5) -> Iterator[Trajectory]:
    """Every lattice trajectory (all lateral sequences for every speed profile). Exponential in H."""
    cfg = cfg or SimConfig()
    waypoints = expected_waypoints(scene, dt)
    frame = CenterlineFrame(scene.centerline)
    offsets = lattice_offsets(scene, cfg)
    for accel in cfg.speed_profiles:
        lattice = _profile_lattice(scene, cfg, frame, accel, offsets, waypoints, dt)
        for path in itertools.product(range(offsets.shape[0]), repeat=waypoints):
            yield _lattice_trajectory(scene, lattice, path, dt)


# --- scene generation --------------------------------------------------------

def _centerline(curvature: float, start: float = -10.0, stop: float = 90.0, spacing: float = 2.0):
    s = np.arange(start, stop + spacing / 2.0, spacing)
    if abs(curvature) < 1e-9:
        return [(float(v), 0.0) for v in s]
    x = np.sin(curvature * s) / curvature
    y = (1.0 - np.cos(curvature * s)) / curvature
    return [(float(a), float(b)) for a, b in zip(x, y)]


def _command(curvature: float) -> str:
    turn = curvature * 60.0
    if turn > 0.15:
        return "left"
    if turn < -0.15:
        return "right"
    return "straight"


def _draw_scene(seed: int, difficulty: str, rng: np.random.Generator, horizon: float) -> Scene:
    profile = PROFILES[difficulty]
    curvature = float(rng.uniform(-profile.max_curvature, profile.max_curvature))
    centerline = _centerline(curvature)
    frame = CenterlineFrame(centerline)
    half_width = float(rng.uniform(3.0, 4.0))
    ego_speed = float(rng.uniform(*profile.ego_speed))
    reference_speed = float(np.clip(ego_speed + rng.uniform(-1.0, 2.0), 1.0, 15.0))

    count = int(rng.integers(profile.obstacles[0], profile.obstacles[1] + 1))
    obstacles: List[Obstacle] = []
    placed: List[Polygon] = []
    tries = 0
    while len(obstacles) < count and tries < 50 * count:
        tries += 1
        arc = float(rng.uniform(*profile.arc_range))
        lateral = float(rng.uniform(*profile.lateral_range)) * (1.0 if rng.random() < 0.5 else -1.0)
        x, y = frame.to_xy(arc + frame.project(0.0, 0.0), lateral)
        heading = float(frame.theta(arc + frame.project(0.0, 0.0)))
        speed = 0.0
        if rng.random() < profile.moving_fraction:
            speed = float(rng.uniform(*profile.obstacle_speed))
        footprint = box_polygon(x, y, heading, OBSTACLE_LENGTH, OBSTACLE_WIDTH).buffer(1.0)
        if any(footprint.intersects(other) for other in placed):
            continue
        placed.append(footprint)
        obstacles.append(Obstacle(x=float(x), y=float(y), heading=heading, length=OBSTACLE_LENGTH,
                                  width=OBSTACLE_WIDTH, vx=speed * math.cos(heading),
                                  vy=speed * math.sin(heading)))

    return Scene(seed=seed, difficulty=difficulty, centerline=centerline, half_width=half_width,
                 ego_x=0.0, ego_y=0.0, ego_heading=0.0, ego_speed=ego_speed,
                 reference_speed=reference_speed, obstacles=obstacles,
                 command=_command(curvature), horizon=horizon)


def generate_scene(seed: int, difficulty: str = "easy", cfg: Optional[SimConfig] = None,
                   horizon: float = 4.0, dt: float = 0.5) -> Scene:
    """Deterministic in (seed, difficulty); regenerates until the expert finds a feasible plan."""
    cfg = cfg or SimConfig()
    if difficulty not in PROFILES:
        raise SimulationError(f"Unknown difficulty: {difficulty}")
    for attempt in range(cfg.max_attempts):
        rng = np.random.default_rng([seed, attempt])
        scene = _draw_scene(seed, difficulty, rng, horizon)
        try:
            expert = expert_plan(scene, cfg, dt=dt)
        except InfeasibleSceneError:
            logger.debug("Scene %d attempt %d infeasible, regenerating", seed, attempt)
            continue
        scene.reference_progress = arc_progress(scene, expert)
        return scene
    raise SimulationError(f"No feasible {difficulty} scene for seed {seed} after {cfg.max_attempts} attempts")


# --- rasterization -----------------------------------------------------------

def rasterize(scene: Scene, cfg: Optional[SimConfig] = None) -> Tuple[np.ndarray, int]:
    """
    Ego-centered, heading-aligned occupancy grid plus the command token id.

    Channels: drivable area, obstacles now, obstacles at the horizon
    midpoint, ego-speed plane. Row 0 is the forward edge; column 0 is the
    left edge, so anything left of the ego lands in the left half.
    """
    cfg = cfg or SimConfig()
    size, res = cfg.raster_size, cfg.raster_resolution
    centers = (size / 2.0 - np.arange(size) - 0.5) * res
    local_x, local_y = np.meshgrid(centers, centers, indexing="ij")
    world = _ego_to_scene(scene, np.stack([local_x, local_y], axis=-1))
    wx, wy = world[..., 0], world[..., 1]

    grid = np.zeros((4, size, size), dtype=np.float64)
    corridor = LineString(scene.centerline).buffer(scene.half_width)
    grid[0] = shapely.contains_xy(corridor, wx, wy)
    for channel, t in ((1, 0.0), (2, scene.horizon / 2.0)):
        for obstacle in scene.obstacles:
            grid[channel] = np.maximum(grid[channel], shapely.contains_xy(obstacle_polygon(obstacle, t), wx, wy))
    grid[3] = min(max(scene.ego_speed / cfg.v_max, 0.0), 1.0)
    return grid, COMMAND_IDS[scene.command]


def scene_context(scene: Scene, codec: TrajectoryCodec, cfg: Optional[SimConfig] = None) -> TokenSequence:
    """Model input for a scene: [BOS, command, SEP] + raster, response fully masked."""
    grid, command = rasterize(scene, cfg)
    return TokenSequence(context=[BOS_ID, command, SEP_ID],
                         response=np.full(codec.response_len, MASK_ID, dtype=np.int64), grid=grid)


# --- scene files -------------------------------------------------------------

def save_scenes(path: str, scenes: Iterable[Scene], force: bool = False) -> int:
    """Write one JSON object per line; refuses to overwrite unless forced."""
    if os.path.exists(path) and not force:
        raise SimulationError(f"{path} already exists (use --force to overwrite)")
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for scene in scenes:
            record = {"schema": SCENE_SCHEMA, **scene.to_dict()}
            f.write(json.dumps(record, sort_keys=True) + "\n")
            count += 1
    return count


def load_scenes(path: str) -> List[Scene]:
    scenes = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    raise SimulationError(f"{path}:{line_no}: invalid JSON ({e.msg})")
                if record.get("schema") != SCENE_SCHEMA:
                    raise SimulationError(f"{path}:{line_no}: unsupported scene schema {record.get('schema')!r}")
                try:
                    scenes.append(Scene.from_dict(record))
                except (TypeError, KeyError) as e:
                    raise SimulationError(f"{path}:{line_no}: malformed scene ({e})")
    except OSError as e:
        raise SimulationError(f"Cannot read scene file {path}: {e}")
    return scenes
