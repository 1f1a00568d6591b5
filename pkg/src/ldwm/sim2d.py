"""Deterministic 2D driving world.

Kinematic bicycle dynamics, procedural routes, ego-centric top-down rasters,
a privileged pure-pursuit expert, steering disturbances and run metrics.
All geometry is float64; rasters are binary float32 so that rendering is
exactly reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BEV_CLASSES = ("off-road", "road", "route", "ego")


@dataclass(frozen=True)
class SimConfig:
    wheelbase: float = 2.5
    max_steer_deg: float = 35.0
    max_accel: float = 3.0
    max_speed: float = 12.0
    target_speed: float = 8.0
    curve_slowdown: float = 4.0  # fractional speed reduction per unit curvature
    initial_speed: float = 8.0
    dt: float = 0.1
    lane_half_width: float = 3.0
    raster_size: int = 32
    resolution: float = 1.0
    route_band: float = 1.0
    nav_length: float = 32.0
    nav_band: float = 0.75
    vehicle_radius: float = 1.0
    vehicle_half_length: float = 2.25
    vehicle_half_width: float = 1.0
    offroad_margin: float = 0.5
    offroad_time: float = 0.5
    offroad_penalty: float = 0.7
    collision_penalty: float = 0.5
    infraction_reward: float = 50.0
    terminate_on_infraction: bool = True
    expert_max_offset: float = 10.0

    @property
    def max_steer(self) -> float:
        return math.radians(self.max_steer_deg)


DEFAULT_CONFIG = SimConfig()


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + math.pi, 2 * math.pi) - math.pi
    w = np.where(w == -math.pi, math.pi, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, self.speed], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "VehicleState":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass(frozen=True)
class Action:
    steer: float
    accel: float

    def __post_init__(self):
        object.__setattr__(self, "steer", float(np.clip(self.steer, -1.0, 1.0)))
        object.__setattr__(self, "accel", float(np.clip(self.accel, -1.0, 1.0)))

    def as_array(self) -> np.ndarray:
        return np.array([self.steer, self.accel], dtype=np.float32)


def bicycle_step(state: VehicleState, action: Action, dt: float = 0.1,
                 cfg: SimConfig = DEFAULT_CONFIG) -> VehicleState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    v = state.speed
    x = state.x + v * math.cos(state.heading) * dt
    y = state.y + v * math.sin(state.heading) * dt
    heading = state.heading + (v / cfg.wheelbase) * math.tan(action.steer * cfg.max_steer) * dt
    speed = min(max(v + action.accel * cfg.max_accel * dt, 0.0), cfg.max_speed)
    return VehicleState(x, y, wrap_angle(heading), speed)


# ---------------------------------------------------------------------------
# routes


@dataclass
class RouteMap:
    waypoints: np.ndarray  # (N, 2)
    half_width: float
    obstacles: np.ndarray  # (K, 3): cx, cy, radius
    seed: int | None = None
    arc: np.ndarray = field(init=False, repr=False)
    tangents: np.ndarray = field(init=False, repr=False)
    curvature: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64)
        self.obstacles = np.asarray(self.obstacles, dtype=np.float64).reshape(-1, 3)
        seg = np.diff(self.waypoints, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.arc = np.concatenate([[0.0], np.cumsum(seg_len)])
        self.tangents = np.arctan2(seg[:, 1], seg[:, 0])
        turn = wrap_angle(np.diff(self.tangents))
        mid = 0.5 * (seg_len[1:] + seg_len[:-1])
        kappa = np.abs(turn) / np.maximum(mid, 1e-9)
        self.curvature = np.concatenate([[0.0], kappa, [0.0]])

    @property
    def length(self) -> float:
        return float(self.arc[-1])

    def start_state(self, cfg: SimConfig = DEFAULT_CONFIG) -> VehicleState:
        x, y = self.waypoints[0]
        return VehicleState(float(x), float(y), float(self.tangents[0]), cfg.initial_speed)

    def transformed(self, dx: float, dy: float, dtheta: float = 0.0) -> "RouteMap":
        """Rigidly rotate by ``dtheta`` about the origin, then shift."""
        c, s = math.cos(dtheta), math.sin(dtheta)
        rot = np.array([[c, -s], [s, c]])
        wp = self.waypoints @ rot.T + [dx, dy]
        obs = self.obstacles.copy()
        if len(obs):
            obs[:, :2] = obs[:, :2] @ rot.T + [dx, dy]
        return RouteMap(wp, self.half_width, obs, self.seed)

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        i = int(np.clip(np.searchsorted(self.arc, s, side="right") - 1, 0, len(self.arc) - 2))
        t = (s - self.arc[i]) / max(self.arc[i + 1] - self.arc[i], 1e-12)
        return self.waypoints[i] + t * (self.waypoints[i + 1] - self.waypoints[i])

    def project(self, x: float, y: float, around: float | None = None,
                window: float = 30.0) -> tuple[float, float, float]:
        """Closest centerline point: (arc length, signed lateral offset, tangent).

        Lateral offset is positive to the left of travel direction. With
        ``around`` the search is restricted to ``around +- window`` meters.
        """
        a = self.waypoints[:-1]
        b = self.waypoints[1:]
        if around is not None:
            lo = max(np.searchsorted(self.arc, around - window) - 1, 0)
            hi = min(np.searchsorted(self.arc, around + window) + 1, len(a))
            a, b = a[lo:hi], b[lo:hi]
        else:
            lo = 0
        d = b - a
        seg_len2 = np.maximum(np.einsum("ij,ij->i", d, d), 1e-12)
        p = np.array([x, y])
        t = np.clip(np.einsum("ij,ij->i", p - a, d) / seg_len2, 0.0, 1.0)
        closest = a + t[:, None] * d
        dist2 = np.einsum("ij,ij->i", p - closest, p - closest)
        k = int(np.argmin(dist2))
        i = lo + k
        s = self.arc[i] + t[k] * (self.arc[i + 1] - self.arc[i])
        rel = p - closest[k]
        cross = d[k, 0] * rel[1] - d[k, 1] * rel[0]
        lateral = math.copysign(math.sqrt(dist2[k]), cross) if dist2[k] > 0 else 0.0
        return float(s), lateral, float(self.tangents[i])

    def max_curvature(self, s0: float, s1: float) -> float:
        lo = np.searchsorted(self.arc, s0)
        hi = np.searchsorted(self.arc, s1, side="right")
        return float(self.curvature[lo:hi].max(initial=0.0))


def _append_straight(points: list, heading: float, length: float, step: float) -> None:
    x, y = points[-1]
    n = max(int(math.ceil(length / step)), 1)
    ds = length / n
    for _ in range(n):
        x += ds * math.cos(heading)
        y += ds * math.sin(heading)
        points.append((x, y))


def _append_arc(points: list, heading: float, radius: float, angle: float, step: float) -> float:
    """Arc turning by signed ``angle``; returns the new heading."""
    arc_len = abs(angle) * radius
    n = max(int(math.ceil(arc_len / step)), 1)
    dpsi = angle / n
    ds = 2 * radius * math.sin(abs(dpsi) / 2)  # chord
    x, y = points[-1]
    for _ in range(n):
        mid = heading + dpsi / 2
        x += ds * math.cos(mid)
        y += ds * math.sin(mid)
        heading += dpsi
        points.append((x, y))
    return heading


def _self_clearance_ok(wp: np.ndarray, arc: np.ndarray, min_gap: float, arc_sep: float) -> bool:
    diff = wp[:, None, :] - wp[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    far_along = np.abs(arc[:, None] - arc[None, :]) > arc_sep
    return not np.any(far_along & (dist < min_gap))


def generate_route(seed: int, cfg: SimConfig = DEFAULT_CONFIG) -> RouteMap:
    """Straights and arcs, one near-90 degree turn, 150-400 m, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    step = 1.0
    for _attempt in range(200):
        target_len = rng.uniform(150.0, 400.0)
        points = [(0.0, 0.0)]
        heading = 0.0
        _append_straight(points, heading, 25.0, step)
        n_turns = 0
        length = 25.0
        while length < target_len - 20.0:
            if n_turns == 0:
                angle = math.radians(rng.uniform(85.0, 95.0))
            else:
                angle = math.radians(rng.uniform(20.0, 90.0))
            angle *= rng.choice([-1.0, 1.0])
            radius = rng.uniform(15.0, 30.0)
            heading = _append_arc(points, heading, radius, angle, step)
            n_turns += 1
            straight = rng.uniform(15.0, 45.0)
            _append_straight(points, heading, straight, step)
            length += abs(angle) * radius + straight
        wp = np.array(points)
        seg = np.hypot(*np.diff(wp, axis=0).T)
        arc = np.concatenate([[0.0], np.cumsum(seg)])
        if not 150.0 <= arc[-1] <= 400.0:
            continue
        if not _self_clearance_ok(wp, arc, min_gap=6 * cfg.lane_half_width, arc_sep=40.0):
            continue
        obstacles = _place_obstacles(rng, wp, arc, cfg)
        return RouteMap(wp, cfg.lane_half_width, obstacles, seed)
    raise RuntimeError(f"could not generate a valid route for seed {seed}")


def _place_obstacles(rng: np.random.Generator, wp: np.ndarray, arc: np.ndarray,
                     cfg: SimConfig) -> np.ndarray:
    """Discs just beyond the road edge, alternating sides every 30-50 m."""
    obstacles = []
    s = rng.uniform(30.0, 50.0)
    side = rng.choice([-1.0, 1.0])
    while s < arc[-1] - 10.0:
        i = int(np.searchsorted(arc, s))
        i = min(max(i, 1), len(wp) - 2)
        tangent = wp[i + 1] - wp[i - 1]
        tangent /= np.linalg.norm(tangent)
        normal = np.array([-tangent[1], tangent[0]])
        radius = rng.uniform(0.5, 1.5)
        offset = cfg.lane_half_width + 1.5 + radius
        center = wp[i] + side * offset * normal
        d = np.min(np.hypot(*(wp - center).T))
        if d > cfg.lane_half_width + radius + 1.0:
            obstacles.append((center[0], center[1], radius))
        side = -side
        s += rng.uniform(30.0, 50.0)
    return np.array(obstacles, dtype=np.float64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# observation rendering


@dataclass
class Observation:
    raster: np.ndarray  # (S, S, 3) float32
    nav: np.ndarray  # (S, S) float32
    speed: float
    ego_motion: np.ndarray  # (3,) dx, dy, dtheta in the previous ego frame


def ego_motion(state: VehicleState, prev_state: VehicleState) -> np.ndarray:
    dx = state.x - prev_state.x
    dy = state.y - prev_state.y
    c, s = math.cos(prev_state.heading), math.sin(prev_state.heading)
    return np.array([c * dx + s * dy, -s * dx + c * dy,
                     wrap_angle(state.heading - prev_state.heading)], dtype=np.float32)


def _pixel_offsets(cfg: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    """Ego-frame (forward, left) coordinates of every pixel centre; row 0 is ahead."""
    n = cfg.raster_size
    centres = ((n - 1) / 2.0 - np.arange(n)) * cfg.resolution
    fwd = np.repeat(centres, n)  # rows
    left = np.tile(centres, n)  # columns, column 0 on the left
    return fwd, left


def _segment_distance(px: np.ndarray, py: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Distance of each pixel to a polyline given in ego coordinates."""
    if len(pts) == 1:
        return np.hypot(px - pts[0, 0], py - pts[0, 1])
    a = pts[:-1]
    d = pts[1:] - a
    seg_len2 = np.maximum(np.einsum("ij,ij->i", d, d), 1e-12)
    rx = px[:, None] - a[None, :, 0]
    ry = py[:, None] - a[None, :, 1]
    t = np.clip((rx * d[None, :, 0] + ry * d[None, :, 1]) / seg_len2, 0.0, 1.0)
    ex = rx - t * d[None, :, 0]
    ey = ry - t * d[None, :, 1]
    return np.sqrt((ex * ex + ey * ey).min(axis=1))


def _to_ego(points: np.ndarray, state: VehicleState) -> np.ndarray:
    c, s = math.cos(state.heading), math.sin(state.heading)
    rel = points - np.array([state.x, state.y])
    return np.stack([rel[:, 0] * c + rel[:, 1] * s, -rel[:, 0] * s + rel[:, 1] * c], axis=1)


def _nearby_polyline(route: RouteMap, ego_pts: np.ndarray, reach: float) -> list[np.ndarray]:
    """Contiguous runs of centerline vertices within ``reach`` (plus one neighbour)."""
    near = np.hypot(ego_pts[:, 0], ego_pts[:, 1]) <= reach
    near = near | np.roll(near, 1) | np.roll(near, -1)
    idx = np.flatnonzero(near)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    return [ego_pts[run] for run in np.split(idx, breaks + 1)]


def _polyline_distance(px, py, runs: list[np.ndarray]) -> np.ndarray:
    if not runs:
        return np.full(px.shape, np.inf)
    return np.min([_segment_distance(px, py, r) for r in runs], axis=0)


def _route_slice(route: RouteMap, s0: float, s1: float) -> np.ndarray:
    s0 = max(s0, 0.0)
    s1 = min(s1, route.length)
    inner = (route.arc > s0) & (route.arc < s1)
    return np.vstack([route.point_at(s0), route.waypoints[inner], route.point_at(s1)])


def render_layers(state: VehicleState, route: RouteMap, progress: float | None = None,
                  cfg: SimConfig = DEFAULT_CONFIG) -> dict[str, np.ndarray]:
    """Binary masks (flattened, row-major) for every channel and label class."""
    fwd, left = _pixel_offsets(cfg)
    reach = cfg.raster_size * cfg.resolution * 0.75 + route.half_width + 2.0
    ego_wp = _to_ego(route.waypoints, state)
    runs = _nearby_polyline(route, ego_wp, reach)
    dist = _polyline_distance(fwd, left, runs)
    road = dist <= route.half_width
    band = dist <= cfg.route_band
    obst = np.zeros(fwd.shape, dtype=bool)
    if len(route.obstacles):
        centres = _to_ego(route.obstacles[:, :2], state)
        for (cx, cy), r in zip(centres, route.obstacles[:, 2]):
            if math.hypot(cx, cy) <= reach + r:
                obst |= np.hypot(fwd - cx, left - cy) <= r
    if progress is None:
        progress = route.project(state.x, state.y)[0]
    ahead = _to_ego(_route_slice(route, progress, progress + cfg.nav_length), state)
    nav_dist = _segment_distance(fwd, left, ahead)
    nav = nav_dist <= cfg.nav_band
    route_cls = nav_dist <= cfg.route_band
    ego = (np.abs(fwd) <= cfg.vehicle_half_length) & (np.abs(left) <= cfg.vehicle_half_width)
    return {"road": road, "band": band, "obstacle": obst, "nav": nav,
            "route": route_cls, "ego": ego}


def render_observation(state: VehicleState, prev_state: VehicleState, route: RouteMap,
                       progress: float | None = None,
                       cfg: SimConfig = DEFAULT_CONFIG) -> Observation:
    n = cfg.raster_size
    layers = render_layers(state, route, progress, cfg)
    raster = np.stack([layers["road"], layers["band"], layers["obstacle"]], axis=-1)
    return Observation(
        raster=raster.reshape(n, n, 3).astype(np.float32),
        nav=layers["nav"].reshape(n, n).astype(np.float32),
        speed=float(state.speed),
        ego_motion=ego_motion(state, prev_state),
    )


def render_bev_label(state: VehicleState, route: RouteMap, progress: float | None = None,
                     cfg: SimConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Class ids over {off-road, road, route, ego}; later classes win."""
    n = cfg.raster_size
    layers = render_layers(state, route, progress, cfg)
    label = np.zeros(n * n, dtype=np.float32)
    label[layers["road"]] = 1
    label[layers["route"]] = 2
    label[layers["ego"]] = 3
    return label.reshape(n, n)


# ---------------------------------------------------------------------------
# expert


class ExpertUndefined(RuntimeError):
    pass


def expert_action(state: VehicleState, route: RouteMap, progress: float | None = None,
                  cfg: SimConfig = DEFAULT_CONFIG) -> Action:
    """Pure pursuit on the centerline plus proportional speed control."""
    if progress is None:
        s, lateral, _ = route.project(state.x, state.y)
    else:
        s, lateral, _ = route.project(state.x, state.y, around=progress)
    if abs(lateral) > cfg.expert_max_offset:
        raise ExpertUndefined(f"vehicle {abs(lateral):.1f} m off route")
    lookahead = max(4.0, 0.5 * state.speed)
    target = route.point_at(s + lookahead)
    dx, dy = target[0] - state.x, target[1] - state.y
    dist = math.hypot(dx, dy)
    if dist < 1e-6:
        steer = 0.0
    else:
        alpha = wrap_angle(math.atan2(dy, dx) - state.heading)
        kappa = 2.0 * math.sin(alpha) / dist
        steer = math.atan(kappa * cfg.wheelbase) / cfg.max_steer
    kappa_ahead = route.max_curvature(s, s + 15.0)
    v_target = cfg.target_speed * max(1.0 - cfg.curve_slowdown * kappa_ahead, 0.4)
    accel = 1.5 * (v_target - state.speed) / cfg.max_accel
    return Action(steer, accel)


# ---------------------------------------------------------------------------
# disturbances


@dataclass(frozen=True)
class DisturbanceWindow:
    start: int
    duration: int
    steer: float


@dataclass
class DisturbanceSchedule:
    windows: list[DisturbanceWindow] = field(default_factory=list)

    def __post_init__(self):
        ordered = sorted(self.windows, key=lambda w: w.start)
        for a, b in zip(ordered, ordered[1:]):
            if b.start < a.start + a.duration:
                raise ValueError(f"overlapping disturbance windows {a} and {b}")
        self.windows = ordered

    def active(self, step: int) -> DisturbanceWindow | None:
        for w in self.windows:
            if w.start <= step < w.start + w.duration:
                return w
        return None

    def add(self, window: DisturbanceWindow) -> None:
        self.windows = DisturbanceSchedule(self.windows + [window]).windows

    def __len__(self) -> int:
        return len(self.windows)


def override_steer(deg: float = 30.0, cfg: SimConfig = DEFAULT_CONFIG) -> float:
    return deg / cfg.max_steer_deg


def inject_disturbance(action: Action, schedule: DisturbanceSchedule, step: int) -> Action:
    window = schedule.active(step)
    if window is None:
        return action
    return Action(window.steer, action.accel)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class InfractionMonitor:
    """Online off-road / collision detection shared by simulation and metrics."""

    route: RouteMap
    cfg: SimConfig = DEFAULT_CONFIG
    offroad_steps: int = 0
    offroad_latched: bool = False
    events: list[tuple[int, str]] = field(default_factory=list)
    progress: float = 0.0
    max_progress: float = 0.0

    def update(self, step: int, state: VehicleState) -> tuple[float, float, float, list[str]]:
        s, lateral, tangent = self.route.project(state.x, state.y, around=self.progress)
        self.progress = s
        self.max_progress = max(self.max_progress, s)
        new: list[str] = []
        if abs(lateral) > self.route.half_width + self.cfg.offroad_margin:
            self.offroad_steps += 1
            limit = int(round(self.cfg.offroad_time / self.cfg.dt))
            if self.offroad_steps > limit and not self.offroad_latched:
                self.offroad_latched = True
                new.append("offroad")
        else:
            self.offroad_steps = 0
            self.offroad_latched = False
        obs = self.route.obstacles
        if len(obs):
            d = np.hypot(obs[:, 0] - state.x, obs[:, 1] - state.y)
            if np.any(d < obs[:, 2] + self.cfg.vehicle_radius):
                new.append("collision")
        for kind in new:
            self.events.append((step, kind))
        return s, lateral, tangent, new


@dataclass
class RunMetrics:
    route_completion: float  # percent
    completion_no_crash: float  # percent of route covered before the first infraction
    completed_km: float
    infractions: dict[str, int]
    driving_score: float
    reward: float
    steps: int
    finished: bool
    recoveries: list[bool] = field(default_factory=list)

    @property
    def recovery_rate(self) -> float:
        if not self.recoveries:
            return 100.0
        return 100.0 * sum(self.recoveries) / len(self.recoveries)


@dataclass
class TrackPoint:
    progress: float
    lateral: float
    heading_error: float
    infractions: list[str]


def track(poses: np.ndarray, route: RouteMap, cfg: SimConfig = DEFAULT_CONFIG,
          stop_on_infraction: bool | None = None) -> tuple[list[TrackPoint], InfractionMonitor]:
    """Replay ``poses`` (state after each step) through the infraction monitor."""
    monitor = InfractionMonitor(route, cfg)
    points: list[TrackPoint] = []
    for step, pose in enumerate(np.asarray(poses, dtype=np.float64)):
        st = VehicleState.from_array(pose)
        s, lateral, tangent, new = monitor.update(step, st)
        points.append(TrackPoint(s, lateral, wrap_angle(st.heading - tangent), new))
    return points, monitor


def run_metrics(poses: np.ndarray, route: RouteMap, cfg: SimConfig = DEFAULT_CONFIG,
                windows: list[DisturbanceWindow] | None = None,
                recovery: "RecoveryCriteria | None" = None) -> RunMetrics:
    poses = np.asarray(poses, dtype=np.float64).reshape(-1, 4)
    points, monitor = track(poses, route, cfg)
    counts = {"offroad": 0, "collision": 0}
    for _, kind in monitor.events:
        counts[kind] += 1
    completion = monitor.max_progress / route.length if len(points) else 0.0
    finished = completion >= 1.0 - 1.0 / route.length
    if finished:
        completion = 1.0
    first = monitor.events[0][0] if monitor.events else None
    if first is None:
        no_crash = completion
    else:
        no_crash = max((p.progress for p in points[: first + 1]), default=0.0) / route.length
    score = 100.0 * completion
    score *= cfg.offroad_penalty ** counts["offroad"]
    score *= cfg.collision_penalty ** counts["collision"]
    progress_gain = (points[-1].progress if points else 0.0)
    reward = progress_gain - cfg.infraction_reward * sum(counts.values())
    recoveries = []
    if windows:
        crit = recovery or RecoveryCriteria()
        recoveries = [crit.recovered(points, w, monitor.events, cfg) for w in windows]
    return RunMetrics(
        route_completion=100.0 * completion,
        completion_no_crash=100.0 * min(no_crash, completion),
        completed_km=completion * route.length / 1000.0,
        infractions=counts,
        driving_score=score,
        reward=reward,
        steps=len(points),
        finished=finished,
        recoveries=recoveries,
    )


@dataclass(frozen=True)
class RecoveryCriteria:
    max_lateral: float = 1.0
    max_heading_deg: float = 15.0
    within_s: float = 3.0

    def recovered(self, points: list[TrackPoint], window: DisturbanceWindow,
                  events: list[tuple[int, str]], cfg: SimConfig) -> bool:
        end = window.start + window.duration
        deadline = end + int(round(self.within_s / cfg.dt))
        for k in range(end, min(deadline, len(points) - 1) + 1):
            if any(window.start <= step <= k for step, _ in events):
                return False
            p = points[k]
            if abs(p.lateral) <= self.max_lateral and abs(math.degrees(p.heading_error)) < self.max_heading_deg:
                return True
        return False
