"""Drone flight scenarios, frame conversions, and no-fly-zone geometry.

World frame is east-north-up (z up); the drone body frame is
forward-right-down.  The two are related by the yaw rotation R(psi) on the
horizontal plane and a sign flip on the vertical axis.

Trajectories are generated by simulating a guided drone: at every slot a
commanded body-frame acceleration (nominal guidance plus a zero-mean random
perturbation) and a yaw rate are applied, and the state is integrated with
the exact constant-acceleration kinematics used by the tracker.  No-fly
zones are simple clockwise polygons; membership is decided by the winding
number of the boundary around the query point.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import ConfigurationError, DegenerateGeometryError

# Treat points closer than this to a polygon vertex/edge as boundary hits.
BOUNDARY_TOL = 1e-6


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class Pose:
    """World-frame position (m, z up), yaw (rad in [-pi, pi)) and slot index."""

    position: np.ndarray
    yaw: float
    time_slot: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        if self.position.shape != (3,):
            raise ValueError("position must be a 3-vector")
        if self.position[2] < -1e-9:
            raise ValueError("altitude must be non-negative")
        if self.time_slot < 1:
            raise ValueError("time slots are 1-based")
        self.yaw = wrap_angle(float(self.yaw))


@dataclass
class MotionState:
    """Body-frame velocity [v_f, v_r, v_d] (m/s), acceleration (m/s^2), yaw rate (rad/s)."""

    v_body: np.ndarray
    a_body: np.ndarray
    yaw_rate: float

    def __post_init__(self):
        self.v_body = np.asarray(self.v_body, dtype=float)
        self.a_body = np.asarray(self.a_body, dtype=float)
        if not (np.all(np.isfinite(self.v_body)) and np.all(np.isfinite(self.a_body))):
            raise ValueError("motion components must be finite")


@dataclass
class Trajectory:
    """Per-slot poses and motion states, sampled every ``slot_duration`` seconds."""

    poses: list
    states: list
    slot_duration: float

    def __len__(self):
        return len(self.poses)

    def state_vector(self, t: int) -> np.ndarray:
        """11-vector [p(3), v_body(3), a_body(3), psi, omega] at 1-based slot t."""
        pose, st = self.poses[t - 1], self.states[t - 1]
        return np.concatenate(
            [pose.position, st.v_body, st.a_body, [pose.yaw, st.yaw_rate]]
        )

    def positions(self) -> np.ndarray:
        return np.stack([p.position for p in self.poses])


@dataclass
class NoFlyZone:
    """Simple clockwise polygon (>= 3 distinct vertices, non-self-intersecting)."""

    vertices: np.ndarray
    id: str = "nfz"

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2 or len(self.vertices) < 3:
            raise ValueError("a zone needs at least 3 planar vertices")
        closed = np.vstack([self.vertices, self.vertices[:1]])
        if np.any(np.linalg.norm(np.diff(closed, axis=0), axis=1) < 1e-12):
            raise ValueError("consecutive vertices must be distinct")

    def edges(self):
        nxt = np.roll(self.vertices, -1, axis=0)
        return self.vertices, nxt

    def min_edge_length(self) -> float:
        a, b = self.edges()
        return float(np.min(np.linalg.norm(b - a, axis=1)))


@dataclass
class AttackerTrace:
    """Per-slot attacker ground truth and the legitimate frames it replays.

    ``replay_source[t-1]`` is the (1-based) earlier slot whose captured frame
    is rebroadcast at slot t, or 0 when the attacker is silent.
    """

    true_position: np.ndarray
    replay_source: np.ndarray
    active_slots: set

    def __post_init__(self):
        for t in self.active_slots:
            src = self.replay_source[t - 1]
            if not (1 <= src < t):
                raise ValueError("replayed frames must predate the replay slot")


# ---------------------------------------------------------------------------
# frame conversions
# ---------------------------------------------------------------------------

def wrap_angle(angle: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return float((angle + math.pi) % (2.0 * math.pi) - math.pi)


def yaw_rotation(yaw: float) -> np.ndarray:
    """3x3 body->world map: R(psi) on the horizontal pair, -1 on the vertical."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, -1.0]])


def body_to_world(v_body, a_body, yaw: float):
    """Rotate body-frame velocity/acceleration into world frame.

    Horizontal components rotate by R(psi); the vertical component flips sign
    (body 'down' against world 'up').
    """
    rot = yaw_rotation(yaw)
    return rot @ np.asarray(v_body, dtype=float), rot @ np.asarray(a_body, dtype=float)


def world_to_body(v_world, a_world, yaw: float):
    """Inverse of :func:`body_to_world` (the map is an involution-free orthogonal one)."""
    rot = yaw_rotation(yaw).T
    return rot @ np.asarray(v_world, dtype=float), rot @ np.asarray(a_world, dtype=float)


def ca_step(p, v_body, a_body, yaw, yaw_rate, dt):
    """One exact constant-acceleration step of the kinematic model."""
    rot = yaw_rotation(yaw)
    v_w = rot @ v_body
    a_w = rot @ a_body
    p_next = p + v_w * dt + 0.5 * a_w * dt * dt
    v_next = v_body + a_body * dt
    yaw_next = wrap_angle(yaw + yaw_rate * dt)
    return p_next, v_next, yaw_next


# ---------------------------------------------------------------------------
# no-fly-zone geometry
# ---------------------------------------------------------------------------

VERTEX, EDGE, CLEAR = "vertex", "edge", "clear"


def boundary_guard(point, zone: NoFlyZone, tol: float = BOUNDARY_TOL) -> str:
    """Classify a point against the zone boundary within ``tol`` metres."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    p = np.asarray(point, dtype=float)
    verts = zone.vertices
    if np.min(np.linalg.norm(verts - p, axis=1)) <= tol:
        return VERTEX
    a, b = zone.edges()
    ab = b - a
    ap = p - a
    denom = np.einsum("ij,ij->i", ab, ab)
    s = np.clip(np.einsum("ij,ij->i", ap, ab) / denom, 0.0, 1.0)
    closest = a + s[:, None] * ab
    if np.min(np.linalg.norm(closest - p, axis=1)) <= tol:
        return EDGE
    return CLEAR


def winding_number(point, zone: NoFlyZone) -> int:
    """Signed winding number of the zone boundary around ``point``.

    Accumulates atan2(cross, dot) of the vertex-difference vectors and rounds
    the total to the nearest integer; |w| >= 1 means the point is enclosed.
    Raises :class:`DegenerateGeometryError` on boundary hits, where atan2 of
    (0, 0) or the anti-parallel configuration is undefined.
    """
    p = np.asarray(point, dtype=float)
    v1 = zone.vertices - p
    v2 = np.roll(zone.vertices, -1, axis=0) - p
    cross = v1[:, 0] * v2[:, 1] - v1[:, 1] * v2[:, 0]
    dot = np.einsum("ij,ij->i", v1, v2)
    norms = np.linalg.norm(v1, axis=1) * np.linalg.norm(v2, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateGeometryError(f"point coincides with a vertex of {zone.id}")
    if np.any((np.abs(cross) <= 1e-12 * norms) & (dot < 0.0)):
        raise DegenerateGeometryError(f"point lies on an edge of {zone.id}")
    total = float(np.sum(np.arctan2(cross, dot)))
    return int(round(total / (2.0 * math.pi)))


def point_in_zone(point, zone: NoFlyZone, tol: float = BOUNDARY_TOL) -> bool:
    """Inside test with boundary points counted as inside (conservative)."""
    if boundary_guard(point, zone, tol) != CLEAR:
        return True
    return abs(winding_number(point, zone)) >= 1


def _orient(a, b, c):
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_segment(a, b, c):
    # collinear c within the bounding box of [a, b]
    return (
        min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12
        and min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12
    )


def segments_intersect(p0, p1, q0, q1) -> bool:
    """Exact segment-segment intersection (touching or collinear overlap counts)."""
    d1 = _orient(q0, q1, p0)
    d2 = _orient(q0, q1, p1)
    d3 = _orient(p0, p1, q0)
    d4 = _orient(p0, p1, q1)
    if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and (
        (d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)
    ):
        return True
    if d1 == 0 and _on_segment(q0, q1, p0):
        return True
    if d2 == 0 and _on_segment(q0, q1, p1):
        return True
    if d3 == 0 and _on_segment(p0, p1, q0):
        return True
    if d4 == 0 and _on_segment(p0, p1, q1):
        return True
    return False


def segment_intersects_nfz(p_t, p_t1, zone: NoFlyZone, n_samples: int | None = None) -> bool:
    """Does the straight horizontal path from p_t to p_t1 touch the zone?

    Samples the interpolated point on a uniform grid in [0, 1] and tests each
    sample (boundary hits count as inside).  Pure sampling can step over a
    zone thinner than the grid, so an exact segment/edge crossing test is
    applied as well.
    """
    p0 = np.asarray(p_t, dtype=float)[:2]
    p1 = np.asarray(p_t1, dtype=float)[:2]
    if n_samples is None:
        n_samples = max(
            2, int(math.ceil(2.0 * np.linalg.norm(p1 - p0) / zone.min_edge_length()))
        )
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    for delta in np.linspace(0.0, 1.0, n_samples):
        if point_in_zone((1.0 - delta) * p0 + delta * p1, zone):
            return True
    a, b = zone.edges()
    for q0, q1 in zip(a, b):
        if segments_intersect(p0, p1, q0, q1):
            return True
    return False


# ---------------------------------------------------------------------------
# scenario configuration
# ---------------------------------------------------------------------------

@dataclass
class ScenarioConfig:
    """Parameters for legitimate-trajectory generation.

    kind             'curved' or 'line_then_spiral'
    origin, dest     world endpoints (dest is the curved-path target; for the
                     spiral kind it sets the initial line heading)
    T                number of time slots
    slot_duration    slot length in seconds
    accel_noise      std-dev of the per-slot random body acceleration (m/s^2)
    v_max, a_max     kinematic limits used by the guidance law
    omega_max        yaw-rate limit (rad/s)
    line_fraction    spiral kind: fraction of slots flown on the initial line
    spiral_omega     spiral kind: constant turn rate (rad/s)
    spiral_speed     spiral kind: forward speed on the spiral (m/s)
    climb_rate       spiral kind: ascent rate (m/s)
    zones            no-fly zones the trajectory must avoid
    """

    kind: str = "curved"
    origin: tuple = (0.0, 0.0, 0.0)
    dest: tuple = (3500.0, 3500.0, 120.0)
    T: int = 300
    slot_duration: float = 1.0
    accel_noise: float = 0.25
    v_max: float = 30.0
    a_max: float = 3.0
    omega_max: float = 0.6
    omega_slew: float = 0.12  # per-slot turn-rate change limit (rad/s per slot)
    control_point: tuple | None = None  # None: bow the curve right of the direct line
    line_fraction: float = 0.5
    spiral_omega: float = 0.22
    spiral_speed: float = 9.0
    climb_rate: float = 1.2
    zones: list = field(default_factory=list)

    @classmethod
    def from_yaml(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        raw = dict(raw)
        zones = [
            NoFlyZone(np.asarray(z["vertices"], dtype=float), z.get("id", f"nfz{i}"))
            for i, z in enumerate(raw.pop("zones", []))
        ]
        cfg = cls(**raw)
        cfg.zones = zones
        return cfg

    def to_dict(self) -> dict:
        d = {
            k: (list(v) if isinstance(v, tuple) else v)
            for k, v in self.__dict__.items()
            if k != "zones"
        }
        d["zones"] = [
            {"id": z.id, "vertices": z.vertices.tolist()} for z in self.zones
        ]
        return d


def square_zone(center, side: float, zone_id: str) -> NoFlyZone:
    """Axis-aligned square with clockwise vertex order."""
    cx, cy = center
    h = side / 2.0
    verts = [(cx - h, cy - h), (cx - h, cy + h), (cx + h, cy + h), (cx + h, cy - h)]
    return NoFlyZone(np.array(verts), zone_id)


def scenario1_zones(bs_xy=(500.0, 500.0), offset: float = 100.0, side: float = 20.0):
    """Four 20 m squares on the compass sides of the base station."""
    cx, cy = bs_xy
    return [
        square_zone((cx + offset, cy), side, "nfz_east"),
        square_zone((cx - offset, cy), side, "nfz_west"),
        square_zone((cx, cy + offset), side, "nfz_north"),
        square_zone((cx, cy - offset), side, "nfz_south"),
    ]


def scenario1_config(**overrides) -> ScenarioConfig:
    cfg = ScenarioConfig(kind="curved", zones=scenario1_zones(), control_point=(2400.0, 400.0))
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def scenario2_config(**overrides) -> ScenarioConfig:
    cfg = ScenarioConfig(kind="line_then_spiral", dest=(2000.0, 2000.0, 60.0))
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


# ---------------------------------------------------------------------------
# trajectory generation
# ---------------------------------------------------------------------------

def _bezier(p0, p1, p2, s):
    s = np.asarray(s, dtype=float)[..., None]
    return (1 - s) ** 2 * p0 + 2 * (1 - s) * s * p1 + s**2 * p2


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _plan_curved_path(cfg: ScenarioConfig):
    """Arc-length sampled nominal curve and a slot-indexed progress schedule."""
    p0 = np.asarray(cfg.origin[:2], dtype=float)
    p2 = np.asarray(cfg.dest[:2], dtype=float)
    if cfg.control_point is not None:
        p1 = np.asarray(cfg.control_point, dtype=float)
    else:
        chord = p2 - p0
        perp = np.array([chord[1], -chord[0]])
        norm = np.linalg.norm(perp)
        perp = perp / norm if norm > 0 else np.array([1.0, 0.0])
        p1 = 0.5 * (p0 + p2) + 0.25 * np.linalg.norm(chord) * perp
    s_dense = np.linspace(0.0, 1.0, 2048)
    pts = _bezier(p0, p1, p2, s_dense)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    length = arc[-1]

    # trapezoidal progress profile ending a few slots early, then hover
    t_end = cfg.T - 5
    ramp = max(8, int(0.12 * t_end))
    weights = np.ones(t_end)
    weights[:ramp] = np.linspace(0.15, 1.0, ramp)
    weights[-ramp:] = np.linspace(1.0, 0.1, ramp)
    progress = np.concatenate([[0.0], np.cumsum(weights)])
    progress = progress / progress[-1] * length
    v_peak = np.max(np.diff(progress)) / cfg.slot_duration
    if v_peak > 0.8 * cfg.v_max:
        raise ConfigurationError(
            f"destination unreachable: profile needs {v_peak:.1f} m/s "
            f"with v_max {cfg.v_max:.1f}"
        )

    def xy_at(dist):
        return np.array(
            [np.interp(dist, arc, pts[:, 0]), np.interp(dist, arc, pts[:, 1])]
        )

    z0, z1 = cfg.origin[2], cfg.dest[2]

    def target_at(slot):  # 0-based slot -> nominal 3D point
        d = progress[min(slot, t_end)]
        xy = xy_at(d)
        z = z0 + (z1 - z0) * _smoothstep(d / max(length, 1e-9))
        return np.array([xy[0], xy[1], z])

    return target_at


def _plan_spiral_path(cfg: ScenarioConfig):
    """Velocity program for the line->spiral profile.

    Returns per-slot (commanded body velocity, commanded yaw rate).
    """
    t_line = int(cfg.line_fraction * cfg.T)
    heading = math.atan2(
        cfg.dest[1] - cfg.origin[1], cfg.dest[0] - cfg.origin[0]
    )
    v_line = min(cfg.spiral_speed * 1.4, 0.9 * cfg.v_max)

    def command_at(slot):
        if slot < 10:
            speed = v_line * slot / 10.0
            return np.array([speed, 0.0, -0.3 * cfg.climb_rate]), 0.0, heading
        if slot < t_line:
            return np.array([v_line, 0.0, -0.3 * cfg.climb_rate]), 0.0, heading
        return (
            np.array([cfg.spiral_speed, 0.0, -cfg.climb_rate]),
            cfg.spiral_omega,
            None,
        )

    return command_at


def generate_legit_trajectory(kind: str, config: ScenarioConfig, seed: int) -> Trajectory:
    """Simulate a legitimate drone flight of ``config.T`` slots.

    The drone starts at rest at the origin.  Each slot applies a guidance
    acceleration (toward the nominal path, or tracking the commanded spiral
    velocity) plus zero-mean Gaussian body-frame noise, then integrates the
    exact constant-acceleration kinematics, so consecutive poses satisfy the
    model by construction.  Raises :class:`ConfigurationError` when the
    destination cannot be reached within the slot budget, and asserts that no
    inter-slot segment clips a configured no-fly zone.
    """
    if kind not in ("curved", "line_then_spiral"):
        raise ConfigurationError(f"unknown trajectory kind {kind!r}")
    rng = np.random.default_rng(seed)
    dt = config.slot_duration

    p = np.asarray(config.origin, dtype=float)
    v_body = np.zeros(3)
    poses, states = [], []

    if kind == "curved":
        target_at = _plan_curved_path(config)
        first_leg = target_at(3) - np.asarray(config.origin, dtype=float)
        yaw = math.atan2(first_leg[1], first_leg[0])
    else:
        command_at = _plan_spiral_path(config)
        yaw = math.atan2(config.dest[1] - config.origin[1], config.dest[0] - config.origin[0])
    omega = 0.0

    for slot in range(config.T):
        rot = yaw_rotation(yaw)
        v_world = rot @ v_body

        if kind == "curved":
            target = target_at(slot + 1)
            v_des_world = (target - p) / dt
            speed = np.linalg.norm(v_des_world)
            if speed > config.v_max:
                v_des_world *= config.v_max / speed
            a_world_cmd = (v_des_world - v_world) / dt
            yaw_des = (
                math.atan2(v_des_world[1], v_des_world[0])
                if np.linalg.norm(v_des_world[:2]) > 0.5
                else yaw
            )
            omega_des = wrap_angle(yaw_des - yaw) / dt
        else:
            v_body_cmd, omega_des, heading = command_at(slot)
            if heading is not None:
                omega_des = wrap_angle(heading - yaw) / dt
            a_world_cmd = (rot @ v_body_cmd - v_world) / dt

        # a flyable heading profile: bounded turn rate, bounded turn-rate slew
        omega_des = float(np.clip(omega_des, -config.omega_max, config.omega_max))
        omega = omega + float(
            np.clip(omega_des - omega, -config.omega_slew, config.omega_slew)
        )

        norm = np.linalg.norm(a_world_cmd)
        if norm > config.a_max:
            a_world_cmd *= config.a_max / norm
        _, a_body = world_to_body(np.zeros(3), a_world_cmd, yaw)
        a_body = a_body + config.accel_noise * rng.standard_normal(3)

        # enforce the speed limit through the commanded acceleration so the
        # flown motion stays exactly constant-acceleration within the slot
        v_next = v_body + a_body * dt
        speed_next = np.linalg.norm(v_next)
        if speed_next > config.v_max:
            a_body = (v_next * (config.v_max / speed_next) - v_body) / dt

        poses.append(Pose(p.copy(), yaw, slot + 1))
        states.append(MotionState(v_body.copy(), a_body.copy(), float(omega)))
        p, v_body, yaw = ca_step(p, v_body, a_body, yaw, omega, dt)
        p[2] = max(p[2], 0.0)

    traj = Trajectory(poses, states, dt)
    for zone in config.zones:
        pos = traj.positions()
        for t in range(len(traj) - 1):
            if segment_intersects_nfz(pos[t], pos[t + 1], zone):
                raise ConfigurationError(
                    f"generated trajectory clips zone {zone.id} at slot {t + 1}; "
                    "adjust the control point or zones"
                )
    return traj


def spawn_attacker(legit: Trajectory, region, seed: int) -> AttackerTrace:
    """Place a replay attacker uniformly in ``region`` for every slot after the first.

    ``region`` is ((xmin, ymin, zmin), (xmax, ymax, zmax)).  The frame
    rebroadcast at slot t is chosen uniformly among the legitimate frames
    already overheard (slots 1..t-1).
    """
    lo = np.asarray(region[0], dtype=float)
    hi = np.asarray(region[1], dtype=float)
    if np.any(hi < lo):
        raise ConfigurationError("attacker region is empty")
    rng = np.random.default_rng(seed)
    T = len(legit)
    pos = lo + (hi - lo) * rng.random((T, 3))
    replay = np.zeros(T, dtype=int)
    active = set()
    for t in range(2, T + 1):
        replay[t - 1] = int(rng.integers(1, t))
        active.add(t)
    return AttackerTrace(pos, replay, active)


# ---------------------------------------------------------------------------
# trajectory CSV interchange
# ---------------------------------------------------------------------------

TRAJECTORY_COLUMNS = ["t", "x", "y", "z", "vf", "vr", "vd", "af", "ar", "ad", "psi", "omega"]


def export_trajectory_csv(traj: Trajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for pose, st in zip(traj.poses, traj.states):
            writer.writerow(
                [pose.time_slot]
                + [repr(float(v)) for v in pose.position]
                + [repr(float(v)) for v in st.v_body]
                + [repr(float(v)) for v in st.a_body]
                + [repr(float(pose.yaw)), repr(float(st.yaw_rate))]
            )


def load_trajectory_csv(path, slot_duration: float = 1.0) -> Trajectory:
    poses, states = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            poses.append(
                Pose(
                    np.array([float(row["x"]), float(row["y"]), float(row["z"])]),
                    float(row["psi"]),
                    int(row["t"]),
                )
            )
            states.append(
                MotionState(
                    np.array([float(row["vf"]), float(row["vr"]), float(row["vd"])]),
                    np.array([float(row["af"]), float(row["ar"]), float(row["ad"])]),
                    float(row["omega"]),
                )
            )
    return Trajectory(poses, states, slot_duration)
