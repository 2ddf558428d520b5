"""Reproducible synthetic driving scenes.

Generates lane geometry (straight / arc / intersection), static agent and
clutter boxes, a route, double-edge ground truth, a surface-sampled LiDAR
point cloud, and coarse per-view feature grids that stand in for an image
backbone. Everything is a pure function of (spec, seed); repeated calls are
bit-identical.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .double_edge import DoubleEdgeSet, deserialize, lanes_from_arrays, serialize, validate
from .geometry import (
    OrientedBox,
    polyline_length,
    project_point_to_polyline,
    resample_polyline,
)

__all__ = [
    "SceneSpec",
    "Scene",
    "PointCloud",
    "ViewFeatureGrid",
    "GenerationError",
    "generate_scene",
    "render_lidar",
    "rasterize_semantic_views",
    "synth_view_features",
    "occupancy_flags",
    "scene_to_json",
    "scene_from_json",
    "save_point_cloud",
    "load_point_cloud",
]

GEOMETRIES = ("straight", "arc", "intersection")
SIGNAL_STATES = ("none", "green", "red")

# rng stream ids, combined with the owning seed as default_rng([seed, STREAM_*])
_STREAM_SCENE = 0
_STREAM_LIDAR = 1
_STREAM_VIEWS = 2

_CRUISE_SPEED = 8.0  # m/s commanded on open road
_EGO_CLEARANCE = 8.0  # agents keep this distance from the start pose
_CENTERLINE_STEP = 1.0  # native centerline sampling, meters


class GenerationError(ValueError):
    """Spec cannot be realized (invalid field or unreachable target)."""


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    lane_count: int = 1
    geometry: str = "straight"
    radius: float | None = None  # required for geometry="arc"
    lane_width: float = 3.5
    route_length: float = 100.0
    agent_count: int = 0
    clutter_density: float = 0.0  # objects per 100 m^2 of roadside band
    traffic_signal: str = "none"

    def validate(self) -> None:
        if self.lane_count < 1:
            raise GenerationError(f"lane_count must be >= 1, got {self.lane_count}")
        if self.geometry not in GEOMETRIES:
            raise GenerationError(f"geometry must be one of {GEOMETRIES}, got {self.geometry!r}")
        if self.lane_width <= 0:
            raise GenerationError(f"lane_width must be > 0, got {self.lane_width}")
        if self.route_length <= 0:
            raise GenerationError(f"route_length must be > 0, got {self.route_length}")
        if self.agent_count < 0:
            raise GenerationError(f"agent_count must be >= 0, got {self.agent_count}")
        if self.clutter_density < 0:
            raise GenerationError(f"clutter_density must be >= 0, got {self.clutter_density}")
        if self.traffic_signal not in SIGNAL_STATES:
            raise GenerationError(
                f"traffic_signal must be one of {SIGNAL_STATES}, got {self.traffic_signal!r}"
            )
        if self.geometry == "arc":
            if self.radius is None or self.radius <= self.lane_width:
                raise GenerationError(
                    f"arc radius must exceed lane_width, got radius={self.radius}"
                )


@dataclass(frozen=True)
class PointCloud:
    """N x 3 LiDAR points, meters, ego frame."""

    points: np.ndarray

    def __len__(self) -> int:
        return int(self.points.shape[0])


@dataclass(frozen=True)
class ViewFeatureGrid:
    """Per-view feature stack, shape (4, C, H, W)."""

    views: np.ndarray


@dataclass(frozen=True)
class Scene:
    spec: SceneSpec
    centerlines: tuple[np.ndarray, ...]  # per lane, (M, 3)
    lane_widths: tuple[float, ...]
    agents: tuple[OrientedBox, ...]
    clutter: tuple[OrientedBox, ...]
    route_start: tuple[float, float, float]  # x, y, heading
    route_target: tuple[float, float, float]
    route_lane: int
    signal_state: str
    signal_line_s: float | None  # arc length along the route lane, if any signal
    ground_truth: DoubleEdgeSet
    gt_speed: float

    @property
    def route_polyline(self) -> np.ndarray:
        return self.centerlines[self.route_lane]


# ---------------------------------------------------------------------------
# lane geometry
# ---------------------------------------------------------------------------


def _straight_centerline(length: float, offset: float) -> np.ndarray:
    n = max(2, int(math.ceil(length / _CENTERLINE_STEP)) + 1)
    x = np.linspace(0.0, length, n)
    return np.column_stack([x, np.full(n, offset), np.zeros(n)])


def _arc_centerline(radius: float, arc_len: float, offset: float) -> np.ndarray:
    # Concentric left-turn arcs sharing the base angular span; the ego lane
    # starts at the origin with +x tangent, turn center at (0, radius).
    r = radius - offset
    theta_max = arc_len / radius
    n = max(2, int(math.ceil(r * theta_max / _CENTERLINE_STEP)) + 1)
    theta = np.linspace(0.0, theta_max, n)
    x = r * np.sin(theta)
    y = radius - r * np.cos(theta)
    return np.column_stack([x, y, np.zeros(n)])


def _lane_layout(spec: SceneSpec) -> tuple[list[np.ndarray], list[int], list[int]]:
    """Centerlines plus per-lane intersection/direction flags."""
    n_cross = min(2, spec.lane_count - 1) if spec.geometry == "intersection" else 0
    n_main = spec.lane_count - n_cross
    n_same = (n_main + 1) // 2

    centerlines: list[np.ndarray] = []
    int_flags: list[int] = []
    dir_flags: list[int] = []
    for k in range(n_main):
        offset = k * spec.lane_width
        if spec.geometry == "arc":
            line = _arc_centerline(float(spec.radius), spec.route_length, offset)
        else:
            line = _straight_centerline(spec.route_length, offset)
        centerlines.append(line)
        int_flags.append(0)
        dir_flags.append(1 if k < n_same else 0)

    if n_cross:
        x_c = spec.route_length / 2.0
        span = min(30.0, spec.route_length / 2.0)
        for k in range(n_cross):
            x_off = x_c + k * spec.lane_width
            n = max(2, int(math.ceil(2 * span / _CENTERLINE_STEP)) + 1)
            y = np.linspace(-span, span, n)
            centerlines.append(np.column_stack([np.full(n, x_off), y, np.zeros(n)]))
            int_flags.append(1)
            dir_flags.append(0)
    return centerlines, int_flags, dir_flags


def _orient_ego_outward(line: np.ndarray, ego_xy: np.ndarray) -> np.ndarray:
    """Reverse the polyline if its far end is nearer the ego than its start."""
    d0 = np.linalg.norm(line[0, :2] - ego_xy)
    d1 = np.linalg.norm(line[-1, :2] - ego_xy)
    return line[::-1].copy() if d1 < d0 else line


def occupancy_flags(midpoints: np.ndarray, agents: tuple[OrientedBox, ...]) -> np.ndarray:
    """occ flag per lane sample: 1 iff the lane midpoint sits inside any
    agent footprint."""
    out = np.zeros(len(midpoints), dtype=np.int64)
    for box in agents:
        out |= box.contains_xy(midpoints[:, :2]).astype(np.int64)
    return out


def _ground_truth(
    centerlines: list[np.ndarray],
    int_flags: list[int],
    dir_flags: list[int],
    lane_width: float,
    agents: tuple[OrientedBox, ...],
    route_lane: int,
    n_p: int,
) -> DoubleEdgeSet:
    half = n_p // 2
    n_d = len(centerlines)
    points = np.zeros((n_d, n_p, 3))
    occ = np.zeros((n_d, n_p), dtype=np.int64)
    plan = np.zeros((n_d, n_p), dtype=np.int64)
    for i, line in enumerate(centerlines):
        mid = resample_polyline(line, half)
        tang = np.gradient(mid[:, :2], axis=0)
        norm = np.linalg.norm(tang, axis=1, keepdims=True)
        tang = tang / np.where(norm == 0.0, 1.0, norm)
        left_n = np.column_stack([-tang[:, 1], tang[:, 0]])
        points[i, :half, :2] = mid[:, :2] + left_n * (lane_width / 2.0)
        points[i, half:, :2] = mid[:, :2] - left_n * (lane_width / 2.0)
        points[i, :, 2] = 0.0
        lane_occ = occupancy_flags(mid, agents)
        occ[i, :half] = lane_occ
        occ[i, half:] = lane_occ
        if i == route_lane:
            plan[i, :] = 1
    return lanes_from_arrays(points, occ, plan, int_flags, dir_flags)


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------


def _place_agents(rng: np.random.Generator, spec: SceneSpec,
                  centerlines: list[np.ndarray]) -> tuple[OrientedBox, ...]:
    agents = []
    ego = np.zeros(2)
    for _ in range(spec.agent_count):
        for _attempt in range(1000):
            lane = int(rng.integers(0, len(centerlines)))
            line = centerlines[lane]
            length = polyline_length(line)
            s = float(rng.uniform(0.05, 0.95)) * length
            pos = resample_polyline(line, max(2, int(length) + 1))
            idx = min(int(s / max(length, 1e-9) * (len(pos) - 1)), len(pos) - 2)
            p = pos[idx]
            tang = pos[idx + 1, :2] - pos[idx, :2]
            yaw = math.atan2(tang[1], tang[0]) + float(rng.uniform(-0.1, 0.1))
            lateral = float(rng.uniform(-0.3, 0.3))
            c = np.array([p[0] - lateral * math.sin(yaw), p[1] + lateral * math.cos(yaw)])
            if np.linalg.norm(c - ego) < _EGO_CLEARANCE:
                continue
            ext = (
                float(rng.uniform(4.0, 5.0)),
                float(rng.uniform(1.8, 2.2)),
                float(rng.uniform(1.4, 1.8)),
            )
            agents.append(OrientedBox(center=(float(c[0]), float(c[1]), ext[2] / 2.0),
                                      yaw=float(yaw), extent=ext))
            break
        else:
            raise GenerationError("could not place agents clear of the ego start pose")
    return tuple(agents)


def _place_clutter(rng: np.random.Generator, spec: SceneSpec,
                   centerlines: list[np.ndarray]) -> tuple[OrientedBox, ...]:
    if spec.clutter_density <= 0.0:
        return ()
    allpts = np.vstack(centerlines)
    lo = allpts[:, :2].min(axis=0) - 15.0
    hi = allpts[:, :2].max(axis=0) + 15.0
    band_area = float(np.prod(hi - lo))
    count = int(round(spec.clutter_density * band_area / 100.0))
    road_clear = spec.lane_width / 2.0 + 2.0
    clutter = []
    attempts = 0
    while len(clutter) < count and attempts < count * 200:
        attempts += 1
        c = rng.uniform(lo, hi)
        near_road = any(
            project_point_to_polyline(c, line)[1] < road_clear for line in centerlines
        )
        if near_road:
            continue
        ext = (
            float(rng.uniform(2.0, 6.0)),
            float(rng.uniform(2.0, 6.0)),
            float(rng.uniform(2.0, 5.0)),
        )
        yaw = float(rng.uniform(0.0, 2.0 * math.pi))
        clutter.append(OrientedBox(center=(float(c[0]), float(c[1]), ext[2] / 2.0),
                                   yaw=yaw, extent=ext))
    return tuple(clutter)


def generate_scene(spec: SceneSpec, n_p: int = 20) -> Scene:
    """Build the full scene for a spec; deterministic in ``spec.seed``."""
    spec.validate()
    if spec.geometry == "arc" and spec.route_length > 1.75 * math.pi * float(spec.radius):
        raise GenerationError("target unreachable: arc route folds back onto itself")
    if n_p % 2 != 0 or n_p < 4:
        raise GenerationError(f"n_p must be even and >= 4, got {n_p}")

    rng = np.random.default_rng([spec.seed, _STREAM_SCENE])
    centerlines, int_flags, dir_flags = _lane_layout(spec)
    ego_xy = np.zeros(2)
    centerlines = [_orient_ego_outward(line, ego_xy) for line in centerlines]

    agents = _place_agents(rng, spec, centerlines)
    clutter = _place_clutter(rng, spec, centerlines)

    route_lane = 0
    gt = _ground_truth(centerlines, int_flags, dir_flags, spec.lane_width,
                       agents, route_lane, n_p)
    diags = validate(gt)
    if diags:  # generator bug, not user input
        raise GenerationError("generated ground truth is invalid: " + "; ".join(diags))

    route = centerlines[route_lane]
    tang0 = route[1, :2] - route[0, :2]
    start = (float(route[0, 0]), float(route[0, 1]), math.atan2(tang0[1], tang0[0]))
    target = (float(route[-1, 0]), float(route[-1, 1]), float(route[-1, 2]))

    signal_line_s = None
    if spec.traffic_signal != "none":
        signal_line_s = polyline_length(route) / 2.0
    gt_speed = 0.0 if spec.traffic_signal == "red" else _CRUISE_SPEED

    return Scene(
        spec=spec,
        centerlines=tuple(centerlines),
        lane_widths=tuple(spec.lane_width for _ in centerlines),
        agents=agents,
        clutter=clutter,
        route_start=start,
        route_target=target,
        route_lane=route_lane,
        signal_state=spec.traffic_signal,
        signal_line_s=signal_line_s,
        ground_truth=gt,
        gt_speed=gt_speed,
    )


# ---------------------------------------------------------------------------
# LiDAR rendering: stratified surface sampling of road strips and box faces
# ---------------------------------------------------------------------------


def _sample_rect(rng: np.random.Generator, n: int, a: float, b: float) -> np.ndarray:
    """n jittered-grid samples in [0,a] x [0,b]; exactly n points."""
    if n <= 0:
        return np.zeros((0, 2))
    g1 = max(1, int(round(math.sqrt(n * a / max(b, 1e-9)))))
    g2 = max(1, int(math.ceil(n / g1)))
    idx = np.arange(n)
    ci = idx % g1
    cj = idx // g1
    u = (ci + rng.random(n)) / g1 * a
    v = (cj + rng.random(n)) / g2 * b
    return np.column_stack([u, v])


class _CountCarry:
    """Accumulates fractional point budgets so totals track area*density."""

    def __init__(self) -> None:
        self.carry = 0.0

    def take(self, budget: float) -> int:
        self.carry += budget
        n = int(math.floor(self.carry + 0.5))
        self.carry -= n
        return max(0, n)


def _sample_road(rng, line: np.ndarray, width: float, density: float,
                 carry: _CountCarry) -> list[np.ndarray]:
    pts = []
    for k in range(len(line) - 1):
        a = line[k, :2]
        b = line[k + 1, :2]
        seg = b - a
        ds = float(np.linalg.norm(seg))
        if ds == 0.0:
            continue
        n = carry.take(ds * width * density)
        if n == 0:
            continue
        uv = _sample_rect(rng, n, ds, width)
        t = seg / ds
        nrm = np.array([-t[1], t[0]])
        xy = a + uv[:, :1] * t + (uv[:, 1:] - width / 2.0) * nrm
        pts.append(np.column_stack([xy, np.zeros(n)]))
    return pts


def _box_faces(box: OrientedBox) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, float, float]]:
    """Top and side faces as (origin, u_dir, v_dir, u_len, v_len)."""
    ex, ey, ez = box.extent
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    ux = np.array([c, s, 0.0])
    uy = np.array([-s, c, 0.0])
    uz = np.array([0.0, 0.0, 1.0])
    base = np.array([box.center[0], box.center[1], 0.0])
    corner = base - ux * ex / 2.0 - uy * ey / 2.0
    faces = [
        (corner + uz * ez, ux, uy, ex, ey),  # top
        (corner, ux, uz, ex, ez),
        (corner + uy * ey, ux, uz, ex, ez),
        (corner, uy, uz, ey, ez),
        (corner + ux * ex, uy, uz, ey, ez),
    ]
    return faces


def _sample_boxes(rng, boxes, density: float, carry: _CountCarry) -> list[np.ndarray]:
    pts = []
    for box in boxes:
        for origin, du, dv, lu, lv in _box_faces(box):
            n = carry.take(lu * lv * density)
            if n == 0:
                continue
            uv = _sample_rect(rng, n, lu, lv)
            pts.append(origin + uv[:, :1] * du + uv[:, 1:] * dv)
    return pts


def render_lidar(scene: Scene, density: float, noise_sigma: float, seed: int) -> PointCloud:
    """Surface-sample the scene at ``density`` points/m^2 with optional
    isotropic Gaussian noise; deterministic in ``seed``."""
    if density <= 0:
        raise ValueError(f"density must be > 0, got {density}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    rng = np.random.default_rng([seed, _STREAM_LIDAR])
    carry = _CountCarry()
    chunks: list[np.ndarray] = []
    for line, width in zip(scene.centerlines, scene.lane_widths):
        chunks.extend(_sample_road(rng, line, width, density, carry))
    chunks.extend(_sample_boxes(rng, scene.agents, density, carry))
    chunks.extend(_sample_boxes(rng, scene.clutter, density, carry))
    if not chunks:
        return PointCloud(points=np.zeros((0, 3)))
    pts = np.vstack(chunks)
    if noise_sigma > 0.0:
        pts = pts + rng.normal(0.0, noise_sigma, pts.shape)
    return PointCloud(points=pts)


# ---------------------------------------------------------------------------
# Per-view semantic rasters and the fixed projection standing in for an
# image backbone. Four views at yaws 0/90/180/270 deg, 90 deg HFOV each.
# ---------------------------------------------------------------------------

VIEW_YAWS = (0.0, math.pi / 2.0, math.pi, 3.0 * math.pi / 2.0)
N_VIEWS = 4
SEMANTIC_CHANNELS = 3  # lane mask, agent mask, signal state
_VIEW_R_MIN = 0.5
_VIEW_R_MAX = 80.0


def _splat(view: np.ndarray, pts_xy: np.ndarray, yaw: float, value: float = 1.0) -> None:
    h, w = view.shape
    c, s = math.cos(yaw), math.sin(yaw)
    x = c * pts_xy[:, 0] + s * pts_xy[:, 1]
    y = -s * pts_xy[:, 0] + c * pts_xy[:, 1]
    r = np.hypot(x, y)
    az = np.arctan2(y, x)
    keep = (np.abs(az) <= math.pi / 4.0) & (r >= _VIEW_R_MIN) & (r <= _VIEW_R_MAX)
    if not np.any(keep):
        return
    col = np.clip(((az[keep] + math.pi / 4.0) / (math.pi / 2.0) * w).astype(int), 0, w - 1)
    row = np.clip(((r[keep] - _VIEW_R_MIN) / (_VIEW_R_MAX - _VIEW_R_MIN) * h).astype(int), 0, h - 1)
    np.maximum.at(view, (row, col), value)


def rasterize_semantic_views(scene: Scene, h: int, w: int) -> np.ndarray:
    """(4, 3, H, W) semantic stacks: lane mask, agent mask, signal state."""
    sem = np.zeros((N_VIEWS, SEMANTIC_CHANNELS, h, w))
    lane_pts = []
    for line in scene.centerlines:
        n = max(2, int(polyline_length(line)) * 2)
        lane_pts.append(resample_polyline(line, n)[:, :2])
    lane_pts = np.vstack(lane_pts)
    agent_pts = None
    if scene.agents:
        agent_pts = np.vstack([
            np.vstack([box.footprint_corners(), np.array(box.center[:2])[None, :]])
            for box in scene.agents
        ])
    for v, yaw in enumerate(VIEW_YAWS):
        _splat(sem[v, 0], lane_pts, yaw)
        if agent_pts is not None:
            _splat(sem[v, 1], agent_pts, yaw)
    if scene.signal_state == "green":
        sem[0, 2, :, :] = 0.5
    elif scene.signal_state == "red":
        sem[0, 2, :, :] = 1.0
    return sem


def synth_view_features(scene: Scene, c_channels: int, h: int, w: int,
                        seed: int) -> ViewFeatureGrid:
    """Project the semantic rasters through a fixed seeded linear map."""
    sem = rasterize_semantic_views(scene, h, w)
    rng = np.random.default_rng([seed, _STREAM_VIEWS])
    proj = rng.uniform(-1.0, 1.0, (c_channels, SEMANTIC_CHANNELS)) / math.sqrt(SEMANTIC_CHANNELS)
    views = np.einsum("cs,vshw->vchw", proj, sem)
    return ViewFeatureGrid(views=views)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _box_to_obj(box: OrientedBox) -> dict:
    return {"center": list(box.center), "yaw": box.yaw, "extent": list(box.extent)}


def _box_from_obj(obj: dict) -> OrientedBox:
    return OrientedBox(center=tuple(obj["center"]), yaw=float(obj["yaw"]),
                       extent=tuple(obj["extent"]))


def scene_to_json(scene: Scene) -> bytes:
    obj = {
        "spec": {
            "seed": scene.spec.seed,
            "lane_count": scene.spec.lane_count,
            "geometry": scene.spec.geometry,
            "radius": scene.spec.radius,
            "lane_width": scene.spec.lane_width,
            "route_length": scene.spec.route_length,
            "agent_count": scene.spec.agent_count,
            "clutter_density": scene.spec.clutter_density,
            "traffic_signal": scene.spec.traffic_signal,
        },
        "centerlines": [line.tolist() for line in scene.centerlines],
        "lane_widths": list(scene.lane_widths),
        "agents": [_box_to_obj(b) for b in scene.agents],
        "clutter": [_box_to_obj(b) for b in scene.clutter],
        "route": {"start": list(scene.route_start), "target": list(scene.route_target),
                  "lane": scene.route_lane},
        "signal_state": scene.signal_state,
        "signal_line_s": scene.signal_line_s,
        "ground_truth": json.loads(serialize(scene.ground_truth).decode("utf-8")),
        "gt_speed": scene.gt_speed,
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def scene_from_json(data: bytes) -> Scene:
    obj = json.loads(data.decode("utf-8"))
    spec = SceneSpec(**obj["spec"])
    gt = deserialize(json.dumps(obj["ground_truth"]).encode("utf-8"))
    return Scene(
        spec=spec,
        centerlines=tuple(np.asarray(line, dtype=float) for line in obj["centerlines"]),
        lane_widths=tuple(obj["lane_widths"]),
        agents=tuple(_box_from_obj(b) for b in obj["agents"]),
        clutter=tuple(_box_from_obj(b) for b in obj["clutter"]),
        route_start=tuple(obj["route"]["start"]),
        route_target=tuple(obj["route"]["target"]),
        route_lane=int(obj["route"]["lane"]),
        signal_state=obj["signal_state"],
        signal_line_s=obj["signal_line_s"],
        ground_truth=gt,
        gt_speed=float(obj["gt_speed"]),
    )


_PC_MAGIC = b"LFPC"


def save_point_cloud(path: str | Path, cloud: PointCloud) -> None:
    """Little-endian binary: magic 'LFPC', u32 count, N x 3 float32."""
    pts = np.asarray(cloud.points, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_PC_MAGIC)
        fh.write(struct.pack("<I", pts.shape[0]))
        fh.write(pts.tobytes())


def load_point_cloud(path: str | Path) -> PointCloud:
    raw = Path(path).read_bytes()
    if raw[:4] != _PC_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    (count,) = struct.unpack("<I", raw[4:8])
    body = raw[8:]
    if len(body) != count * 12:
        raise ValueError(f"{path}: expected {count * 12} payload bytes, got {len(body)}")
    pts = np.frombuffer(body, dtype="<f4").reshape(count, 3).astype(float)
    return PointCloud(points=pts)
