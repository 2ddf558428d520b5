"""LiDAR grid encodings: dense voxel counting, height-adjusted pillars over a
2D ground grid, nearest-pillar sampling around lane priors, and the small
affine pillar feature encoder.

Pillars carry a fixed 9-channel raw feature vector:
[count, centroid x, centroid y, centroid z, z_min, z_max,
 centroid offset x from cell center, offset y, placeholder 0].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scene_synth import PointCloud

__all__ = [
    "GridSpec",
    "PillarSet",
    "LanePillarSet",
    "LaneROI",
    "LaneWeights",
    "RAW_FEATURE_DIM",
    "voxelize",
    "pillarize",
    "lane_sample",
    "encode_pillars",
    "feature_count_report",
]

RAW_FEATURE_DIM = 9


@dataclass(frozen=True)
class GridSpec:
    """Grid resolution (dx, dy, dz) and axis-aligned bounds, meters."""

    resolution: tuple[float, float, float]
    bounds_min: tuple[float, float, float]
    bounds_max: tuple[float, float, float]

    def __post_init__(self):
        if any(r <= 0 for r in self.resolution):
            raise ValueError(f"grid resolution must be positive, got {self.resolution}")
        if any(hi <= lo for lo, hi in zip(self.bounds_min, self.bounds_max)):
            raise ValueError(
                f"degenerate bounds {self.bounds_min}..{self.bounds_max}"
            )

    def cell_center_xy(self, ix: int, iy: int) -> tuple[float, float]:
        return (
            self.bounds_min[0] + (ix + 0.5) * self.resolution[0],
            self.bounds_min[1] + (iy + 0.5) * self.resolution[1],
        )


@dataclass(frozen=True)
class PillarSet:
    """Sparse 2D grid cells: (ix, iy) -> member point indices + raw features."""

    spec: GridSpec
    cells: dict[tuple[int, int], np.ndarray]  # member point indices
    features: dict[tuple[int, int], np.ndarray]  # (RAW_FEATURE_DIM,)

    def __len__(self) -> int:
        return len(self.cells)


@dataclass(frozen=True)
class LaneROI:
    """Coarse lane boundary estimates, (n_d, n_p, 3), ego frame meters."""

    points: np.ndarray


@dataclass(frozen=True)
class LaneWeights:
    """Per-lane confidence in [0, 1], shape (n_d,)."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or np.any(w < 0.0) or np.any(w > 1.0):
            raise ValueError("lane weights must be a 1D array within [0, 1]")


@dataclass(frozen=True)
class LanePillarSet:
    """Exactly n_d x n_p sampled pillars; empty slots hold all-zero features."""

    features: np.ndarray  # (n_d, n_p, RAW_FEATURE_DIM)
    empty: np.ndarray  # (n_d, n_p) bool
    source_cells: np.ndarray  # (n_d, n_p, 2) int, -1 where empty


def _in_bounds_mask(pts: np.ndarray, spec: GridSpec) -> np.ndarray:
    lo = np.array(spec.bounds_min)
    hi = np.array(spec.bounds_max)
    return np.all((pts >= lo) & (pts < hi), axis=1)


def voxelize(cloud: PointCloud, spec: GridSpec) -> tuple[int, dict[tuple[int, int, int], np.ndarray]]:
    """Count occupied voxels and compute per-voxel (count, centroid) features.

    Points outside the bounds are discarded; a voxel is occupied when it
    contains at least one point.
    """
    pts = np.asarray(cloud.points, dtype=float)
    if pts.size == 0:
        return 0, {}
    pts = pts[_in_bounds_mask(pts, spec)]
    if pts.size == 0:
        return 0, {}
    res = np.array(spec.resolution)
    idx = np.floor((pts - np.array(spec.bounds_min)) / res).astype(np.int64)
    # scalar cell keys sort far faster than row-wise unique
    ky = int(idx[:, 1].max()) + 1
    kz = int(idx[:, 2].max()) + 1
    keys = (idx[:, 0] * ky + idx[:, 1]) * kz + idx[:, 2]
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    uniq = idx[first]
    inverse = inverse.ravel()
    counts = np.bincount(inverse, minlength=len(uniq)).astype(float)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, pts)
    mat = np.column_stack([counts, sums / counts[:, None]])
    feats = {(int(k[0]), int(k[1]), int(k[2])): mat[i] for i, k in enumerate(uniq)}
    return len(uniq), feats


def pillarize(cloud: PointCloud, spec: GridSpec) -> PillarSet:
    """Group points into one vertical pillar per occupied (ix, iy) cell.

    Requires dz to span the whole z range (a single z bin); the pillar's
    z extent is taken from its member points, not the grid.
    """
    dz = spec.resolution[2]
    zspan = spec.bounds_max[2] - spec.bounds_min[2]
    if not math.isclose(dz, zspan, rel_tol=1e-9):
        raise ValueError(f"pillar grid needs a single z bin: dz={dz}, z span={zspan}")
    pts = np.asarray(cloud.points, dtype=float)
    cells: dict[tuple[int, int], np.ndarray] = {}
    features: dict[tuple[int, int], np.ndarray] = {}
    if pts.size:
        keep = np.flatnonzero(_in_bounds_mask(pts, spec))
        if keep.size:
            kept = pts[keep]
            res = np.array(spec.resolution[:2])
            idx = np.floor((kept[:, :2] - np.array(spec.bounds_min[:2])) / res).astype(np.int64)
            ky = int(idx[:, 1].max()) + 1
            keys = idx[:, 0] * ky + idx[:, 1]
            _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
            uniq = idx[first]
            inverse = inverse.ravel()
            counts = np.bincount(inverse, minlength=len(uniq)).astype(float)
            sums = np.zeros((len(uniq), 3))
            np.add.at(sums, inverse, kept)
            centroids = sums / counts[:, None]
            zmin = np.full(len(uniq), np.inf)
            zmax = np.full(len(uniq), -np.inf)
            np.minimum.at(zmin, inverse, kept[:, 2])
            np.maximum.at(zmax, inverse, kept[:, 2])
            centers = (np.array(spec.bounds_min[:2])
                       + (uniq + 0.5) * np.array(spec.resolution[:2]))
            mat = np.column_stack([
                counts, centroids, zmin, zmax,
                centroids[:, :2] - centers, np.zeros(len(uniq)),
            ])
            order = np.argsort(inverse, kind="stable")
            sorted_members = keep[order]
            bounds = np.concatenate([[0], np.cumsum(np.bincount(inverse))])
            for k in range(len(uniq)):
                key = (int(uniq[k, 0]), int(uniq[k, 1]))
                features[key] = mat[k]
                cells[key] = sorted_members[bounds[k]:bounds[k + 1]]
    return PillarSet(spec=spec, cells=cells, features=features)


def lane_sample(pillars: PillarSet, roi: LaneROI, r_max: float = 2.0) -> LanePillarSet:
    """Pick, for every ROI point, the pillar whose cell center is nearest in
    the ground plane; beyond ``r_max`` an empty zero pillar is emitted.

    Ties break toward the lexicographically smaller (ix, iy). The output
    always has exactly n_d x n_p entries, whatever the cloud contained.
    """
    if r_max <= 0:
        raise ValueError(f"r_max must be > 0, got {r_max}")
    spec = pillars.spec
    dx, dy = spec.resolution[0], spec.resolution[1]
    pts = np.asarray(roi.points, dtype=float)
    n_d, n_p, _ = pts.shape
    feats = np.zeros((n_d, n_p, RAW_FEATURE_DIM))
    empty = np.ones((n_d, n_p), dtype=bool)
    source = np.full((n_d, n_p, 2), -1, dtype=np.int64)
    if not pillars.cells:
        return LanePillarSet(features=feats, empty=empty, source_cells=source)

    max_ring = int(math.ceil(r_max / min(dx, dy))) + 1
    x0, y0 = spec.bounds_min[0], spec.bounds_min[1]

    for i in range(n_d):
        for j in range(n_p):
            px, py = pts[i, j, 0], pts[i, j, 1]
            cx = int(math.floor((px - x0) / dx))
            cy = int(math.floor((py - y0) / dy))
            best: tuple[float, int, int] | None = None
            for ring in range(max_ring + 1):
                if best is not None:
                    # Closest possible center in this ring; stop once it
                    # cannot beat the incumbent.
                    ring_floor = (ring - 1) * min(dx, dy) if ring > 0 else 0.0
                    if ring_floor > math.sqrt(best[0]):
                        break
                if ring == 0:
                    candidates = [(cx, cy)]
                else:
                    candidates = []
                    for ox in range(-ring, ring + 1):
                        for oy in range(-ring, ring + 1):
                            if max(abs(ox), abs(oy)) == ring:
                                candidates.append((cx + ox, cy + oy))
                for key in candidates:
                    if key not in pillars.cells:
                        continue
                    ccx, ccy = spec.cell_center_xy(*key)
                    d2 = (ccx - px) ** 2 + (ccy - py) ** 2
                    cand = (d2, key[0], key[1])
                    if best is None or cand < best:
                        best = cand
            if best is not None and best[0] <= r_max * r_max:
                key = (best[1], best[2])
                feats[i, j] = pillars.features[key]
                empty[i, j] = False
                source[i, j] = key
    return LanePillarSet(features=feats, empty=empty, source_cells=source)


def encode_pillars(lane_pillars: LanePillarSet, weight: np.ndarray,
                   bias: np.ndarray) -> np.ndarray:
    """Affine + ReLU encoding of raw pillar features to (n_d, n_p, C);
    empty pillars map to the zero feature regardless of the bias."""
    w = np.asarray(weight, dtype=float)
    b = np.asarray(bias, dtype=float)
    out = np.maximum(lane_pillars.features @ w.T + b, 0.0)
    out[lane_pillars.empty] = 0.0
    return out


def feature_count_report(cloud: PointCloud, roi: LaneROI, voxel_spec: GridSpec,
                         pillar_spec: GridSpec) -> dict[str, float]:
    """Feature counts for the three LiDAR encodings plus reduction ratios.

    The lane-level count is n_d x n_p by construction; ratios are dense
    count over lane-level count.
    """
    n_d, n_p = roi.points.shape[0], roi.points.shape[1]
    voxel_count, _ = voxelize(cloud, voxel_spec)
    pillars = pillarize(cloud, pillar_spec)
    lane_level = n_d * n_p
    return {
        "voxel_count": float(voxel_count),
        "pillar_count": float(len(pillars)),
        "lane_level_count": float(lane_level),
        "ratio_voxel": voxel_count / lane_level if lane_level else math.inf,
        "ratio_pillar": len(pillars) / lane_level if lane_level else math.inf,
    }
