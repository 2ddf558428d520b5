"""Prediction heads over enhanced lane features and the full loss suite with
analytic gradients.

Conventions shared with the rest of the pipeline: point and flag arrays are
laid out (n_d, n_p, ...) with the first n_p/2 slots belonging to the left
edge and the rest to the right edge. Ground-truth lanes are assigned to
prediction slots by index; surplus prediction slots are unsupervised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .double_edge import DoubleEdgeSet, StructuralError, lanes_from_arrays, lanes_to_arrays
from .fusion import FeatureSet, ParamStore
from .pillar import LaneROI

__all__ = [
    "Predictions",
    "LossWeights",
    "LossConfig",
    "LossBreakdown",
    "GradCheckResult",
    "LOSS_NAMES",
    "heads_forward",
    "predictions_to_double_edge",
    "inject_ground_truth",
    "loss_roi",
    "loss_edge",
    "focal_loss",
    "smooth_l1",
    "cross_entropy",
    "loss_plan",
    "total_loss",
    "compute_losses",
    "grad_check",
]

LOSS_NAMES = ("roi", "edg", "int", "dir", "occ", "plan", "spd", "sig")

_SATURATED_LOGIT = 1e3  # drives logistic/softmax to exact 0/1 in float64


@dataclass(frozen=True)
class Predictions:
    points: np.ndarray  # (n_d, n_p, 3)
    int_logits: np.ndarray  # (n_d,)
    dir_logits: np.ndarray  # (n_d,)
    occ_logits: np.ndarray  # (n_d, n_p)
    plan_logits: np.ndarray  # (n_d, n_p)
    speed: float
    signal_logits: np.ndarray  # (n_classes,)


@dataclass(frozen=True)
class LossWeights:
    """Combination weights; defaults follow the 3:2:1:3:4:5:1:0.1 ratios."""

    gamma: float = 3.0  # roi
    delta: float = 2.0  # int
    epsilon: float = 1.0  # dir
    varepsilon: float = 3.0  # occ
    zeta: float = 4.0  # plan
    eta: float = 5.0  # edg
    theta: float = 1.0  # spd
    iota: float = 0.1  # sig

    def __post_init__(self):
        for name in ("gamma", "delta", "epsilon", "varepsilon", "zeta", "eta", "theta", "iota"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass(frozen=True)
class LossConfig:
    rho: float = 0.25
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    d_p2t_floor: float = 0.1

    def __post_init__(self):
        if self.rho < 0 or self.focal_gamma < 0 or self.d_p2t_floor <= 0:
            raise ValueError("invalid loss config")


@dataclass(frozen=True)
class LossBreakdown:
    roi: float
    edg: float
    int: float
    dir: float
    occ: float
    plan: float
    spd: float
    sig: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {"roi": self.roi, "edg": self.edg, "int": self.int, "dir": self.dir,
                "occ": self.occ, "plan": self.plan, "spd": self.spd, "sig": self.sig,
                "total": self.total}


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


def heads_forward(f_enhanced: FeatureSet, store: ParamStore) -> Predictions:
    """Affine prediction heads: per point for geometry/occ/plan, per lane
    (mean-pooled) for int/dir, global (mean-pooled) for speed and signal."""
    f = f_enhanced.features
    points = f @ store["head_pts.w"].T + store["head_pts.b"]
    occ = (f @ store["head_occ.w"].T + store["head_occ.b"])[..., 0]
    plan = (f @ store["head_plan.w"].T + store["head_plan.b"])[..., 0]
    lane_pool = f.mean(axis=1)
    int_logits = (lane_pool @ store["head_int.w"].T + store["head_int.b"])[:, 0]
    dir_logits = (lane_pool @ store["head_dir.w"].T + store["head_dir.b"])[:, 0]
    g = f.mean(axis=(0, 1))
    speed = float((store["head_spd.w"] @ g + store["head_spd.b"])[0])
    signal = store["head_sig.w"] @ g + store["head_sig.b"]
    return Predictions(points=points, int_logits=int_logits, dir_logits=dir_logits,
                       occ_logits=occ, plan_logits=plan, speed=speed, signal_logits=signal)


def predictions_to_double_edge(pred: Predictions) -> DoubleEdgeSet:
    """Threshold flag logits at 0 and assemble the predicted lane set."""
    occ = (pred.occ_logits > 0).astype(np.int64)
    plan = (pred.plan_logits > 0).astype(np.int64)
    intr = (pred.int_logits > 0).astype(np.int64)
    dire = (pred.dir_logits > 0).astype(np.int64)
    return lanes_from_arrays(pred.points, occ, plan, intr, dire)


def inject_ground_truth(gt: DoubleEdgeSet, gt_speed: float, gt_signal_class: int,
                        n_d: int, n_signal_classes: int = 3) -> tuple[Predictions, LaneROI]:
    """Predictions that reproduce the ground truth exactly (saturated logits),
    plus the matching ROI. Surplus lane slots are pushed to all-negative."""
    arrs = lanes_to_arrays(gt)
    n_gt, n_p = arrs["occ"].shape
    if n_gt > n_d:
        raise StructuralError(f"{n_gt} ground-truth lanes exceed {n_d} slots")
    points = np.zeros((n_d, n_p, 3))
    points[:n_gt] = arrs["points"]
    occ = np.full((n_d, n_p), -_SATURATED_LOGIT)
    plan = np.full((n_d, n_p), -_SATURATED_LOGIT)
    intr = np.full(n_d, -_SATURATED_LOGIT)
    dire = np.full(n_d, -_SATURATED_LOGIT)
    occ[:n_gt] = np.where(arrs["occ"] == 1, _SATURATED_LOGIT, -_SATURATED_LOGIT)
    plan[:n_gt] = np.where(arrs["plan"] == 1, _SATURATED_LOGIT, -_SATURATED_LOGIT)
    intr[:n_gt] = np.where(arrs["intersection"] == 1, _SATURATED_LOGIT, -_SATURATED_LOGIT)
    dire[:n_gt] = np.where(arrs["direction"] == 1, _SATURATED_LOGIT, -_SATURATED_LOGIT)
    signal = np.full(n_signal_classes, -_SATURATED_LOGIT)
    signal[gt_signal_class] = _SATURATED_LOGIT
    pred = Predictions(points=points, int_logits=intr, dir_logits=dire, occ_logits=occ,
                       plan_logits=plan, speed=float(gt_speed), signal_logits=signal)
    roi = np.zeros((n_d, n_p, 3))
    roi[:n_gt] = arrs["points"]
    return pred, LaneROI(points=roi)


# ---------------------------------------------------------------------------
# scalar helpers
# ---------------------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce_with_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Elementwise binary cross-entropy in nats, numerically stable."""
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


def _gt_slice(pred: np.ndarray, gt_points: np.ndarray) -> np.ndarray:
    n_gt = gt_points.shape[0]
    if pred.shape[0] < n_gt or pred.shape[1:] != gt_points.shape[1:]:
        raise StructuralError(
            f"prediction shape {pred.shape} incompatible with ground truth {gt_points.shape}"
        )
    return pred[:n_gt]


# ---------------------------------------------------------------------------
# losses; each *_grad variant returns (value, d value / d first argument)
# ---------------------------------------------------------------------------


def _roi_core(pred_roi: np.ndarray, gt: DoubleEdgeSet) -> tuple[float, np.ndarray]:
    arrs = lanes_to_arrays(gt)
    gt_pts = arrs["points"]
    n_gt = gt_pts.shape[0]
    res = _gt_slice(pred_roi, gt_pts) - gt_pts
    value = float(np.abs(res).sum() / n_gt)
    grad = np.zeros_like(pred_roi)
    grad[:n_gt] = np.sign(res) / n_gt
    return value, grad


def loss_roi(pred_roi: LaneROI | np.ndarray, gt: DoubleEdgeSet) -> float:
    """Mean over ground-truth lanes of the summed Manhattan mismatch between
    predicted and true boundary points (both edges)."""
    pts = pred_roi.points if isinstance(pred_roi, LaneROI) else np.asarray(pred_roi, float)
    return _roi_core(pts, gt)[0]


def _edge_core(pred_points: np.ndarray, gt: DoubleEdgeSet) -> tuple[float, np.ndarray]:
    arrs = lanes_to_arrays(gt)
    gt_pts = arrs["points"]
    n_gt, n_p, _ = gt_pts.shape
    res = _gt_slice(pred_points, gt_pts) - gt_pts
    denom = n_gt * n_p
    value = float(np.abs(res).sum() / denom)
    grad = np.zeros_like(pred_points)
    grad[:n_gt] = np.sign(res) / denom
    return value, grad


def loss_edge(pred_points: np.ndarray, gt: DoubleEdgeSet) -> float:
    """Mean Manhattan distance between predicted and true edge points."""
    return _edge_core(np.asarray(pred_points, dtype=float), gt)[0]


def _focal_core(logits: np.ndarray, targets: np.ndarray,
                cfg: LossConfig) -> tuple[float, np.ndarray]:
    z = np.asarray(logits, dtype=float)
    y = np.asarray(targets, dtype=float)
    p = _sigmoid(z)
    p_t = y * p + (1.0 - y) * (1.0 - p)
    alpha_t = y * cfg.focal_alpha + (1.0 - y) * (1.0 - cfg.focal_alpha)
    one_m = 1.0 - p_t
    with np.errstate(divide="ignore"):
        log_pt = np.log(p_t)
    elem = -alpha_t * one_m ** cfg.focal_gamma * log_pt
    elem = np.where(p_t == 1.0, 0.0, elem)  # modulating factor kills the 0*inf corner
    value = float(elem.mean())
    # dL/dp_t, then chain through dp_t/dz = p(1-p)(2y-1)
    g = cfg.focal_gamma
    with np.errstate(divide="ignore", invalid="ignore"):
        pow_gm1 = np.where(one_m > 0.0, one_m ** (g - 1.0), 0.0)
    term = np.where((g > 0) & (one_m > 0.0), -g * pow_gm1 * log_pt, 0.0)
    safe_pt = np.where(p_t <= 0.0, 1.0, p_t)
    dldpt = -alpha_t * (term + one_m ** g / safe_pt)
    dptdz = p * (1.0 - p) * (2.0 * y - 1.0)
    grad = dldpt * dptdz / z.size
    return value, grad


def focal_loss(logits: np.ndarray, targets: np.ndarray, cfg: LossConfig) -> float:
    """Mean focal loss over elements, logits squashed through the logistic."""
    return _focal_core(logits, targets, cfg)[0]


def _smooth_l1_core(pred: float, gt: float) -> tuple[float, float]:
    d = pred - gt
    if abs(d) < 1.0:
        return 0.5 * d * d, d
    return abs(d) - 0.5, math.copysign(1.0, d)


def smooth_l1(pred_speed: float, gt_speed: float) -> float:
    return _smooth_l1_core(float(pred_speed), float(gt_speed))[0]


def _cross_entropy_core(logits: np.ndarray, gt_class: int) -> tuple[float, np.ndarray]:
    z = np.asarray(logits, dtype=float)
    if not 0 <= gt_class < z.shape[0]:
        raise IndexError(f"class {gt_class} out of range for {z.shape[0]} logits")
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    value = float(lse - z[gt_class])
    softmax = np.exp(z - lse)
    grad = softmax.copy()
    grad[gt_class] -= 1.0
    return value, grad


def cross_entropy(signal_logits: np.ndarray, gt_class: int) -> float:
    return _cross_entropy_core(signal_logits, gt_class)[0]


def _plan_core(plan_logits: np.ndarray, gt: DoubleEdgeSet, target_point: np.ndarray,
               cfg: LossConfig) -> tuple[float, np.ndarray]:
    arrs = lanes_to_arrays(gt)
    gt_pts = arrs["points"]
    y = arrs["plan"].astype(float)
    n_gt, n_p, _ = gt_pts.shape
    z = _gt_slice(np.asarray(plan_logits, dtype=float), y)
    target = np.asarray(target_point, dtype=float)
    d = np.linalg.norm(gt_pts - target, axis=2)
    d = np.maximum(d, cfg.d_p2t_floor)
    u = _bce_with_logits(z, y)
    em = np.exp(-u)
    mod = cfg.rho * (1.0 - em)
    term = mod ** 2 * u / d
    # each point pair contributes the mean of its left/right edge terms
    value = float(term.sum() / 2.0)
    dterm_du = cfg.rho ** 2 * (2.0 * (1.0 - em) * em * u + (1.0 - em) ** 2) / d
    du_dz = _sigmoid(z) - y
    grad = np.zeros_like(np.asarray(plan_logits, dtype=float))
    grad[:n_gt] = dterm_du * du_dz / 2.0
    return value, grad


def loss_plan(plan_logits: np.ndarray, gt: DoubleEdgeSet, target_point: np.ndarray,
              cfg: LossConfig) -> float:
    """Plan-flag loss: per edge point, a saturating modulation of the binary
    cross-entropy divided by that point's (floored) distance to the target,
    summed over lanes and indices with left/right terms averaged."""
    return _plan_core(plan_logits, gt, target_point, cfg)[0]


def total_loss(components: Mapping[str, float], weights: LossWeights) -> LossBreakdown:
    """Linear combination of the eight component losses."""
    missing = [n for n in LOSS_NAMES if n not in components]
    if missing:
        raise KeyError(f"missing loss components: {missing}")
    c = components
    total = (weights.gamma * c["roi"] + weights.delta * c["int"]
             + weights.epsilon * c["dir"] + weights.varepsilon * c["occ"]
             + weights.zeta * c["plan"] + weights.eta * c["edg"]
             + weights.theta * c["spd"] + weights.iota * c["sig"])
    return LossBreakdown(roi=c["roi"], edg=c["edg"], int=c["int"], dir=c["dir"],
                         occ=c["occ"], plan=c["plan"], spd=c["spd"], sig=c["sig"],
                         total=total)


def compute_losses(pred: Predictions, pred_roi: LaneROI, gt: DoubleEdgeSet,
                   target_point: np.ndarray, gt_speed: float, gt_signal_class: int,
                   cfg: LossConfig, weights: LossWeights) -> LossBreakdown:
    """All components against ground truth, combined per the weight ratios."""
    arrs = lanes_to_arrays(gt)
    n_gt = arrs["points"].shape[0]
    components = {
        "roi": loss_roi(pred_roi, gt),
        "edg": loss_edge(pred.points, gt),
        "int": focal_loss(pred.int_logits[:n_gt], arrs["intersection"], cfg),
        "dir": focal_loss(pred.dir_logits[:n_gt], arrs["direction"], cfg),
        "occ": focal_loss(pred.occ_logits[:n_gt], arrs["occ"], cfg),
        "plan": loss_plan(pred.plan_logits, gt, target_point, cfg),
        "spd": smooth_l1(pred.speed, gt_speed),
        "sig": cross_entropy(pred.signal_logits, gt_signal_class),
    }
    return total_loss(components, weights)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckResult:
    loss_name: str
    max_rel_err: float
    resampled: int  # points rejected as too close to a non-differentiable spot


def _random_lane_set(rng: np.random.Generator, n_gt: int, n_p: int) -> DoubleEdgeSet:
    points = rng.uniform(-20.0, 20.0, (n_gt, n_p, 3))
    occ = rng.integers(0, 2, (n_gt, n_p))
    plan = rng.integers(0, 2, (n_gt, n_p))
    intr = rng.integers(0, 2, n_gt)
    dire = rng.integers(0, 2, n_gt)
    return lanes_from_arrays(points, occ, plan, intr, dire)


def _grad_case(loss_name: str, rng: np.random.Generator,
               cfg: LossConfig) -> tuple[Callable[[np.ndarray], tuple[float, np.ndarray]], np.ndarray, bool]:
    """Build (fn, x0, degenerate_flag) for one randomized check point."""
    n_gt, n_d, n_p = 3, 4, 8
    if loss_name in ("roi", "edg"):
        gt = _random_lane_set(rng, n_gt, n_p)
        base = lanes_to_arrays(gt)["points"]
        x0 = np.zeros((n_d, n_p, 3))
        x0[:n_gt] = base + rng.uniform(0.1, 1.5, base.shape) * rng.choice([-1.0, 1.0], base.shape)
        x0[n_gt:] = rng.uniform(-5.0, 5.0, (n_d - n_gt, n_p, 3))
        core = _roi_core if loss_name == "roi" else _edge_core
        return (lambda x: core(x, gt)), x0, False
    if loss_name in ("int", "dir"):
        y = rng.integers(0, 2, n_gt)
        x0 = rng.uniform(-3.0, 3.0, n_gt)
        return (lambda x: _focal_core(x, y, cfg)), x0, False
    if loss_name == "occ":
        y = rng.integers(0, 2, (n_gt, n_p))
        x0 = rng.uniform(-3.0, 3.0, (n_gt, n_p))
        return (lambda x: _focal_core(x, y, cfg)), x0, False
    if loss_name == "plan":
        gt = _random_lane_set(rng, n_gt, n_p)
        target = rng.uniform(-20.0, 20.0, 3)
        x0 = rng.uniform(-3.0, 3.0, (n_d, n_p))
        return (lambda x: _plan_core(x, gt, target, cfg)), x0, False
    if loss_name == "spd":
        gt_speed = rng.uniform(0.0, 15.0)
        d = rng.uniform(-3.0, 3.0)
        degenerate = abs(abs(d) - 1.0) < 0.05
        x0 = np.array([gt_speed + d])

        def fn(x):
            v, g = _smooth_l1_core(float(x[0]), gt_speed)
            return v, np.array([g])

        return fn, x0, degenerate
    if loss_name == "sig":
        n_cls = 3
        k = int(rng.integers(0, n_cls))
        x0 = rng.uniform(-3.0, 3.0, n_cls)
        return (lambda x: _cross_entropy_core(x, k)), x0, False
    raise KeyError(f"unknown loss {loss_name!r}")


def grad_check(loss_name: str, seed: int = 0, points: int = 100, step: float = 1e-5,
               coords: int = 10, cfg: LossConfig | None = None,
               corrupt: bool = False) -> GradCheckResult:
    """Compare analytic gradients against central finite differences at
    randomized non-degenerate points; returns the max relative error over the
    sampled coordinates. ``corrupt`` deliberately skews the analytic side
    (negative-control hook for the CLI)."""
    if step <= 0:
        raise ValueError("step must be > 0")
    if loss_name not in LOSS_NAMES:
        raise KeyError(f"unknown loss {loss_name!r}")
    cfg = cfg or LossConfig()
    rng = np.random.default_rng([seed, LOSS_NAMES.index(loss_name)])
    max_err = 0.0
    resampled = 0
    done = 0
    while done < points:
        fn, x0, degenerate = _grad_case(loss_name, rng, cfg)
        if degenerate:
            resampled += 1
            continue
        _, grad = fn(x0)
        if corrupt:
            grad = grad * 1.5 + 1e-3
        flat = x0.ravel()
        n_coords = min(coords, flat.size)
        picks = rng.choice(flat.size, size=n_coords, replace=False)
        for idx in picks:
            xp = flat.copy()
            xm = flat.copy()
            xp[idx] += step
            xm[idx] -= step
            fp, _ = fn(xp.reshape(x0.shape))
            fm, _ = fn(xm.reshape(x0.shape))
            fd = (fp - fm) / (2.0 * step)
            a = float(grad.ravel()[idx])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            max_err = max(max_err, float(err))
        done += 1
    return GradCheckResult(loss_name=loss_name, max_rel_err=max_err, resampled=resampled)
