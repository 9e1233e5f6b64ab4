"""Depth and trajectory evaluation metrics.

Depth errors follow the standard monocular protocol: mean-ratio scale
alignment first, then AbsRel / SqRel / RMSE and the 1.25^i accuracy
thresholds over common valid pixels (ground truth beyond a configurable cap
is excluded). Trajectories are similarity-aligned (rotation, translation,
scale) before the absolute error, and relative drift is averaged over
fixed-length sub-trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import DepthMap, Pose, Trajectory

DEFAULT_DEPTH_CAP = 80.0
DEFAULT_SEGMENT_LENGTHS = (2.0, 4.0, 6.0, 8.0)


class NoCommonPixelsError(ValueError):
    """Prediction and ground truth share no valid pixel."""


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    delta1: float
    delta2: float
    delta3: float

    def as_dict(self) -> dict:
        return {
            "abs_rel": self.abs_rel,
            "sq_rel": self.sq_rel,
            "rmse": self.rmse,
            "delta1": self.delta1,
            "delta2": self.delta2,
            "delta3": self.delta3,
        }


@dataclass(frozen=True)
class TrajectoryMetrics:
    ate_rmse: float            # meters, after similarity alignment
    t_rel_percent: float       # translational drift, percent of length
    r_rel_deg_per_100m: float  # rotational drift

    def as_dict(self) -> dict:
        return {
            "ate_rmse": self.ate_rmse,
            "t_rel_percent": self.t_rel_percent,
            "r_rel_deg_per_100m": self.r_rel_deg_per_100m,
        }


def _common_valid(pred: DepthMap, gt: DepthMap, max_depth: float) -> np.ndarray:
    if pred.values.shape != gt.values.shape:
        raise ValueError("depth map dimensions must match")
    return pred.valid & gt.valid & (gt.values <= max_depth)


def align_scale(pred: DepthMap, gt: DepthMap,
                max_depth: float = DEFAULT_DEPTH_CAP) -> float:
    """Mean-ratio scale factor ``mean(gt) / mean(pred)`` over common valid
    pixels; multiply the prediction by it before computing errors."""
    common = _common_valid(pred, gt, max_depth)
    if not np.any(common):
        raise NoCommonPixelsError("no commonly valid pixels for scale alignment")
    return float(np.mean(gt.values[common]) / np.mean(pred.values[common]))


def depth_metrics(pred: DepthMap, gt: DepthMap,
                  max_depth: float = DEFAULT_DEPTH_CAP) -> DepthMetrics:
    """Error and accuracy metrics over common valid pixels (no alignment
    applied here; call :func:`align_scale` first for monocular outputs)."""
    common = _common_valid(pred, gt, max_depth)
    if not np.any(common):
        raise NoCommonPixelsError("no commonly valid pixels for evaluation")
    p = pred.values[common]
    g = gt.values[common]
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )


def evaluate_depth(pred: DepthMap, gt: DepthMap,
                   max_depth: float = DEFAULT_DEPTH_CAP) -> DepthMetrics:
    """Scale-align then score; the standard monocular evaluation call."""
    s = align_scale(pred, gt, max_depth)
    return depth_metrics(DepthMap(pred.values * s), gt, max_depth)


# ---------------------------------------------------------------------------
# trajectories


def umeyama_alignment(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Least-squares similarity transform aligning ``src`` onto ``dst``.

    Returns ``(s, R, t)`` with ``dst ~ s * R @ src + t``.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("point sets must both be (n, 3)")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    sgn = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sgn[2, 2] = -1.0
    R = u @ sgn @ vt
    var_s = np.mean(np.sum(xs**2, axis=1))
    if with_scale and var_s > 0:
        s = float(np.trace(np.diag(d) @ sgn) / var_s)
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def _path_lengths(positions: np.ndarray) -> np.ndarray:
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def trajectory_metrics(est: Trajectory, gt: Trajectory,
                       segment_lengths=DEFAULT_SEGMENT_LENGTHS) -> TrajectoryMetrics:
    """ATE RMSE after similarity alignment plus average relative drift.

    Drift is measured per ground-truth sub-trajectory of each requested
    length: translation error of the relative motion as a percentage of
    segment length, rotation error in degrees per 100 length units. The
    estimate's global scale is corrected by the alignment before drift is
    computed (relative errors are invariant to the global rotation and
    translation).
    """
    if len(est) != len(gt):
        raise ValueError("trajectories must have equal length")
    if len(est) < 2:
        raise ValueError("need at least two poses")
    if list(est.timestamps) != list(gt.timestamps):
        raise ValueError("trajectory timestamps do not match")

    p_est = est.positions()
    p_gt = gt.positions()
    s, R, t = umeyama_alignment(p_est, p_gt)
    aligned_positions = (s * (R @ p_est.T)).T + t
    ate = float(np.sqrt(np.mean(np.sum((aligned_positions - p_gt) ** 2, axis=1))))

    est_scaled = [Pose(p.rotation, s * p.translation) for p in est.poses]
    dist = _path_lengths(p_gt)
    t_errs, r_errs = [], []
    for seg_len in segment_lengths:
        for i in range(len(gt)):
            target = dist[i] + seg_len
            j = int(np.searchsorted(dist, target))
            if j >= len(gt):
                break
            actual = dist[j] - dist[i]
            if actual <= 0:
                continue
            rel_gt = gt.poses[i].inverse().compose(gt.poses[j])
            rel_est = est_scaled[i].inverse().compose(est_scaled[j])
            err = rel_gt.inverse().compose(rel_est)
            t_errs.append(np.linalg.norm(err.translation) / actual * 100.0)
            angle = np.degrees(
                np.arccos(np.clip((np.trace(err.rotation) - 1.0) / 2.0, -1.0, 1.0))
            )
            r_errs.append(angle / actual * 100.0)
    if not t_errs:
        raise ValueError("trajectory shorter than every requested segment length")
    return TrajectoryMetrics(ate, float(np.mean(t_errs)), float(np.mean(r_errs)))
