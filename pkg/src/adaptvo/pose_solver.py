"""Motion-only pose estimation from pseudo-depth map points.

Map points are lifted from a (pseudo) depth map, and the relative camera
pose is found by Gauss-Newton on the SE(3) manifold minimizing the Huber-
robustified reprojection error. The reprojection residual depends on the
camera-frame point only through the ratios x/z and y/z, so a uniform
rescaling of all input depths rescales the solved translation and leaves
the rotation and residual values untouched; the stereo-style residual
(``residual_es``) deliberately lacks this property.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (BehindCameraError, CameraIntrinsics, DepthMap, MaskMap,
                       Pose, backproject, bilinear_sample)

HUBER_DELTA_PX = 1.0
MAX_ITERATIONS = 50
STEP_TOLERANCE = 1e-10
MAX_HALVINGS = 25
CONDITION_LIMIT = 1e12


class DegenerateGeometryError(ValueError):
    """The normal equations are singular (e.g. collinear points)."""


class NoMapPointsError(ValueError):
    """No pixel survived map-point initialization."""


@dataclass(frozen=True)
class MapPoint:
    """A 3-D point in world coordinates with its source pixel."""

    position: np.ndarray
    source_pixel: tuple
    frame_id: int = 0

    def __post_init__(self):
        p = np.ascontiguousarray(self.position, dtype=np.float64)
        if p.shape != (3,) or not np.all(np.isfinite(p)):
            raise ValueError("map point position must be a finite 3-vector")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "source_pixel",
                           (float(self.source_pixel[0]), float(self.source_pixel[1])))


def init_map_points(dense_depth: DepthMap, pixels, cam_from_world: Pose,
                    K: CameraIntrinsics, mask: MaskMap | None = None,
                    frame_id: int = 0) -> list[MapPoint]:
    """Lift pixels through the pseudo depth map into world map points:
    ``P_w = T^-1 backproject(p, D(p), K)`` with ``T = cam_from_world``.

    Depth is sampled bilinearly at (possibly fractional) pixels; pixels
    with invalid depth or a zero mask value are skipped. Raises
    :class:`NoMapPointsError` when nothing survives.
    """
    world_from_cam = cam_from_world.inverse()
    points = []
    for pix in pixels:
        u, v = float(pix[0]), float(pix[1])
        if mask is not None:
            mu = int(round(u))
            mv = int(round(v))
            if not (0 <= mu < mask.width and 0 <= mv < mask.height):
                continue
            if mask.values[mv, mu] == 0:
                continue
        d, ok = bilinear_sample(dense_depth.values, u, v,
                                valid=dense_depth.values > 0)
        if not bool(ok):
            continue
        p_cam = backproject((u, v), float(d), K)
        points.append(MapPoint(world_from_cam.apply(p_cam), (u, v), frame_id))
    if not points:
        raise NoMapPointsError("no valid map points could be initialized")
    return points


def residual_e(point: MapPoint, observation, pose: Pose,
               K: CameraIntrinsics) -> np.ndarray:
    """Reprojection residual ``p_uv - [fx x/z + cx, fy y/z + cy]``.

    Invariant to jointly rescaling the point and the pose translation.
    """
    x, y, z = pose.apply(point.position)
    if z <= 0:
        raise BehindCameraError(f"map point behind camera, z={z}")
    return np.array(
        [observation[0] - (K.fx * x / z + K.cx),
         observation[1] - (K.fy * y / z + K.cy)]
    )


def residual_es(point: MapPoint, observation, u_r: float, pose: Pose,
                K: CameraIntrinsics, baseline: float, scale: float) -> np.ndarray:
    """Stereo-style RGB-D residual with a virtual right view.

    The third component ``u_r - (fx (s x - b) / (s z) + cx)`` depends on the
    depth scale ``s`` (the baseline does not rescale with the map), which is
    exactly why the plain reprojection residual is used instead.
    """
    x, y, z = pose.apply(point.position)
    if z <= 0:
        raise BehindCameraError(f"map point behind camera, z={z}")
    return np.array(
        [
            observation[0] - (K.fx * x / z + K.cx),
            observation[1] - (K.fy * y / z + K.cy),
            u_r - (K.fx * (scale * x - baseline) / (scale * z) + K.cx),
        ]
    )


@dataclass(frozen=True)
class SolveReport:
    converged: bool
    iterations: int
    final_cost: float
    message: str = ""


def _huber_cost(norms: np.ndarray, delta: float) -> float:
    quad = norms <= delta
    cost = np.where(quad, 0.5 * norms**2, delta * (norms - 0.5 * delta))
    return float(np.sum(cost))


def _residuals(points_w: np.ndarray, obs: np.ndarray, pose: Pose,
               K: CameraIntrinsics):
    pc = pose.apply(points_w)
    z = pc[:, 2]
    bad = z <= 1e-12
    z_safe = np.where(bad, 1.0, z)
    proj = np.column_stack(
        [K.fx * pc[:, 0] / z_safe + K.cx, K.fy * pc[:, 1] / z_safe + K.cy]
    )
    e = obs - proj
    # points behind the camera get a large, constant penalty so the line
    # search backs away from them
    e[bad] = 1e6
    return e, pc, bad


def solve_pose(points: list[MapPoint], observations, initial_pose: Pose,
               K: CameraIntrinsics, huber_delta: float = HUBER_DELTA_PX,
               max_iterations: int = MAX_ITERATIONS,
               step_tolerance: float = STEP_TOLERANCE):
    """Gauss-Newton pose refinement with Huber weights and step halving.

    ``points`` live in the solver's world frame; the returned pose maps
    world to camera so that every observation is the projection of its
    point. Needs at least 6 non-degenerate point/observation pairs.

    Returns ``(Pose, SolveReport)``. Raises
    :class:`DegenerateGeometryError` when the 6x6 normal equations are
    numerically singular (condition number above ``1e12``).
    """
    pts = np.array([p.position for p in points], dtype=np.float64)
    obs = np.asarray(observations, dtype=np.float64).reshape(-1, 2)
    if len(pts) != len(obs):
        raise ValueError("one observation per map point required")
    if len(pts) < 6:
        raise ValueError(f"need at least 6 points, got {len(pts)}")

    pose = initial_pose
    e, pc, bad = _residuals(pts, obs, pose, K)
    cost = _huber_cost(np.linalg.norm(e, axis=1), huber_delta)
    accepted = 0
    message = "reached iteration limit"
    converged = False

    for _ in range(max_iterations):
        n = len(pts)
        norms = np.linalg.norm(e, axis=1)
        weights = np.where(norms <= huber_delta, 1.0,
                           huber_delta / np.maximum(norms, 1e-12))
        weights = np.where(bad, 0.0, weights)

        z = np.where(bad, 1.0, pc[:, 2])
        inv_z = 1.0 / z
        x, y = pc[:, 0], pc[:, 1]
        # d(projection)/d(P_c)
        dpi = np.zeros((n, 2, 3))
        dpi[:, 0, 0] = K.fx * inv_z
        dpi[:, 0, 2] = -K.fx * x * inv_z**2
        dpi[:, 1, 1] = K.fy * inv_z
        dpi[:, 1, 2] = -K.fy * y * inv_z**2
        # left-multiplicative tangent [w, rho]: dP_c = -[P_c]x w + rho
        dpc = np.zeros((n, 3, 6))
        dpc[:, 0, 1] = pc[:, 2]
        dpc[:, 0, 2] = -pc[:, 1]
        dpc[:, 1, 0] = -pc[:, 2]
        dpc[:, 1, 2] = pc[:, 0]
        dpc[:, 2, 0] = pc[:, 1]
        dpc[:, 2, 1] = -pc[:, 0]
        dpc[:, 0, 3] = dpc[:, 1, 4] = dpc[:, 2, 5] = 1.0
        J = -np.einsum("nij,njk->nik", dpi, dpc)  # residual = obs - proj

        wj = J * weights[:, None, None]
        H = np.einsum("nij,nik->jk", wj, J)
        g = np.einsum("nij,ni->j", wj, e)
        if not np.all(np.isfinite(H)) or np.linalg.cond(H) > CONDITION_LIMIT:
            raise DegenerateGeometryError(
                "normal equations are singular; point geometry is degenerate"
            )
        step = -np.linalg.solve(H, g)
        if np.linalg.norm(step) < step_tolerance:
            converged = True
            message = "step norm below tolerance"
            break

        # step halving keeps the robust cost non-increasing
        improved = False
        for _ in range(MAX_HALVINGS):
            candidate = Pose.exp(step).compose(pose)
            e_new, pc_new, bad_new = _residuals(pts, obs, candidate, K)
            cost_new = _huber_cost(np.linalg.norm(e_new, axis=1), huber_delta)
            if cost_new <= cost:
                improved = True
                break
            step = step / 2.0
        if not improved:
            converged = bool(np.linalg.norm(g) < 1e-9)
            message = "gradient vanished" if converged else "no cost-decreasing step found"
            break
        pose = candidate
        e, pc, bad = e_new, pc_new, bad_new
        cost = cost_new
        accepted += 1
    return pose, SolveReport(converged, accepted, cost, message)
