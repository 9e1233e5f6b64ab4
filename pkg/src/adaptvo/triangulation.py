"""Two-view triangulation of matched pixels into sparse depth samples.

The triangulated point is the midpoint of the common-perpendicular segment
between the two viewing rays, i.e. the minimizer of the summed squared
distances to both rays. Depths are reported in the second (frame-b) camera.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, Pose


class DegenerateRayError(ValueError):
    """The two viewing rays are (numerically) parallel."""


class CheiralityError(ValueError):
    """The triangulated point lies behind one of the cameras."""


class EmptySparseDepthError(ValueError):
    """No match survived triangulation."""


MIN_RAY_ANGLE = 1e-6  # radians


@dataclass(frozen=True)
class CorrespondenceSet:
    """Matched pixels between frame a (earlier) and frame b (later)."""

    frame_a: int
    frame_b: int
    pixels_a: np.ndarray  # (n, 2) float
    pixels_b: np.ndarray  # (n, 2) float
    weights: np.ndarray | None = None

    def __post_init__(self):
        pa = np.ascontiguousarray(self.pixels_a, dtype=np.float64).reshape(-1, 2)
        pb = np.ascontiguousarray(self.pixels_b, dtype=np.float64).reshape(-1, 2)
        if pa.shape != pb.shape:
            raise ValueError("pixels_a and pixels_b must have the same length")
        object.__setattr__(self, "pixels_a", pa)
        object.__setattr__(self, "pixels_b", pb)
        if self.weights is not None:
            w = np.ascontiguousarray(self.weights, dtype=np.float64)
            if w.shape != (len(pa),):
                raise ValueError("weights must be one scalar per match")
            object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.pixels_a)


@dataclass(frozen=True)
class SparseDepth:
    """Pixel-indexed triangulated depth samples for one frame."""

    frame_id: int
    pixels: np.ndarray  # (n, 2) float
    depths: np.ndarray  # (n,) meters, > 0

    def __post_init__(self):
        p = np.ascontiguousarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        d = np.ascontiguousarray(self.depths, dtype=np.float64)
        if d.shape != (len(p),):
            raise ValueError("one depth per pixel required")
        if np.any(d <= 0) or not np.all(np.isfinite(d)):
            raise ValueError("sparse depths must be positive and finite")
        object.__setattr__(self, "pixels", p)
        object.__setattr__(self, "depths", d)

    def __len__(self) -> int:
        return len(self.depths)


def _ray_direction(pixel, K: CameraIntrinsics) -> np.ndarray:
    return np.array([(pixel[0] - K.cx) / K.fx, (pixel[1] - K.cy) / K.fy, 1.0])


def triangulate_two_view(match, pose_a_to_b: Pose, K: CameraIntrinsics) -> np.ndarray:
    """Triangulate one (pixel_a, pixel_b) match; returns the common-
    perpendicular midpoint in frame-b camera coordinates.

    Raises :class:`DegenerateRayError` when the rays subtend less than
    ``MIN_RAY_ANGLE`` and :class:`CheiralityError` when the point falls
    behind either camera.
    """
    pixel_a, pixel_b = match
    # both rays expressed in frame b: camera a sits at pose_a_to_b(0)
    d_a = pose_a_to_b.rotation @ _ray_direction(pixel_a, K)
    d_b = _ray_direction(pixel_b, K)
    o_a = pose_a_to_b.translation
    ua = d_a / np.linalg.norm(d_a)
    ub = d_b / np.linalg.norm(d_b)
    cross = np.cross(ua, ub)
    sin_angle = np.linalg.norm(cross)
    if sin_angle <= MIN_RAY_ANGLE:
        raise DegenerateRayError(
            f"rays are parallel within {MIN_RAY_ANGLE} rad (sin angle {sin_angle:.3e})"
        )
    # closest points o_a + s*ua and r*ub: minimizing |o_a + s ua - r ub|^2
    # gives the 2x2 system [1 -c; -c 1] [s; r] = [-ua.o_a; ub.o_a]
    c = np.dot(ua, ub)
    det = 1.0 - c * c
    s = (-np.dot(ua, o_a) + c * np.dot(ub, o_a)) / det
    r = (np.dot(ub, o_a) - c * np.dot(ua, o_a)) / det
    if s <= 0 or r <= 0:
        raise CheiralityError(f"triangulated point behind a camera (s={s:.3e}, r={r:.3e})")
    p_on_a = o_a + s * ua
    p_on_b = r * ub
    point = 0.5 * (p_on_a + p_on_b)
    if point[2] <= 0:
        raise CheiralityError(f"triangulated midpoint has non-positive depth z={point[2]:.3e}")
    return point


def build_sparse_depth(matches: CorrespondenceSet, pose_a_to_b: Pose,
                       K: CameraIntrinsics):
    """Triangulate every match; failed matches are dropped and counted.

    Returns ``(SparseDepth for frame b, dropped_count)``. Raises
    :class:`EmptySparseDepthError` when the input is empty or no match
    survives.
    """
    if len(matches) == 0:
        raise EmptySparseDepthError("correspondence set is empty")
    pixels, depths = [], []
    seen = set()
    dropped = 0
    for pa, pb in zip(matches.pixels_a, matches.pixels_b):
        try:
            point = triangulate_two_view((pa, pb), pose_a_to_b, K)
        except (DegenerateRayError, CheiralityError):
            dropped += 1
            continue
        key = (float(pb[0]), float(pb[1]))
        if key in seen:
            dropped += 1
            continue
        seen.add(key)
        pixels.append(pb)
        depths.append(point[2])
    if not pixels:
        raise EmptySparseDepthError(f"all {len(matches)} matches failed triangulation")
    return SparseDepth(matches.frame_b, np.array(pixels), np.array(depths)), dropped
