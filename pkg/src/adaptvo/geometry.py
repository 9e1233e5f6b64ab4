"""Pinhole camera model, rigid transforms, and raster value types.

Conventions used throughout the package:

- pixel coordinates are continuous with pixel centers at integer
  coordinates; ``u`` runs along image width (x), ``v`` along height (y)
- depth is the camera-frame z coordinate in meters; ``0.0`` marks an
  invalid/missing depth sample (never NaN, so binary files stay clean)
- a :class:`Pose` maps points from its source frame into its target
  frame: ``p_target = R @ p_source + t``
- raster value lookups round to the nearest pixel; intensity and depth
  resampling is bilinear
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class BehindCameraError(ValueError):
    """A point required to be in front of the camera has z <= 0."""


class InvalidDepthError(ValueError):
    """A depth value is non-positive or non-finite where validity is required."""


def _frozen_array(x, dtype=np.float64) -> np.ndarray:
    a = np.ascontiguousarray(x, dtype=dtype)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# camera intrinsics


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: focal lengths, principal point, image size (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def in_bounds(self, pixel, margin: float = 0.0) -> bool:
        u, v = float(pixel[0]), float(pixel[1])
        return (
            margin <= u <= self.width - 1 - margin
            and margin <= v <= self.height - 1 - margin
        )

    def pixel_grid(self):
        """Return (u, v) float rasters of shape (height, width)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return u, v

    def normalized_grid(self):
        """Per-pixel normalized ray coefficients ((u-cx)/fx, (v-cy)/fy)."""
        u, v = self.pixel_grid()
        return (u - self.cx) / self.fx, (v - self.cy) / self.fy


# ---------------------------------------------------------------------------
# SO(3)/SE(3) helpers

_EPS_ANGLE = 1e-12


def skew(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


def so3_exp(w) -> np.ndarray:
    """Rodrigues' formula; stable Taylor expansion near zero."""
    w = np.asarray(w, dtype=np.float64)
    theta2 = float(w @ w)
    W = skew(w)
    if theta2 < _EPS_ANGLE:
        # sin(t)/t ~ 1 - t^2/6, (1-cos t)/t^2 ~ 1/2 - t^2/24
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        theta = np.sqrt(theta2)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R) -> np.ndarray:
    """Inverse of :func:`so3_exp` for rotations with angle < pi."""
    R = np.asarray(R, dtype=np.float64)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    axis_unnorm = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-7:
        return 0.5 * axis_unnorm
    if np.pi - theta < 1e-6:
        # near pi: extract axis from the symmetric part
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
        # choose signs consistent with the largest component
        k = int(np.argmax(axis))
        axis = A[:, k] / axis[k]
        axis = axis / np.linalg.norm(axis)
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * axis_unnorm


def _se3_v_matrix(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta2 = float(w @ w)
    W = skew(w)
    if theta2 < _EPS_ANGLE:
        b = 0.5 - theta2 / 24.0
        c = 1.0 / 6.0 - theta2 / 120.0
    else:
        theta = np.sqrt(theta2)
        b = (1.0 - np.cos(theta)) / theta2
        c = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) + b * W + c * (W @ W)


# ---------------------------------------------------------------------------
# rigid transform


@dataclass(frozen=True)
class Pose:
    """Rigid transform: ``apply(p) = rotation @ p + translation``.

    Rotation must be orthonormal with determinant +1 (checked to 1e-9).
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen_array(self.rotation)
        t = _frozen_array(self.translation)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation determinant differs from +1 by more than 1e-9")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def exp(xi) -> "Pose":
        """Exponential map of the 6-vector ``[wx wy wz, tx ty tz]``."""
        xi = np.asarray(xi, dtype=np.float64)
        w, rho = xi[:3], xi[3:]
        return Pose(so3_exp(w), _se3_v_matrix(w) @ rho)

    def log(self) -> np.ndarray:
        w = so3_log(self.rotation)
        v_inv = np.linalg.inv(_se3_v_matrix(w))
        return np.concatenate([w, v_inv @ self.translation])

    def compose(self, other: "Pose") -> "Pose":
        """self after other: ``(self.compose(other)).apply(p) = self.apply(other.apply(p))``."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        r_inv = self.rotation.T
        return Pose(r_inv, -r_inv @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform one 3-vector or an (..., 3) array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def orthonormalized(self) -> "Pose":
        u, _, vt = np.linalg.svd(self.rotation)
        r = u @ vt
        if np.linalg.det(r) < 0:
            u[:, -1] = -u[:, -1]
            r = u @ vt
        return Pose(r, self.translation)

    def quaternion(self) -> np.ndarray:
        """Unit quaternion (qx, qy, qz, qw), qw >= 0."""
        R = self.rotation
        trace = np.trace(R)
        if trace > 0:
            s = np.sqrt(trace + 1.0) * 2.0
            qw = 0.25 * s
            qx = (R[2, 1] - R[1, 2]) / s
            qy = (R[0, 2] - R[2, 0]) / s
            qz = (R[1, 0] - R[0, 1]) / s
        else:
            i = int(np.argmax(np.diag(R)))
            if i == 0:
                s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
                qx, qy, qz = 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s
                qw = (R[2, 1] - R[1, 2]) / s
            elif i == 1:
                s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
                qx, qy, qz = (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s
                qw = (R[0, 2] - R[2, 0]) / s
            else:
                s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
                qx, qy, qz = (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s
                qw = (R[1, 0] - R[0, 1]) / s
        q = np.array([qx, qy, qz, qw])
        if q[3] < 0:
            q = -q
        return q / np.linalg.norm(q)

    @staticmethod
    def from_quaternion(q, translation) -> "Pose":
        qx, qy, qz, qw = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
        R = np.array(
            [
                [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
                [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
                [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
            ]
        )
        return Pose(R, np.asarray(translation, dtype=np.float64)).orthonormalized()


# ---------------------------------------------------------------------------
# raster value types


@dataclass(frozen=True)
class DepthMap:
    """Dense depth raster in meters, shape (height, width); 0.0 = invalid."""

    values: np.ndarray

    def __post_init__(self):
        v = _frozen_array(self.values)
        if v.ndim != 2:
            raise ValueError("depth values must be a 2-D raster")
        if not np.all(np.isfinite(v)):
            raise ValueError("depth values must be finite")
        if np.any(v < 0):
            raise ValueError("depth values must be >= 0 (0 marks invalid)")
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return self.values > 0


@dataclass(frozen=True)
class SegMap:
    """Semantic label raster (uint16 category ids, 0 = unlabeled).

    ``instances`` is an optional second raster of per-object instance ids
    (0 = none); when present it refines object-region extraction.
    """

    labels: np.ndarray
    instances: np.ndarray | None = None

    def __post_init__(self):
        lab = _frozen_array(self.labels, dtype=np.uint16)
        if lab.ndim != 2:
            raise ValueError("labels must be a 2-D raster")
        object.__setattr__(self, "labels", lab)
        if self.instances is not None:
            inst = _frozen_array(self.instances, dtype=np.uint16)
            if inst.shape != lab.shape:
                raise ValueError("instance raster dimensions must match labels")
            object.__setattr__(self, "instances", inst)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class MaskMap:
    """Per-pixel keep-weights in [0, 1]; continuous or binary."""

    values: np.ndarray

    def __post_init__(self):
        v = _frozen_array(self.values)
        if v.ndim != 2:
            raise ValueError("mask values must be a 2-D raster")
        if not np.all(np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
            raise ValueError("mask values must be finite and in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class Trajectory:
    """Timestamped camera-to-world poses."""

    timestamps: tuple
    poses: tuple

    def __post_init__(self):
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses must have equal length")
        object.__setattr__(self, "timestamps", tuple(float(t) for t in self.timestamps))
        object.__setattr__(self, "poses", tuple(self.poses))

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])


# ---------------------------------------------------------------------------
# point-wise projection primitives


def project(p_cam, K: CameraIntrinsics) -> tuple[float, float]:
    """Project a camera-frame point to pixel coordinates; requires z > 0."""
    x, y, z = (float(c) for c in p_cam)
    if z <= 0:
        raise BehindCameraError(f"point has non-positive depth z={z}")
    return (K.fx * x / z + K.cx, K.fy * y / z + K.cy)


def backproject(pixel, depth: float, K: CameraIntrinsics) -> np.ndarray:
    """Lift a pixel at the given depth to a camera-frame 3-vector."""
    d = float(depth)
    if not np.isfinite(d) or d <= 0:
        raise InvalidDepthError(f"depth must be finite and positive, got {depth}")
    u, v = float(pixel[0]), float(pixel[1])
    return np.array([d * (u - K.cx) / K.fx, d * (v - K.cy) / K.fy, d])


def warp_pixel(pixel, depth: float, pose: Pose, K: CameraIntrinsics):
    """Reproject ``pixel`` through ``pose``; returns ((u', v'), z').

    The warped pixel is returned even when it falls outside the image
    bounds (callers check with ``K.in_bounds``); a warped point behind
    the camera raises :class:`BehindCameraError`.
    """
    p = pose.apply(backproject(pixel, depth, K))
    if p[2] <= 0:
        raise BehindCameraError(f"warped point is behind the camera, z={p[2]}")
    return project(p, K), float(p[2])


# ---------------------------------------------------------------------------
# vectorized raster warping / sampling


def warp_depth_grid(depth_values: np.ndarray, pose: Pose, K: CameraIntrinsics,
                    margin: float = 0.0):
    """Warp every pixel of a depth raster through ``pose``.

    Returns ``(u2, v2, z2, ok)`` where ``ok`` marks pixels with valid
    source depth, a warped point in front of the camera, and warped
    coordinates inside the image with the given margin. Coordinate
    entries outside ``ok`` are unreliable and must not be used.
    """
    d = np.asarray(depth_values, dtype=np.float64)
    nx, ny = K.normalized_grid()
    x, y, z = d * nx, d * ny, d
    R, t = pose.rotation, pose.translation
    x2 = R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + t[0]
    y2 = R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + t[1]
    z2 = R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + t[2]
    valid_src = d > 0
    in_front = z2 > 1e-12
    safe_z = np.where(in_front, z2, 1.0)
    u2 = K.fx * x2 / safe_z + K.cx
    v2 = K.fy * y2 / safe_z + K.cy
    ok = (
        valid_src
        & in_front
        & (u2 >= margin)
        & (u2 <= K.width - 1 - margin)
        & (v2 >= margin)
        & (v2 <= K.height - 1 - margin)
    )
    return u2, v2, z2, ok


def bilinear_sample(values: np.ndarray, u, v, valid: np.ndarray | None = None):
    """Bilinearly sample a raster at continuous coordinates.

    Returns ``(samples, ok)``; ``ok`` requires the sample window to lie
    inside the raster and, if ``valid`` is given, all four touched
    texels to be valid.
    """
    src = np.asarray(values, dtype=np.float64)
    h, w = src.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    ok = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    x0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2)
    fx = np.clip(u - x0, 0.0, 1.0)
    fy = np.clip(v - y0, 0.0, 1.0)
    s00 = src[y0, x0]
    s01 = src[y0, x0 + 1]
    s10 = src[y0 + 1, x0]
    s11 = src[y0 + 1, x0 + 1]
    out = (
        (1 - fy) * ((1 - fx) * s00 + fx * s01)
        + fy * ((1 - fx) * s10 + fx * s11)
    )
    if valid is not None:
        val = np.asarray(valid)
        ok = ok & val[y0, x0] & val[y0, x0 + 1] & val[y0 + 1, x0] & val[y0 + 1, x0 + 1]
    return out, ok


def raster_lookup(values: np.ndarray, u, v):
    """Nearest-pixel raster read (used for label/mask lookups)."""
    src = np.asarray(values)
    h, w = src.shape[:2]
    ui = np.clip(np.rint(np.asarray(u)).astype(np.int64), 0, w - 1)
    vi = np.clip(np.rint(np.asarray(v)).astype(np.int64), 0, h - 1)
    return src[vi, ui]
