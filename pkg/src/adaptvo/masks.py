"""Dynamic-region masking from depth consistency and region warping.

Three masks gate the self-supervised losses:

- ``W_s``: continuous per-pixel depth-consistency weight,
  ``1 - |D_prev - D_proj| / (D_prev + D_proj)``
- ``M_sc``: binary semantic mask; an object region is kept when its
  depth-warped footprint overlaps a previous-frame region of the same
  category with IoU at or above a threshold
- ``M_gc``: binary geometric mask; the lowest-ranked fraction of valid
  ``W_s`` values is excluded as potentially dynamic

The combined mask ``M = M_sc * M_gc`` equals 1 on pixels that stay in the
loss and 0 on excluded (dynamic or unsupported) pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (CameraIntrinsics, DepthMap, MaskMap, Pose, SegMap,
                       bilinear_sample, warp_depth_grid)

DEFAULT_IOU_THRESHOLD = 0.85
DEFAULT_RANK_FRACTION = 0.20


@dataclass(frozen=True)
class ObjectRegion:
    """Pixels of one recognized object in one frame."""

    frame_id: int
    region_id: int
    category: int
    pixels: np.ndarray  # (n, 2) int, (u, v)

    def __post_init__(self):
        p = np.ascontiguousarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        if len(p) == 0:
            raise ValueError("object region must contain at least one pixel")
        object.__setattr__(self, "pixels", p)

    def __len__(self) -> int:
        return len(self.pixels)


def regions_from_seg(seg: SegMap, frame_id: int = 0) -> list[ObjectRegion]:
    """Extract object regions; grouped per instance id when instances are
    present, per category otherwise. Label 0 is never a region."""
    regions = []
    if seg.instances is not None:
        ids = np.unique(seg.instances)
        for rid in ids[ids != 0]:
            sel = (seg.instances == rid) & (seg.labels != 0)
            vv, uu = np.nonzero(sel)
            if len(uu) == 0:
                continue
            cat = int(seg.labels[vv[0], uu[0]])
            regions.append(ObjectRegion(frame_id, int(rid), cat,
                                        np.column_stack([uu, vv])))
    else:
        for cat in np.unique(seg.labels):
            if cat == 0:
                continue
            vv, uu = np.nonzero(seg.labels == cat)
            regions.append(ObjectRegion(frame_id, int(cat), int(cat),
                                        np.column_stack([uu, vv])))
    return regions


def compute_ws(d_prev: DepthMap, d_proj: DepthMap):
    """Self-discovered consistency weights.

    Both inputs live on the same pixel grid: ``d_prev`` is the previous
    depth resampled at the warped coordinates and ``d_proj`` the projected
    (transformed) depth of the current frame. Returns ``(MaskMap, valid)``
    where invalid pixels (either depth missing) carry weight 0.
    """
    a, b = d_prev.values, d_proj.values
    if a.shape != b.shape:
        raise ValueError("depth map dimensions must match")
    valid = (a > 0) & (b > 0)
    denom = np.where(valid, a + b, 1.0)
    ws = np.where(valid, 1.0 - np.abs(a - b) / denom, 0.0)
    return MaskMap(np.clip(ws, 0.0, 1.0)), valid


def warp_region(region: ObjectRegion, depth: DepthMap, pose: Pose,
                K: CameraIntrinsics) -> np.ndarray:
    """Warp a region's pixels into the other frame; returns the deduplicated
    set of rounded in-bounds pixels as an (n, 2) int array (possibly empty).

    Region pixels with invalid depth, a warped point behind the camera, or
    out-of-bounds landing are skipped.
    """
    uu = region.pixels[:, 0]
    vv = region.pixels[:, 1]
    d = depth.values[vv, uu]
    nx = (uu - K.cx) / K.fx
    ny = (vv - K.cy) / K.fy
    pts = np.column_stack([d * nx, d * ny, d])
    warped = pose.apply(pts)
    ok = (d > 0) & (warped[:, 2] > 1e-12)
    if not np.any(ok):
        return np.empty((0, 2), dtype=np.int64)
    z = warped[ok, 2]
    u2 = np.rint(K.fx * warped[ok, 0] / z + K.cx).astype(np.int64)
    v2 = np.rint(K.fy * warped[ok, 1] / z + K.cy).astype(np.int64)
    inb = (u2 >= 0) & (u2 <= K.width - 1) & (v2 >= 0) & (v2 <= K.height - 1)
    if not np.any(inb):
        return np.empty((0, 2), dtype=np.int64)
    return np.unique(np.column_stack([u2[inb], v2[inb]]), axis=0)


def region_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two pixel sets; 0 when the union is empty."""
    sa = {(int(u), int(v)) for u, v in np.asarray(a).reshape(-1, 2)}
    sb = {(int(u), int(v)) for u, v in np.asarray(b).reshape(-1, 2)}
    union = sa | sb
    if not union:
        return 0.0
    return len(sa & sb) / len(union)


def compute_msc(regions_t: list[ObjectRegion], regions_prev: list[ObjectRegion],
                depth_t: DepthMap, pose_t_to_prev: Pose, K: CameraIntrinsics,
                tau_s: float = DEFAULT_IOU_THRESHOLD) -> MaskMap:
    """Semantic consistency mask on the current frame's grid.

    Each region's warped footprint is matched against same-category
    previous-frame regions; the best IoU decides whether the region is kept
    (1) or excluded (0). Regions without any candidate are excluded.
    Background and unlabeled pixels are kept.
    """
    if not (0 < tau_s <= 1):
        raise ValueError("tau_s must lie in (0, 1]")
    out = np.ones((K.height, K.width))
    for region in regions_t:
        warped = warp_region(region, depth_t, pose_t_to_prev, K)
        best = 0.0
        matched = False
        for cand in regions_prev:
            if cand.category != region.category:
                continue
            matched = True
            iou = region_iou(warped, cand.pixels)
            if iou > best:
                best = iou
        keep = matched and best >= tau_s
        out[region.pixels[:, 1], region.pixels[:, 0]] = 1.0 if keep else 0.0
    return MaskMap(out)


def compute_mgc(w_s: MaskMap, valid: np.ndarray,
                fraction: float = DEFAULT_RANK_FRACTION) -> MaskMap:
    """Geometric consistency mask: zero out the lowest-ranked ``fraction``
    of valid consistency weights (exactly ``floor(fraction * n_valid)``
    pixels; ties at the cutoff resolved in raster order). Invalid pixels
    are excluded as well."""
    if not (0 < fraction < 1):
        raise ValueError("fraction must lie in (0, 1)")
    v = np.asarray(valid, dtype=bool)
    if v.shape != w_s.values.shape:
        raise ValueError("validity raster dimensions must match the weights")
    out = np.zeros(w_s.values.shape)
    flat_idx = np.nonzero(v.ravel())[0]
    n_valid = len(flat_idx)
    if n_valid == 0:
        return MaskMap(out)
    out.ravel()[flat_idx] = 1.0
    n_cut = int(np.floor(fraction * n_valid))
    if n_cut > 0:
        vals = w_s.values.ravel()[flat_idx]
        # stable sort on values; equal weights are cut in raster order
        order = np.argsort(vals, kind="stable")
        out.ravel()[flat_idx[order[:n_cut]]] = 0.0
    return MaskMap(out)


def compose_mask(m_sc: MaskMap, m_gc: MaskMap) -> MaskMap:
    """Combined consistency mask, the elementwise product."""
    if m_sc.values.shape != m_gc.values.shape:
        raise ValueError("mask dimensions must match")
    return MaskMap(m_sc.values * m_gc.values)


def consistency_depth_pair(depth_t: DepthMap, depth_prev: DepthMap,
                           pose_t_to_prev: Pose, K: CameraIntrinsics):
    """Build the aligned (previous-interpolated, projected) depth pair on the
    current frame's grid, the shared input of ``W_s`` and the geometry loss.

    Returns ``(d_prev_interp, d_proj, valid)``; both maps are zero outside
    ``valid``.
    """
    u2, v2, z2, ok = warp_depth_grid(depth_t.values, pose_t_to_prev, K)
    sampled, ok_s = bilinear_sample(depth_prev.values, u2, v2,
                                    valid=depth_prev.values > 0)
    valid = ok & ok_s
    d_prev_i = np.where(valid, sampled, 0.0)
    d_proj = np.where(valid, z2, 0.0)
    return DepthMap(d_prev_i), DepthMap(np.clip(d_proj, 0.0, None)), valid
