"""Self-supervised losses for online depth adaptation.

All terms are differentiable through the predicted depths of both frames in
a pair: view synthesis resamples the previous image at depth-dependent warp
coordinates, SSIM runs on 3x3 block statistics, and the geometry term
compares interpolated previous depth against projected current depth.

Every function accepts plain arrays or autodiff tensors for the depth
inputs; with plain inputs the numeric result is identical (same code path)
and no gradients are kept. Masked means divide by their own valid-pixel
count so shrinking masks only remove contributions without rescaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import CameraIntrinsics, DepthMap, Pose

DEFAULT_ALPHA = 0.85
SSIM_C1 = (0.01 * 1.0) ** 2  # intensity range is 1.0
SSIM_C2 = (0.03 * 1.0) ** 2


@dataclass(frozen=True)
class LossWeights:
    """Term weights of the online objective."""

    alpha: float = DEFAULT_ALPHA
    lambda_smooth: float = 0.1
    lambda_geometry: float = 0.1
    lambda_depth: float = 0.1


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term values (already mask-weighted) and valid-pixel counts.

    ``l_total = l_p + lambda_smooth * l_s + lambda_geometry * l_g +
    lambda_depth * l_d`` holds exactly.
    """

    l_p: float
    l_s: float
    l_g: float
    l_d: float
    l_total: float
    n_p: int
    n_s: int
    n_g: int
    n_d: int

    def as_row(self, step: int) -> dict:
        return {
            "step": step,
            "l_p": self.l_p,
            "l_s": self.l_s,
            "l_g": self.l_g,
            "l_d": self.l_d,
            "l_total": self.l_total,
            "n_p": self.n_p,
            "n_s": self.n_s,
            "n_g": self.n_g,
            "n_d": self.n_d,
        }


def _depth_values(d):
    if isinstance(d, DepthMap):
        return d.values
    return d


def _plain(x, tensor_mode: bool):
    if tensor_mode or not isinstance(x, ad.Tensor):
        return x
    return x.value


def _is_tensor(*xs) -> bool:
    return any(isinstance(x, ad.Tensor) for x in xs)


# ---------------------------------------------------------------------------
# warping


def _warp_grid_tensor(depth: ad.Tensor, pose: Pose, K: CameraIntrinsics):
    """Tensor version of the per-pixel warp; returns (u2, v2, z2, ok)."""
    nx, ny = K.normalized_grid()
    x = ad.mul(depth, nx)
    y = ad.mul(depth, ny)
    z = depth
    R, t = pose.rotation, pose.translation
    x2 = ad.add(ad.add(ad.mul(x, R[0, 0]), ad.mul(y, R[0, 1])), ad.add(ad.mul(z, R[0, 2]), t[0]))
    y2 = ad.add(ad.add(ad.mul(x, R[1, 0]), ad.mul(y, R[1, 1])), ad.add(ad.mul(z, R[1, 2]), t[1]))
    z2 = ad.add(ad.add(ad.mul(x, R[2, 0]), ad.mul(y, R[2, 1])), ad.add(ad.mul(z, R[2, 2]), t[2]))
    in_front = z2.value > 1e-12
    z2_safe = ad.where_mask(in_front, z2, 1.0)
    u2 = ad.add(ad.div(ad.mul(x2, K.fx), z2_safe), K.cx)
    v2 = ad.add(ad.div(ad.mul(y2, K.fy), z2_safe), K.cy)
    ok = (
        (depth.value > 0)
        & in_front
        & (u2.value >= 0)
        & (u2.value <= K.width - 1)
        & (v2.value >= 0)
        & (v2.value <= K.height - 1)
    )
    return u2, v2, z2, ok


def _erode3(valid: np.ndarray) -> np.ndarray:
    """True where the full 3x3 neighborhood is valid (border rows false)."""
    out = np.zeros_like(valid)
    out[1:-1, 1:-1] = np.ones((valid.shape[0] - 2, valid.shape[1] - 2), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            out[1:-1, 1:-1] &= valid[1 + dy : valid.shape[0] - 1 + dy,
                                     1 + dx : valid.shape[1] - 1 + dx]
    return out


def synthesize_view(image_prev: np.ndarray, depth_t, pose_t_to_prev: Pose,
                    K: CameraIntrinsics):
    """Resample the previous image at warped coordinates.

    Returns ``(i_syn, valid)``; invalid pixels are zeroed and must be
    excluded from losses by the caller.
    """
    tensor_mode = _is_tensor(depth_t)
    dt = ad.as_tensor(_depth_values(depth_t))
    u2, v2, _, ok = _warp_grid_tensor(dt, pose_t_to_prev, K)
    i_syn = ad.bilinear(np.asarray(image_prev, dtype=np.float64), u2, v2)
    return _plain(ad.where_mask(ok, i_syn, 0.0), tensor_mode), ok


def _box3(x):
    """3x3 block mean, valid interior only: (h, w) -> (h-2, w-2)."""
    h, w = x.value.shape if isinstance(x, ad.Tensor) else np.asarray(x).shape
    xt = ad.as_tensor(x)
    acc = None
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            part = ad.slice2d(xt, dy, h - 2 + dy, dx, w - 2 + dx)
            acc = part if acc is None else ad.add(acc, part)
    return ad.div(acc, 9.0)


def ssim(a, b):
    """Per-pixel SSIM on 3x3 block statistics; (h, w) -> (h-2, w-2) map.

    Symmetric in its arguments and exactly 1 on identical inputs.
    """
    tensor_mode = _is_tensor(a, b)
    at, bt = ad.as_tensor(a), ad.as_tensor(b)
    if at.value.shape != bt.value.shape:
        raise ValueError("image dimensions must match")
    mu_a, mu_b = _box3(at), _box3(bt)
    s_a = ad.sub(_box3(ad.mul(at, at)), ad.mul(mu_a, mu_a))
    s_b = ad.sub(_box3(ad.mul(bt, bt)), ad.mul(mu_b, mu_b))
    s_ab = ad.sub(_box3(ad.mul(at, bt)), ad.mul(mu_a, mu_b))
    num = ad.mul(
        ad.add(ad.mul(ad.mul(mu_a, mu_b), 2.0), SSIM_C1),
        ad.add(ad.mul(s_ab, 2.0), SSIM_C2),
    )
    den = ad.mul(
        ad.add(ad.add(ad.mul(mu_a, mu_a), ad.mul(mu_b, mu_b)), SSIM_C1),
        ad.add(ad.add(s_a, s_b), SSIM_C2),
    )
    return _plain(ad.div(num, den), tensor_mode)


def photometric_loss(image_t, image_syn, alpha: float = DEFAULT_ALPHA):
    """Per-pixel photometric error on the interior grid (h-2, w-2):
    ``alpha/2 * (1 - SSIM) + (1 - alpha) * |I_t - I_t'|``."""
    tensor_mode = _is_tensor(image_t, image_syn)
    it, st = ad.as_tensor(image_t), ad.as_tensor(image_syn)
    h, w = it.value.shape
    ssim_map = ssim(it, st)
    l1 = ad.slice2d(ad.absolute(ad.sub(it, st)), 1, h - 1, 1, w - 1)
    out = ad.add(
        ad.mul(ad.sub(1.0, ssim_map), alpha / 2.0),
        ad.mul(l1, 1.0 - alpha),
    )
    return _plain(out, tensor_mode)


def _ratio_map(a, b, valid: np.ndarray):
    """|a - b| / (a + b) with invalid lanes pinned to exactly zero."""
    a_s = ad.where_mask(valid, ad.as_tensor(a), 1.0)
    b_s = ad.where_mask(valid, ad.as_tensor(b), 1.0)
    return ad.div(ad.absolute(ad.sub(a_s, b_s)), ad.add(a_s, b_s))


def geometry_loss(d_prev_interp, d_proj):
    """Depth-ratio consistency ``|D'_prev - D_proj| / (D'_prev + D_proj)``.

    Returns ``(map, valid)``; the map is zero outside ``valid`` (pixels
    where either depth is missing). Pointwise, this map equals
    ``1 - W_s``.
    """
    tensor_mode = _is_tensor(d_prev_interp, d_proj)
    a = ad.as_tensor(_depth_values(d_prev_interp))
    b = ad.as_tensor(_depth_values(d_proj))
    if a.value.shape != b.value.shape:
        raise ValueError("depth map dimensions must match")
    valid = (a.value > 0) & (b.value > 0)
    return _plain(_ratio_map(a, b, valid), tensor_mode), valid


def smoothness_loss(depth, image):
    """Edge-aware first-order smoothness of mean-normalized depth.

    Forward differences over the common interior grid (h-1, w-1); border
    row/column excluded. Returns a scalar.
    """
    tensor_mode = _is_tensor(depth)
    dt = ad.as_tensor(_depth_values(depth))
    img = np.asarray(image, dtype=np.float64)
    h, w = dt.value.shape
    if img.shape != (h, w):
        raise ValueError("image dimensions must match the depth map")
    dstar = ad.div(dt, ad.tmean(dt))
    dx = ad.sub(ad.slice2d(dstar, 0, h - 1, 1, w), ad.slice2d(dstar, 0, h - 1, 0, w - 1))
    dy = ad.sub(ad.slice2d(dstar, 1, h, 0, w - 1), ad.slice2d(dstar, 0, h - 1, 0, w - 1))
    wx = np.exp(-np.abs(img[: h - 1, 1:] - img[: h - 1, : w - 1]))
    wy = np.exp(-np.abs(img[1:, : w - 1] - img[: h - 1, : w - 1]))
    term = ad.add(ad.mul(ad.absolute(dx), wx), ad.mul(ad.absolute(dy), wy))
    return _plain(ad.tmean(term), tensor_mode)


def depth_consistency_loss(depth, dense_depth):
    """Inverse-depth alignment ``|1/D - 1/D_d|`` against the densified
    pseudo ground truth. Returns ``(map, valid)``; pixels without a dense
    sample are excluded and carry exactly zero."""
    tensor_mode = _is_tensor(depth)
    dt = ad.as_tensor(_depth_values(depth))
    dd = np.asarray(_depth_values(dense_depth), dtype=np.float64)
    if dt.value.shape != dd.shape:
        raise ValueError("depth map dimensions must match")
    valid = (dd > 0) & (dt.value > 0)
    inv_pred = ad.div(1.0, ad.where_mask(valid, dt, 1.0))
    inv_dense = np.where(valid, 1.0 / np.where(valid, dd, 1.0), 1.0)
    out = ad.absolute(ad.sub(inv_pred, inv_dense))
    return _plain(out, tensor_mode), valid


def compute_ws_tensor(d_prev_interp, d_proj, valid: np.ndarray):
    """Consistency weights ``1 - |a-b|/(a+b)`` as a graph node (zero at
    invalid lanes)."""
    a = ad.as_tensor(_depth_values(d_prev_interp))
    b = ad.as_tensor(_depth_values(d_proj))
    ratio = _ratio_map(a, b, valid)
    return ad.where_mask(valid, ad.sub(1.0, ratio), 0.0)


def _masked_mean(x: ad.Tensor, weight: np.ndarray, count: int) -> ad.Tensor:
    if count == 0:
        return ad.constant(0.0)
    return ad.div(ad.tsum(ad.mul(x, weight)), float(count))


def total_loss(image_t: np.ndarray, image_prev: np.ndarray,
               depth_t, depth_prev,
               pose_t_to_prev: Pose, K: CameraIntrinsics,
               dense_depth=None, mask: np.ndarray | None = None,
               w_s: np.ndarray | None = None,
               weights: LossWeights = LossWeights(),
               ws_in_graph: bool = False):
    """Assemble the full online-learning objective for one frame pair.

    ``depth_t``/``depth_prev`` may be autodiff tensors (training) or plain
    maps (evaluation). ``w_s`` supplies precomputed consistency weights;
    when omitted they are recomputed from the current depths and treated as
    constants unless ``ws_in_graph`` is set. ``mask`` is the combined
    consistency mask gating the geometry and dense-depth terms.

    Returns ``(LossBreakdown, scalar loss tensor)``.
    """
    it = np.asarray(image_t, dtype=np.float64)
    ip = np.asarray(image_prev, dtype=np.float64)
    dt = ad.as_tensor(_depth_values(depth_t))
    dp = ad.as_tensor(_depth_values(depth_prev))
    h, w = dt.value.shape
    if it.shape != (h, w) or ip.shape != (h, w) or dp.value.shape != (h, w):
        raise ValueError("all rasters in a pair must share dimensions")

    # warp current pixels into the previous frame
    u2, v2, z2, ok = _warp_grid_tensor(dt, pose_t_to_prev, K)
    prev_valid = dp.value > 0
    d_prev_samp = ad.bilinear(dp, u2, v2)
    x0 = np.clip(np.floor(u2.value).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(v2.value).astype(np.int64), 0, h - 2)
    corners_ok = (
        prev_valid[y0, x0] & prev_valid[y0, x0 + 1]
        & prev_valid[y0 + 1, x0] & prev_valid[y0 + 1, x0 + 1]
    )
    valid_warp = ok & corners_ok

    # geometry consistency and self-discovered weights share one ratio map
    ratio = _ratio_map(d_prev_samp, z2, valid_warp)
    if w_s is not None:
        ws_t = ad.constant(np.asarray(w_s, dtype=np.float64))
    else:
        ws_full = ad.where_mask(valid_warp, ad.sub(1.0, ratio), 0.0)
        ws_t = ws_full if ws_in_graph else ad.detach(ws_full)

    # photometric term on the eroded interior
    i_syn = ad.where_mask(ok, ad.bilinear(ip, u2, v2), 0.0)
    lp_map = photometric_loss(it, i_syn, weights.alpha)
    valid_p = _erode3(valid_warp)[1 : h - 1, 1 : w - 1]
    n_p = int(np.count_nonzero(valid_p))
    ws_crop = ad.slice2d(ws_t, 1, h - 1, 1, w - 1)
    lp_weighted = ad.mul(lp_map, ws_crop)
    l_p = _masked_mean(lp_weighted, valid_p.astype(np.float64), n_p)

    # smoothness over the full frame
    l_s = smoothness_loss(dt, it)
    n_s = (h - 1) * (w - 1)

    # geometry term gated by the consistency mask
    m = np.ones((h, w)) if mask is None else np.asarray(mask, dtype=np.float64)
    n_g = int(np.count_nonzero(valid_warp))
    l_g = _masked_mean(ratio, m * valid_warp, n_g)

    # dense-depth alignment gated by the consistency mask
    if dense_depth is not None:
        ld_map, valid_d = depth_consistency_loss(dt, dense_depth)
        n_d = int(np.count_nonzero(valid_d))
        l_d = _masked_mean(ld_map, m * valid_d, n_d)
    else:
        n_d = 0
        l_d = ad.constant(0.0)

    total = ad.add(
        ad.add(l_p, ad.mul(l_s, weights.lambda_smooth)),
        ad.add(ad.mul(l_g, weights.lambda_geometry), ad.mul(l_d, weights.lambda_depth)),
    )
    breakdown = LossBreakdown(
        l_p=float(l_p.value),
        l_s=float(l_s.value) if isinstance(l_s, ad.Tensor) else float(l_s),
        l_g=float(l_g.value),
        l_d=float(l_d.value),
        l_total=float(total.value),
        n_p=n_p,
        n_s=n_s,
        n_g=n_g,
        n_d=n_d,
    )
    return breakdown, total
