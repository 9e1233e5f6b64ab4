"""Deterministic synthetic scenes with exact ground truth.

Scenes are built from axis-aligned boxes and bounded axis-aligned planes,
rendered by vectorized ray casting: depth is the analytic ray-primitive
intersection, labels come from the hit object, and intensity combines a
depth-dependent shade with band-limited procedural texture (so photometric
losses have gradients and local statistics are non-degenerate).

Everything is a pure function of the scene seed: rendering, correspondence
sampling, and the pre-training fixtures. A domain-shift descriptor (gamma,
depth-range scaling, palette swap) turns a source-domain scene family into
a measurably different target family.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .geometry import CameraIntrinsics, DepthMap, Pose, SegMap
from .losses import LossWeights, total_loss
from .metrics import evaluate_depth
from .refinernet import ToyDepthNet, patch_features
from .triangulation import CorrespondenceSet

_NEAR = 1e-6
_COVIS_DEPTH_TOL = 0.02  # relative depth agreement for covisibility


@dataclass(frozen=True)
class BoxObject:
    """Axis-aligned box, optionally translating rigidly per frame."""

    lo: tuple
    hi: tuple
    category: int
    instance: int
    velocity: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class PlaneObject:
    """Bounded axis-aligned plane: fixed ``axis`` coordinate = ``offset``;
    ``lo``/``hi`` bound the two remaining axes in ascending order."""

    axis: int
    offset: float
    lo: tuple
    hi: tuple
    category: int
    instance: int
    velocity: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Palette:
    """Shading/texture constants mapping geometry to intensity."""

    brightness_base: float = 0.95
    brightness_slope: float = 0.65
    depth_ref: float = 12.0
    texture_amplitude: float = 0.12


@dataclass(frozen=True)
class TextureSpec:
    """Band-limited procedural texture: a few random sinusoidal waves."""

    n_waves: int = 4
    freq_lo: float = 0.6
    freq_hi: float = 2.2


@dataclass(frozen=True)
class DomainShift:
    """Rendering-time shift between source and target domains."""

    intensity_gamma: float = 1.0
    depth_scale: float = 1.0
    palette_swap: bool = False


DEFAULT_SHIFT = DomainShift(intensity_gamma=2.0, depth_scale=1.5, palette_swap=True)
_SWAP_PALETTE = Palette(brightness_base=0.8, brightness_slope=0.5,
                        depth_ref=12.0, texture_amplitude=0.16)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    intrinsics: CameraIntrinsics
    objects: tuple
    trajectory: tuple
    palette: Palette = Palette()
    texture: TextureSpec = TextureSpec()
    shift: DomainShift = DomainShift()


@dataclass(frozen=True)
class FrameTruth:
    """One rendered frame with exact geometry for every oracle."""

    index: int
    image: np.ndarray          # (h, w) in [0, 1]
    depth: DepthMap
    seg: SegMap
    pose: Pose                 # camera-to-world
    world_points: np.ndarray   # (h, w, 3) hit points at this frame
    velocities: np.ndarray     # (h, w, 3) per-pixel object velocity (m/frame)
    static: np.ndarray         # (h, w) bool, velocity == 0


def _scale_object(obj, s: float):
    if isinstance(obj, BoxObject):
        return replace(obj, lo=tuple(s * np.asarray(obj.lo)),
                       hi=tuple(s * np.asarray(obj.hi)),
                       velocity=tuple(s * np.asarray(obj.velocity)))
    return replace(obj, offset=s * obj.offset,
                   lo=tuple(s * np.asarray(obj.lo)), hi=tuple(s * np.asarray(obj.hi)),
                   velocity=tuple(s * np.asarray(obj.velocity)))


def _apply_depth_scale(spec: SceneSpec) -> SceneSpec:
    s = spec.shift.depth_scale
    if s == 1.0:
        return spec
    objects = tuple(_scale_object(o, s) for o in spec.objects)
    trajectory = tuple(Pose(p.rotation, s * p.translation) for p in spec.trajectory)
    return replace(spec, objects=objects, trajectory=trajectory)


def _object_waves(spec: SceneSpec, obj_index: int):
    salt = 101 if (spec.shift.palette_swap) else 0
    rng = np.random.default_rng((spec.seed, obj_index, salt))
    tex = spec.texture
    dirs = rng.normal(size=(tex.n_waves, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    freqs = rng.uniform(tex.freq_lo, tex.freq_hi, size=tex.n_waves)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=tex.n_waves)
    return dirs * (2.0 * np.pi * freqs)[:, None], phases


def _texture_value(points: np.ndarray, waves, phases) -> np.ndarray:
    acc = np.zeros(points.shape[:-1])
    for k, phi in zip(waves, phases):
        acc += np.sin(points @ k + phi)
    return acc / len(phases)


def _intersect(obj, origin: np.ndarray, dirs: np.ndarray, offset: np.ndarray):
    """Ray parameter of the nearest hit (+inf where missed); the parameter
    equals camera z-depth because ray directions have unit z in camera frame."""
    if isinstance(obj, BoxObject):
        lo = np.asarray(obj.lo) + offset
        hi = np.asarray(obj.hi) + offset
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            ta = (lo - origin) * inv
            tb = (hi - origin) * inv
        tlo = np.fmin(ta, tb)
        thi = np.fmax(ta, tb)
        tmin = np.nanmax(tlo, axis=-1)
        tmax = np.nanmin(thi, axis=-1)
        hit = (tmax >= tmin) & (tmin > _NEAR)
        return np.where(hit, tmin, np.inf)
    axes = [a for a in range(3) if a != obj.axis]
    o_k = origin[obj.axis]
    d_k = dirs[..., obj.axis]
    plane_off = obj.offset + offset[obj.axis]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (plane_off - o_k) / d_k
    hit = np.isfinite(s) & (s > _NEAR)
    lo = np.asarray(obj.lo) + offset[axes]
    hi = np.asarray(obj.hi) + offset[axes]
    for j, a in enumerate(axes):
        coord = origin[a] + s * dirs[..., a]
        hit &= (coord >= lo[j]) & (coord <= hi[j])
    return np.where(hit, s, np.inf)


def render_frame(spec: SceneSpec, frame_index: int) -> FrameTruth:
    """Ray-cast one frame of the (depth-scaled) scene."""
    scaled = _apply_depth_scale(spec)
    pose = scaled.trajectory[frame_index]
    K = scaled.intrinsics
    nx, ny = K.normalized_grid()
    dirs_cam = np.stack([nx, ny, np.ones_like(nx)], axis=-1)
    dirs = dirs_cam @ pose.rotation.T
    origin = pose.translation

    h, w = K.height, K.width
    best = np.full((h, w), np.inf)
    obj_idx = np.full((h, w), -1, dtype=np.int64)
    for i, obj in enumerate(scaled.objects):
        offset = np.asarray(obj.velocity) * frame_index
        s = _intersect(obj, origin, dirs, offset)
        closer = s < best
        best = np.where(closer, s, best)
        obj_idx[closer] = i
    if np.any(obj_idx < 0):
        raise ValueError(
            "scene does not cover the full image; add a backdrop plane"
        )

    depth = best
    world = origin + dirs * depth[..., None]

    palette = _SWAP_PALETTE if scaled.shift.palette_swap else scaled.palette
    shade = palette.brightness_base - palette.brightness_slope * depth / palette.depth_ref
    image = np.zeros((h, w))
    labels = np.zeros((h, w), dtype=np.uint16)
    instances = np.zeros((h, w), dtype=np.uint16)
    velocities = np.zeros((h, w, 3))
    for i, obj in enumerate(scaled.objects):
        sel = obj_idx == i
        if not np.any(sel):
            continue
        offset = np.asarray(obj.velocity) * frame_index
        waves, phases = _object_waves(scaled, i)
        tex = _texture_value(world[sel] - offset, waves, phases)
        image[sel] = shade[sel] + palette.texture_amplitude * tex
        labels[sel] = obj.category
        instances[sel] = obj.instance
        velocities[sel] = np.asarray(obj.velocity)
    image = np.clip(image, 0.0, 1.0) ** scaled.shift.intensity_gamma
    static = np.all(velocities == 0.0, axis=-1)
    return FrameTruth(
        index=frame_index,
        image=image,
        depth=DepthMap(depth),
        seg=SegMap(labels, instances),
        pose=pose,
        world_points=world,
        velocities=velocities,
        static=static,
    )


def generate(spec: SceneSpec) -> list[FrameTruth]:
    """Render every trajectory frame; deterministic for a given spec."""
    return [render_frame(spec, f) for f in range(len(spec.trajectory))]


def relative_pose(frame_from: FrameTruth, frame_to: FrameTruth) -> Pose:
    """Ground-truth pose mapping ``frame_from`` camera points into
    ``frame_to`` camera coordinates."""
    return frame_to.pose.inverse().compose(frame_from.pose)


def sample_correspondences(frame_a: FrameTruth, frame_b: FrameTruth,
                           n: int, seed: int, K: CameraIntrinsics,
                           static_only: bool = True,
                           noise_sigma: float = 0.0,
                           margin: float = 1.0) -> CorrespondenceSet:
    """Exact pixel correspondences from frame b back to frame a.

    Each selected pixel of frame b is traced to its world point (moved back
    along the object's velocity when frames differ) and projected into
    frame a; pairs must be covisible there (in bounds, depth-consistent,
    same instance). Optional Gaussian noise perturbs both pixel coordinates.
    """
    h, w = K.height, K.width
    delta = frame_b.index - frame_a.index
    points_at_a = frame_b.world_points - frame_b.velocities * delta
    cam_a = frame_a.pose.inverse()
    pts = points_at_a.reshape(-1, 3) @ cam_a.rotation.T + cam_a.translation
    z = pts[:, 2]
    ok = z > _NEAR
    zs = np.where(ok, z, 1.0)
    ua = K.fx * pts[:, 0] / zs + K.cx
    va = K.fy * pts[:, 1] / zs + K.cy
    ok &= (ua >= margin) & (ua <= w - 1 - margin) & (va >= margin) & (va <= h - 1 - margin)

    ur = np.clip(np.rint(ua).astype(np.int64), 0, w - 1)
    vr = np.clip(np.rint(va).astype(np.int64), 0, h - 1)
    inst_a = frame_a.seg.instances if frame_a.seg.instances is not None else None
    if inst_a is not None and frame_b.seg.instances is not None:
        ok &= inst_a[vr, ur] == frame_b.seg.instances.reshape(-1)
    depth_a = frame_a.depth.values[vr, ur]
    ok &= np.abs(depth_a - z) <= np.maximum(1e-9, _COVIS_DEPTH_TOL * np.abs(z))
    if static_only:
        ok &= frame_b.static.reshape(-1)

    vv, uu = np.mgrid[0:h, 0:w]
    ok &= (
        (uu.reshape(-1) >= margin) & (uu.reshape(-1) <= w - 1 - margin)
        & (vv.reshape(-1) >= margin) & (vv.reshape(-1) <= h - 1 - margin)
    )
    candidates = np.nonzero(ok)[0]
    if n > len(candidates):
        raise ValueError(
            f"requested {n} correspondences but only {len(candidates)} covisible pixels"
        )
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(candidates, size=n, replace=False))
    pixels_b = np.column_stack([uu.reshape(-1)[chosen], vv.reshape(-1)[chosen]]).astype(np.float64)
    pixels_a = np.column_stack([ua[chosen], va[chosen]])
    if noise_sigma > 0:
        pixels_a = pixels_a + rng.normal(0.0, noise_sigma, pixels_a.shape)
        pixels_b = pixels_b + rng.normal(0.0, noise_sigma, pixels_b.shape)
    return CorrespondenceSet(frame_a.index, frame_b.index, pixels_a, pixels_b)


# ---------------------------------------------------------------------------
# fixture scenes


def demo_intrinsics(width: int = 64, height: int = 48,
                    focal: float = 60.0) -> CameraIntrinsics:
    return CameraIntrinsics(fx=focal, fy=focal, cx=(width - 1) / 2.0,
                            cy=(height - 1) / 2.0, width=width, height=height)


def _oscillating_trajectory(n_frames: int, amp_x: float = 0.8, period_x: float = 37.0,
                            amp_z: float = 0.35, period_z: float = 53.0,
                            yaw_amp: float = 0.015, yaw_period: float = 41.0):
    poses = []
    for f in range(n_frames):
        t = np.array(
            [
                amp_x * np.sin(2.0 * np.pi * f / period_x),
                0.05 * np.sin(2.0 * np.pi * f / 29.0),
                amp_z * np.sin(2.0 * np.pi * f / period_z),
            ]
        )
        yaw = yaw_amp * np.sin(2.0 * np.pi * f / yaw_period)
        c, s = np.cos(yaw), np.sin(yaw)
        R = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        poses.append(Pose(R, t))
    return tuple(poses)


def _scene_boxes(rng: np.random.Generator, n_boxes: int, start_category: int):
    boxes = []
    xs = np.linspace(-3.2, 3.2, n_boxes) + rng.uniform(-0.4, 0.4, n_boxes)
    for i in range(n_boxes):
        zc = rng.uniform(3.5, 9.0)
        half = rng.uniform(0.5, 0.95)
        depth_half = rng.uniform(0.4, 0.8)
        yc = rng.uniform(-0.4, 0.3)
        boxes.append(
            BoxObject(
                lo=(xs[i] - half, yc - half, zc - depth_half),
                hi=(xs[i] + half, yc + half, zc + depth_half),
                category=3 + i,
                instance=3 + i,
            )
        )
    return boxes


def source_scene(seed: int, n_frames: int = 30, width: int = 64,
                 height: int = 48, shift: DomainShift = DomainShift()) -> SceneSpec:
    """Static scene family used for pre-training and adaptation streams:
    ground plane, backdrop, and a row of textured boxes."""
    rng = np.random.default_rng((seed, 7))
    K = demo_intrinsics(width, height)
    objects = [
        PlaneObject(axis=1, offset=1.15, lo=(-16.0, 0.2), hi=(16.0, 40.0),
                    category=1, instance=1),
        PlaneObject(axis=2, offset=13.0, lo=(-16.0, -12.0), hi=(16.0, 12.0),
                    category=2, instance=2),
    ]
    objects.extend(_scene_boxes(rng, n_boxes=4, start_category=3))
    return SceneSpec(
        seed=seed,
        intrinsics=K,
        objects=tuple(objects),
        trajectory=_oscillating_trajectory(n_frames),
        shift=shift,
    )


def shifted_scene(seed: int, n_frames: int = 30, width: int = 64,
                  height: int = 48, shift: DomainShift = DEFAULT_SHIFT) -> SceneSpec:
    """Same scene family under the default domain shift."""
    return source_scene(seed, n_frames, width, height, shift=shift)


def moving_box_scene(seed: int = 0, width: int = 80, height: int = 60,
                     n_frames: int = 2) -> SceneSpec:
    """Static camera watching one large box translating laterally and in
    depth; ground/backdrop are unlabeled, two labeled boxes stay static.
    The masking fixture behind the dynamic-region acceptance check."""
    K = CameraIntrinsics(fx=70.0, fy=70.0, cx=(width - 1) / 2.0,
                         cy=(height - 1) / 2.0, width=width, height=height)
    objects = (
        PlaneObject(axis=1, offset=1.3, lo=(-30.0, 0.2), hi=(30.0, 40.0),
                    category=0, instance=0),
        PlaneObject(axis=2, offset=10.0, lo=(-30.0, -20.0), hi=(30.0, 20.0),
                    category=0, instance=0),
        BoxObject(lo=(-2.9, -0.8, 5.5), hi=(-1.5, 0.6, 6.6), category=3, instance=3),
        BoxObject(lo=(1.7, -0.75, 6.0), hi=(3.1, 0.65, 7.1), category=4, instance=4),
        BoxObject(lo=(-0.73, -0.73, 3.0), hi=(0.73, 0.73, 4.1), category=5, instance=5,
                  velocity=(0.17, 0.0, -0.25)),
    )
    trajectory = tuple(Pose.identity() for _ in range(n_frames))
    return SceneSpec(seed=seed, intrinsics=K, objects=objects, trajectory=trajectory)


# ---------------------------------------------------------------------------
# toy pre-training


@dataclass(frozen=True)
class PretrainReport:
    steps: int
    final_loss: float
    holdout_abs_rel: float


def evaluate_net_abs_rel(net: ToyDepthNet, frames: list[FrameTruth]) -> float:
    """Mean scale-aligned AbsRel of the net's predictions over frames."""
    vals = [evaluate_depth(net.predict(f.image), f.depth).abs_rel for f in frames]
    return float(np.mean(vals))


def _adam_update(values: dict, grads: dict, m: dict, v: dict, step: int,
                 lr: float, beta1: float = 0.9, beta2: float = 0.99,
                 eps: float = 1e-8):
    for key, g in grads.items():
        m[key] = beta1 * m[key] + (1.0 - beta1) * g
        v[key] = beta2 * v[key] + (1.0 - beta2) * g * g
        m_hat = m[key] / (1.0 - beta1**step)
        v_hat = v[key] / (1.0 - beta2**step)
        values[key] = values[key] - lr * m_hat / (np.sqrt(v_hat) + eps)


def pretrain_toy_net(scene_specs: list[SceneSpec], steps: int = 800,
                     mode: str = "direct", seed: int = 0,
                     widths=(64, 64), rank: int = 1,
                     batch_pixels: int = 4096, lr: float = 3e-3,
                     holdout: SceneSpec | None = None,
                     weights: LossWeights = LossWeights()):
    """Train a fresh base net on source-domain scenes.

    ``direct`` mode regresses inverse depth against ground truth (the
    fixture path); ``selfsup`` mode minimizes the photometric + smoothness
    + geometry objective over consecutive ground-truth-posed pairs. Only
    base weights are optimized; refiners stay at their no-op initialization.

    Returns ``(net, PretrainReport)``.
    """
    if mode not in ("direct", "selfsup"):
        raise ValueError(f"unknown pre-training mode {mode!r}")
    net = ToyDepthNet.create(widths=widths, rank=rank, seed=seed)
    base_keys = [f"layer{i}.{p}" for i in range(len(net.layers))
                 for p in ("W0", "bias")]
    rng = np.random.default_rng((seed, 13))

    scenes_frames = [generate(s) for s in scene_specs]
    m = {}
    v = {}
    last_loss = np.nan

    if mode == "direct":
        feats = []
        inv_gt = []
        for frames in scenes_frames:
            for f in frames:
                feats.append(patch_features(f.image))
                inv_gt.append(1.0 / f.depth.values.reshape(-1))
        feats = np.concatenate(feats, axis=0)
        inv_gt = np.concatenate(inv_gt)
        for step in range(1, steps + 1):
            idx = rng.integers(0, len(feats), size=min(batch_pixels, len(feats)))
            fp = net.forward_features(feats[idx], train_base=True)
            err = ad.sub(fp.inverse_depth, inv_gt[idx])
            loss = ad.tmean(ad.mul(err, err))
            loss.backward()
            grads = {k: fp.params[k].grad for k in base_keys
                     if fp.params[k].grad is not None}
            values = {f"layer{i}.W0": net.layers[i].w0 for i in range(len(net.layers))}
            values.update({f"layer{i}.bias": net.layers[i].bias for i in range(len(net.layers))})
            if not m:
                m = {k: np.zeros_like(values[k]) for k in grads}
                v = {k: np.zeros_like(values[k]) for k in grads}
            _adam_update(values, grads, m, v, step, lr)
            for i in range(len(net.layers)):
                net.layers[i].w0 = values[f"layer{i}.W0"]
                net.layers[i].bias = values[f"layer{i}.bias"]
            last_loss = float(loss.value)
    else:
        pairs = []
        for spec, frames in zip(scene_specs, scenes_frames):
            for a, b in zip(frames[:-1], frames[1:]):
                pairs.append((spec.intrinsics, a, b))
        if not pairs:
            raise ValueError("self-supervised pre-training needs at least one frame pair")
        for step in range(1, steps + 1):
            K, fa, fb = pairs[int(rng.integers(0, len(pairs)))]
            fwd_b = net.forward(fb.image, train_base=True)
            fwd_a = net.forward(fa.image, train_base=True)
            pose_b_to_a = relative_pose(fb, fa)
            _, loss = total_loss(
                fb.image, fa.image, fwd_b.depth, fwd_a.depth, pose_b_to_a, K,
                dense_depth=None, mask=None, weights=weights,
            )
            loss.backward()
            grads = {}
            for params in (fwd_b.params, fwd_a.params):
                for k in base_keys:
                    if params[k].grad is None:
                        continue
                    grads[k] = grads.get(k, 0.0) + params[k].grad
            values = {f"layer{i}.W0": net.layers[i].w0 for i in range(len(net.layers))}
            values.update({f"layer{i}.bias": net.layers[i].bias for i in range(len(net.layers))})
            if not m:
                m = {k: np.zeros_like(values[k]) for k in grads}
                v = {k: np.zeros_like(values[k]) for k in grads}
            _adam_update(values, grads, m, v, step, lr)
            for i in range(len(net.layers)):
                net.layers[i].w0 = values[f"layer{i}.W0"]
                net.layers[i].bias = values[f"layer{i}.bias"]
            last_loss = float(loss.value)

    holdout_abs_rel = np.nan
    if holdout is not None:
        holdout_abs_rel = evaluate_net_abs_rel(net, generate(holdout))
    return net, PretrainReport(steps=steps, final_loss=last_loss,
                               holdout_abs_rel=float(holdout_abs_rel))
