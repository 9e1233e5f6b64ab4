"""Closed-loop online adaptation of the refiner parameters.

Per incoming frame pair: predict depths, solve the relative pose from the
pseudo depth, compute consistency masks, triangulate and densify a pseudo
ground truth, then take one Adam step on the refiners using the mean loss
over the most recent pairs. An EMA-smoothed variance test stops learning
permanently once the loss stream settles; pose tracking continues after
the stop.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .densify import GridSpec, densify
from .geometry import CameraIntrinsics, MaskMap, Pose, Trajectory
from .losses import LossWeights, total_loss
from .masks import (compose_mask, compute_mgc, compute_msc, compute_ws,
                    consistency_depth_pair, regions_from_seg)
from .pose_solver import (DegenerateGeometryError, NoMapPointsError,
                          init_map_points, solve_pose)
from .refinernet import ToyDepthNet
from .triangulation import (CorrespondenceSet, EmptySparseDepthError,
                            build_sparse_depth)

# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment accumulators for the refiner parameters."""

    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """One bias-corrected Adam update; returns the new parameter dict.

    Moments decay even for zero gradients; parameters whose gradient is
    missing are left untouched.
    """
    state.step += 1
    t = state.step
    out = dict(params)
    for key, g in grads.items():
        if key not in state.m:
            state.m[key] = np.zeros_like(params[key])
            state.v[key] = np.zeros_like(params[key])
        state.m[key] = state.beta1 * state.m[key] + (1.0 - state.beta1) * g
        state.v[key] = state.beta2 * state.v[key] + (1.0 - state.beta2) * g * g
        m_hat = state.m[key] / (1.0 - state.beta1**t)
        v_hat = state.v[key] / (1.0 - state.beta2**t)
        out[key] = params[key] - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


def lr_at(step: int, base: float = 1e-4, decay: float = 0.1,
          every: int = 100) -> float:
    """Step-decayed learning rate: ``base * decay^(step // every)``."""
    return base * decay ** (step // every)


# ---------------------------------------------------------------------------
# stop-learning controller


@dataclass
class StopState:
    """EMA-smoothed loss window for the stop-learning test.

    The raw loss stream is smoothed with ``ema_constant`` weight on the
    previous smoothed value; learning stops once at least ``min_steps``
    updates have happened, the window of the last ``window`` smoothed
    values is full, and their sample variance falls below ``threshold``.
    The stop flag never reverts. A config switch selects the alternative
    reading (EMA of squared deviations) of the same test.
    """

    min_steps: int = 300
    window: int = 50
    threshold: float = 0.1
    ema_constant: float = 0.6
    variant: str = "window-variance"  # or "ema-of-squares"
    step: int = 0
    ema: float | None = None
    var_ema: float = 0.0
    values: deque = field(default_factory=deque)
    stopped: bool = False


def stop_check(state: StopState, new_loss: float) -> bool:
    """Feed one loss value; returns (and latches) the stop decision."""
    if state.stopped:
        return True
    state.step += 1
    prev = state.ema
    if prev is None:
        state.ema = float(new_loss)
    else:
        state.ema = state.ema_constant * prev + (1.0 - state.ema_constant) * float(new_loss)
    if state.variant == "ema-of-squares":
        if prev is not None:
            dev = float(new_loss) - prev
            state.var_ema = (state.ema_constant * state.var_ema
                             + (1.0 - state.ema_constant) * dev * dev)
            if state.step >= state.min_steps and state.var_ema < state.threshold:
                state.stopped = True
        return state.stopped
    state.values.append(state.ema)
    if len(state.values) > state.window:
        state.values.popleft()
    if (
        state.step >= state.min_steps
        and len(state.values) == state.window
        and float(np.var(np.array(state.values), ddof=1)) < state.threshold
    ):
        state.stopped = True
    return state.stopped


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class AdaptConfig:
    """Everything the online loop needs, JSON round-trippable."""

    seed: int = 0
    batch_pairs: int = 4
    n_matches: int = 250
    lr_base: float = 1e-4
    lr_decay: float = 0.1
    lr_decay_every: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    stop_min_steps: int = 300
    stop_window: int = 50
    stop_threshold: float = 0.1
    stop_ema: float = 0.6
    stop_variant: str = "window-variance"
    alpha: float = 0.85
    lambda_smooth: float = 0.1
    lambda_geometry: float = 0.1
    lambda_depth: float = 0.1
    grid_d: int = 20
    tau_s: float = 0.85
    mgc_fraction: float = 0.2
    ws_in_graph: bool = False
    max_steps: int | None = None

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.lambda_smooth,
                           self.lambda_geometry, self.lambda_depth)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "AdaptConfig":
        return AdaptConfig(**json.loads(text))


# ---------------------------------------------------------------------------
# the loop


@dataclass
class StreamFrame:
    """One input frame of the online stream (no ground truth)."""

    image: np.ndarray
    seg: object  # SegMap
    matches_to_prev: CorrespondenceSet | None = None


@dataclass
class PairRecord:
    image_prev: np.ndarray
    image_cur: np.ndarray
    pose_cur_to_prev: Pose
    dense_depth: np.ndarray | None
    mask: np.ndarray


@dataclass
class RunResult:
    trajectory: Trajectory
    loss_rows: list
    stop_step: int | None
    learning_steps: int
    skipped_pairs: list
    net: ToyDepthNet


def _pair_feedback(prev: StreamFrame, cur: StreamFrame, net: ToyDepthNet,
                   K: CameraIntrinsics, config: AdaptConfig,
                   pose_init: Pose, point_mask: MaskMap | None):
    """Prediction + update stages for one arriving pair: pose from pseudo
    depth, consistency masks, triangulated and densified pseudo depth."""
    if cur.matches_to_prev is None or len(cur.matches_to_prev) == 0:
        raise ValueError("stream frame carries no correspondences to its predecessor")
    matches = cur.matches_to_prev
    depth_prev = net.predict(prev.image)
    depth_cur = net.predict(cur.image)

    # pre-filter matches (mask gate + sampling bounds) so map points and
    # observations stay aligned; predicted depth is valid everywhere
    keep = []
    for i, pa in enumerate(matches.pixels_a):
        if not (0 <= pa[0] <= K.width - 1 and 0 <= pa[1] <= K.height - 1):
            continue
        if point_mask is not None and not _mask_keeps(point_mask, pa):
            continue
        keep.append(i)
    if len(keep) < 6:
        raise NoMapPointsError("fewer than 6 mask-surviving matches")
    points = init_map_points(depth_prev, matches.pixels_a[keep], Pose.identity(), K)
    obs = matches.pixels_b[keep]
    if len(points) != len(obs):  # pragma: no cover - depth is always valid
        raise NoMapPointsError("map-point initialization dropped pixels unexpectedly")
    pose_prev_to_cur, report = solve_pose(points, obs, pose_init, K)
    pose_cur_to_prev = pose_prev_to_cur.inverse()

    d_prev_i, d_proj, valid = consistency_depth_pair(depth_cur, depth_prev,
                                                     pose_cur_to_prev, K)
    ws, ws_valid = compute_ws(d_prev_i, d_proj)
    regions_cur = regions_from_seg(cur.seg, matches.frame_b)
    regions_prev = regions_from_seg(prev.seg, matches.frame_a)
    m_sc = compute_msc(regions_cur, regions_prev, depth_cur, pose_cur_to_prev,
                       K, config.tau_s)
    m_gc = compute_mgc(ws, ws_valid, config.mgc_fraction)
    mask = compose_mask(m_sc, m_gc)

    sparse, _ = build_sparse_depth(matches, pose_prev_to_cur, K)
    dense = densify(sparse, cur.seg, GridSpec(config.grid_d), dynamic_mask=mask)
    return pose_prev_to_cur, report, mask, dense, depth_cur


def _mask_keeps(mask: MaskMap, pixel) -> bool:
    u = int(round(float(pixel[0])))
    v = int(round(float(pixel[1])))
    if not (0 <= u < mask.width and 0 <= v < mask.height):
        return False
    return mask.values[v, u] != 0


def run_online(frames: list, net: ToyDepthNet, K: CameraIntrinsics,
               config: AdaptConfig = AdaptConfig(),
               learning: bool = True) -> RunResult:
    """Drive the full online loop over a frame stream.

    ``frames`` are :class:`StreamFrame`-like objects (image, seg, matches
    to the previous frame). The first frame anchors the trajectory at the
    identity pose. With ``learning=False`` the refiners are never updated
    (the no-online-learning ablation); the pose track is then exactly the
    solver output on frozen-net depths.
    """
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    weights = config.loss_weights()
    stop = StopState(
        min_steps=config.stop_min_steps,
        window=config.stop_window,
        threshold=config.stop_threshold,
        ema_constant=config.stop_ema,
        variant=config.stop_variant,
    )
    adam = AdamState(beta1=config.adam_beta1, beta2=config.adam_beta2,
                     eps=config.adam_eps)
    batch: deque[PairRecord] = deque(maxlen=config.batch_pairs)
    timestamps = [0.0]
    poses_wc = [Pose.identity()]
    loss_rows = []
    skipped = []
    stop_step = None
    learning_steps = 0
    last_motion = Pose.identity()  # previous prev->cur estimate
    prev_mask: MaskMap | None = None

    for t in range(1, len(frames)):
        prev, cur = frames[t - 1], frames[t]
        try:
            pose_prev_to_cur, report, mask, dense, _ = _pair_feedback(
                prev, cur, net, K, config, last_motion, prev_mask
            )
            pair_ok = True
        except (DegenerateGeometryError, NoMapPointsError,
                EmptySparseDepthError, ValueError) as exc:
            skipped.append((t, str(exc)))
            pair_ok = False
            pose_prev_to_cur = last_motion  # constant-motion fallback

        timestamps.append(float(t))
        poses_wc.append(poses_wc[-1].compose(pose_prev_to_cur.inverse()))
        last_motion = pose_prev_to_cur
        if pair_ok:
            prev_mask = mask
            batch.append(
                PairRecord(prev.image, cur.image, pose_prev_to_cur.inverse(),
                           dense.values, mask.values)
            )

        if not learning or stop.stopped or not pair_ok or not batch:
            continue
        if config.max_steps is not None and learning_steps >= config.max_steps:
            continue

        # one Adam step on the mean loss over the batch; each distinct image
        # in the batch is forwarded once and shared between pair losses
        fwd_cache: dict[int, object] = {}

        def forward(img):
            key = id(img)
            if key not in fwd_cache:
                fwd_cache[key] = net.forward(img)
            return fwd_cache[key]

        pair_losses = []
        breakdown = None
        for rec in batch:
            f_prev = forward(rec.image_prev)
            f_cur = forward(rec.image_cur)
            bd, loss = total_loss(
                rec.image_cur, rec.image_prev, f_cur.depth, f_prev.depth,
                rec.pose_cur_to_prev, K, dense_depth=rec.dense_depth,
                mask=rec.mask, weights=weights, ws_in_graph=config.ws_in_graph,
            )
            pair_losses.append(loss)
            if rec is batch[-1]:
                breakdown = bd
        total = pair_losses[0]
        for extra in pair_losses[1:]:
            total = ad.add(total, extra)
        total = ad.div(total, float(len(pair_losses)))
        total.backward()

        grads: dict[str, np.ndarray] = {}
        for fwd in fwd_cache.values():
            for key, tensor in fwd.params.items():
                if tensor.grad is None:
                    continue
                grads[key] = grads.get(key, 0.0) + tensor.grad

        params = net.refiner_state()
        lr = lr_at(learning_steps, config.lr_base, config.lr_decay,
                   config.lr_decay_every)
        net.set_refiner_state(adam_step(params, grads, adam, lr))
        learning_steps += 1

        loss_rows.append(breakdown.as_row(learning_steps))
        if stop_check(stop, float(total.value)) and stop_step is None:
            stop_step = learning_steps
    return RunResult(
        trajectory=Trajectory(tuple(timestamps), tuple(poses_wc)),
        loss_rows=loss_rows,
        stop_step=stop_step,
        learning_steps=learning_steps,
        skipped_pairs=skipped,
        net=net,
    )
