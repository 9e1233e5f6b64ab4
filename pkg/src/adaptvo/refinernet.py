"""Layered depth predictor with frozen base weights and low-rank refiners.

Each layer computes ``h = W0 x + B (A x) + bias`` followed by tanh (hidden
layers) or nothing (final layer). ``W0`` and ``bias`` stay frozen; only the
low-rank pair ``(A, B)`` trains. ``B`` starts at exactly zero so a freshly
refined net reproduces its base net bit for bit.

The network maps each pixel's local appearance to depth: a 3x3 intensity
patch is read at three pyramid scales (27 features), pushed through the
layers to a single logit, squashed to a positive inverse depth with
softplus, and inverted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import DepthMap

PATCH_OFFSETS = (-1, 0, 1)
PATCH_SCALES = 3
FEATURE_DIM = len(PATCH_OFFSETS) ** 2 * PATCH_SCALES  # 27
INV_DEPTH_FLOOR = 1e-4  # caps depth at 10 km, keeps the inversion finite

DEFAULT_WIDTHS = (64, 64)
DEFAULT_RANK = 1  # net-level default; keeps trainable share under 5%
REFINER_DEFAULT_RANK = 8
REFINER_INIT_STD = 0.02


@dataclass
class LowRankRefiner:
    """Trainable low-rank pair: ``A`` (r x k) Gaussian, ``B`` (d x r) zero."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = np.ascontiguousarray(self.a, dtype=np.float64)
        self.b = np.ascontiguousarray(self.b, dtype=np.float64)
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[0] != self.b.shape[1]:
            raise ValueError("A must be (r, k) and B (d, r)")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @staticmethod
    def create(d: int, k: int, rank: int = REFINER_DEFAULT_RANK,
               rng: np.random.Generator | None = None) -> "LowRankRefiner":
        rng = rng or np.random.default_rng(0)
        a = rng.normal(0.0, REFINER_INIT_STD, size=(rank, k))
        return LowRankRefiner(a, np.zeros((d, rank)))


@dataclass
class RefinerLayer:
    """One affine layer: frozen ``w0``/``bias`` plus its refiner pair."""

    w0: np.ndarray
    bias: np.ndarray
    a: np.ndarray
    b: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        self.w0 = np.ascontiguousarray(self.w0, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        self.a = np.ascontiguousarray(self.a, dtype=np.float64)
        self.b = np.ascontiguousarray(self.b, dtype=np.float64)
        d, k = self.w0.shape
        if self.bias.shape != (d,):
            raise ValueError("bias length must match the output dimension")
        if self.a.shape[1] != k or self.b.shape[0] != d or self.a.shape[0] != self.b.shape[1]:
            raise ValueError("refiner shapes must be A (r, k), B (d, r)")
        if self.activation not in ("tanh", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def rank(self) -> int:
        return self.a.shape[0]


class TapeConsumedError(RuntimeError):
    """The gradient tape was already used for a backward pass."""


class GradientTape:
    """Recorded forward graph plus the refiner parameter tensors.

    One backward pass per tape; gradients exist only for the A/B matrices.
    """

    def __init__(self, output: ad.Tensor, params: dict[str, ad.Tensor]):
        self.output = output
        self.params = params
        self._consumed = False

    def backward(self, scalar: ad.Tensor | None = None) -> dict[str, np.ndarray]:
        """Run reverse mode from ``scalar`` (default: the recorded output,
        which must then be scalar-valued). Returns gradients keyed like
        ``params``; zero arrays for parameters the loss does not reach."""
        if self._consumed:
            raise TapeConsumedError("gradient tape already consumed")
        self._consumed = True
        root = scalar if scalar is not None else self.output
        root.backward()
        grads = {}
        for name, p in self.params.items():
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.value)
        return grads


def backprop_refiners(tape: GradientTape, loss: ad.Tensor | None = None,
                      seed: float = 1.0) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of a scalar loss for every refiner
    parameter; frozen weights receive none. ``seed`` scales the result."""
    grads = tape.backward(loss)
    if seed != 1.0:
        grads = {k: g * seed for k, g in grads.items()}
    return grads


def layer_forward(x, layer: RefinerLayer, train_base: bool = False):
    """Apply one layer to a feature batch (n, k) -> (n, d).

    Accepts a Tensor or array; returns a Tensor when given a Tensor or when
    parameters are trainable. The refiner term is skipped entirely at rank 0.
    """
    xt = ad.as_tensor(x)
    if xt.value.shape[-1] != layer.w0.shape[1]:
        raise ValueError(
            f"feature dimension {xt.value.shape[-1]} does not match layer input {layer.w0.shape[1]}"
        )
    w0 = ad.Tensor(layer.w0, requires_grad=train_base)
    bias = ad.Tensor(layer.bias, requires_grad=train_base)
    a = ad.parameter(layer.a)
    b = ad.parameter(layer.b)
    h = ad.matmul(xt, _transpose(w0))
    if layer.rank > 0:
        h = ad.add(h, ad.matmul(ad.matmul(xt, _transpose(a)), _transpose(b)))
    h = ad.add(h, bias)
    if layer.activation == "tanh":
        h = ad.tanh(h)
    return h, {"A": a, "B": b, "W0": w0, "bias": bias}


def _transpose(t: ad.Tensor) -> ad.Tensor:
    return ad.Tensor(t.value.T, parents=(t,), vjp=lambda g: (g.T,))


def _halve(img: np.ndarray) -> np.ndarray:
    """2x2 mean pooling with edge replication for odd sizes."""
    h, w = img.shape
    if h % 2:
        img = np.vstack([img, img[-1:]])
    if w % 2:
        img = np.hstack([img, img[:, -1:]])
    return 0.25 * (img[0::2, 0::2] + img[0::2, 1::2] + img[1::2, 0::2] + img[1::2, 1::2])


def patch_features(image: np.ndarray) -> np.ndarray:
    """Per-pixel feature vectors: 3x3 patches at three pyramid scales,
    flattened to (h*w, 27). Patch reads clamp at the borders."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    levels = [img]
    for _ in range(PATCH_SCALES - 1):
        levels.append(_halve(levels[-1]))
    vv, uu = np.mgrid[0:h, 0:w]
    feats = []
    for s, lev in enumerate(levels):
        lh, lw = lev.shape
        cu = np.minimum(uu >> s, lw - 1)
        cv = np.minimum(vv >> s, lh - 1)
        for dy in PATCH_OFFSETS:
            yy = np.clip(cv + dy, 0, lh - 1)
            for dx in PATCH_OFFSETS:
                xx = np.clip(cu + dx, 0, lw - 1)
                feats.append(lev[yy, xx])
    return np.stack(feats, axis=-1).reshape(h * w, FEATURE_DIM)


@dataclass
class ForwardPass:
    """Result of a differentiable forward pass."""

    depth: ad.Tensor            # (h, w) or (n,) strictly positive depths
    inverse_depth: ad.Tensor
    params: dict[str, ad.Tensor]

    def tape(self) -> GradientTape:
        return GradientTape(self.depth, self.params)


class ToyDepthNet:
    """Patch-feature depth regressor with per-layer low-rank refiners."""

    def __init__(self, layers: list[RefinerLayer]):
        if not layers:
            raise ValueError("network needs at least one layer")
        if layers[-1].w0.shape[0] != 1:
            raise ValueError("final layer must map to a single inverse-depth logit")
        self.layers = layers

    @staticmethod
    def create(widths=DEFAULT_WIDTHS, rank: int = DEFAULT_RANK,
               seed: int = 0) -> "ToyDepthNet":
        rng = np.random.default_rng(seed)
        dims = [FEATURE_DIM, *widths, 1]
        layers = []
        for i, (k, d) in enumerate(zip(dims[:-1], dims[1:])):
            w0 = rng.normal(0.0, 1.0 / np.sqrt(k), size=(d, k))
            refiner = LowRankRefiner.create(d, k, rank, rng)
            act = "tanh" if i < len(dims) - 2 else "linear"
            layers.append(RefinerLayer(w0, np.zeros(d), refiner.a, refiner.b, act))
        return ToyDepthNet(layers)

    # -- parameter bookkeeping ------------------------------------------
    def trainable_parameter_count(self) -> int:
        return sum(layer.a.size + layer.b.size for layer in self.layers)

    def total_parameter_count(self) -> int:
        return sum(
            layer.w0.size + layer.bias.size + layer.a.size + layer.b.size
            for layer in self.layers
        )

    def refiner_state(self) -> dict[str, np.ndarray]:
        state = {}
        for i, layer in enumerate(self.layers):
            state[f"layer{i}.A"] = layer.a
            state[f"layer{i}.B"] = layer.b
        return state

    def set_refiner_state(self, state: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            layer.a = np.ascontiguousarray(state[f"layer{i}.A"], dtype=np.float64)
            layer.b = np.ascontiguousarray(state[f"layer{i}.B"], dtype=np.float64)

    def base_state(self) -> dict[str, np.ndarray]:
        state = {}
        for i, layer in enumerate(self.layers):
            state[f"layer{i}.W0"] = layer.w0.copy()
            state[f"layer{i}.bias"] = layer.bias.copy()
        return state

    # -- forward passes ---------------------------------------------------
    def forward_features(self, feats: np.ndarray, train_base: bool = False) -> ForwardPass:
        """Differentiable forward over a feature batch (n, 27) -> depths (n,)."""
        x = ad.constant(feats)
        params: dict[str, ad.Tensor] = {}
        for i, layer in enumerate(self.layers):
            x, tensors = layer_forward(x, layer, train_base=train_base)
            params[f"layer{i}.A"] = tensors["A"]
            params[f"layer{i}.B"] = tensors["B"]
            if train_base:
                params[f"layer{i}.W0"] = tensors["W0"]
                params[f"layer{i}.bias"] = tensors["bias"]
        logits = ad.reshape(x, (x.value.shape[0],))
        inv = ad.add(ad.softplus(logits), INV_DEPTH_FLOOR)
        depth = ad.div(1.0, inv)
        return ForwardPass(depth, inv, params)

    def forward(self, image: np.ndarray, train_base: bool = False) -> ForwardPass:
        """Differentiable forward over an intensity image -> (h, w) depths."""
        h, w = np.asarray(image).shape
        fp = self.forward_features(patch_features(image), train_base=train_base)
        depth = ad.reshape(fp.depth, (h, w))
        inv = ad.reshape(fp.inverse_depth, (h, w))
        return ForwardPass(depth, inv, fp.params)

    def predict(self, image: np.ndarray) -> DepthMap:
        """Plain depth prediction (same computation path as ``forward``)."""
        return DepthMap(self.forward(image).depth.value)

    def forward_base(self, image: np.ndarray) -> np.ndarray:
        """Depth prediction of the frozen base net, refiners skipped entirely."""
        x = patch_features(image)
        for layer in self.layers:
            x = x @ layer.w0.T + layer.bias
            if layer.activation == "tanh":
                x = np.tanh(x)
        h, w = np.asarray(image).shape
        inv = np.logaddexp(0.0, x.reshape(-1)) + INV_DEPTH_FLOOR
        return (1.0 / inv).reshape(h, w)
