"""Sparse depth densification guided by semantic labels and an image grid.

Each image is tiled into ``d x d`` rectangular cells (remainder pixels are
absorbed by the last row/column of cells). Pixels sharing a (cell, category)
with at least one sparse sample receive the mean depth of those samples;
labeled pixels in sample-free (cell, category) pairs receive the mean of the
five nearest same-category samples image-wide (all available when fewer than
five exist). Unlabeled pixels, categories without any sample, and pixels
flagged dynamic stay invalid (0.0).

``densify`` and ``densify_reference`` implement the same rule twice: a
vectorized path and a deliberately plain per-pixel loop used as its oracle.
Both fix the same canonical sample order (sorted by (v, u)) and the same
sequential accumulation order so their outputs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import DepthMap, MaskMap, SegMap
from .triangulation import SparseDepth

NEIGHBOR_COUNT = 5


@dataclass(frozen=True)
class GridSpec:
    """Grid divisions per axis; default follows the 20x20 gridding rule."""

    d: int = 20

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("grid divisions must be >= 1")

    def cell_size(self, width: int, height: int) -> tuple[int, int]:
        return max(1, width // self.d), max(1, height // self.d)


def cell_of(pixel, grid: GridSpec, width: int, height: int) -> tuple[int, int]:
    """Cell (col, row) of a pixel; remainder pixels land in the last cells."""
    u, v = float(pixel[0]), float(pixel[1])
    if not (0 <= u < width and 0 <= v < height):
        raise ValueError(f"pixel ({u}, {v}) outside {width}x{height} image")
    cw, ch = grid.cell_size(width, height)
    return min(int(u // cw), grid.d - 1), min(int(v // ch), grid.d - 1)


def _canonical_samples(sparse: SparseDepth, seg: SegMap, mask_values):
    """Sort samples by (v, u), rasterize, and drop unlabeled/dynamic ones.

    Returns float pixel coords, depths, and category per surviving sample,
    all in the canonical order every downstream accumulation relies on.
    """
    order = np.lexsort((sparse.pixels[:, 0], sparse.pixels[:, 1]))
    px = sparse.pixels[order]
    depths = sparse.depths[order]
    ui = np.clip(np.rint(px[:, 0]).astype(np.int64), 0, seg.width - 1)
    vi = np.clip(np.rint(px[:, 1]).astype(np.int64), 0, seg.height - 1)
    cats = seg.labels[vi, ui].astype(np.int64)
    keep = cats != 0
    if mask_values is not None:
        keep &= mask_values[vi, ui] != 0
    return px[keep], depths[keep], cats[keep], ui[keep], vi[keep]


def densify(sparse: SparseDepth, seg: SegMap, grid: GridSpec = GridSpec(),
            dynamic_mask: MaskMap | None = None) -> DepthMap:
    """Densify sparse samples into a pseudo-ground-truth depth map."""
    if len(sparse) == 0:
        raise ValueError("sparse depth input is empty")
    h, w = seg.height, seg.width
    mask_values = None
    if dynamic_mask is not None:
        if dynamic_mask.values.shape != (h, w):
            raise ValueError("dynamic mask dimensions must match the segmentation")
        mask_values = dynamic_mask.values

    px, depths, cats, sui, svi = _canonical_samples(sparse, seg, mask_values)
    out = np.zeros((h, w))
    if len(depths) == 0:
        return DepthMap(out)

    cw, ch = grid.cell_size(w, h)
    d = grid.d
    s_cell = (np.minimum(svi // ch, d - 1) * d + np.minimum(sui // cw, d - 1))
    # group key mixes cell index and category; bincount accumulates the
    # depth sums sequentially in canonical sample order
    s_key = s_cell * 65536 + cats
    uniq_keys, group_of = np.unique(s_key, return_inverse=True)
    group_sum = np.bincount(group_of, weights=depths, minlength=len(uniq_keys))
    group_cnt = np.bincount(group_of, minlength=len(uniq_keys))
    group_mean = group_sum / group_cnt

    vv, uu = np.mgrid[0:h, 0:w]
    p_cell = np.minimum(vv // ch, d - 1) * d + np.minimum(uu // cw, d - 1)
    labels = seg.labels.astype(np.int64)
    target = labels != 0
    if mask_values is not None:
        target &= mask_values != 0
    p_key = p_cell * 65536 + labels
    slot = np.searchsorted(uniq_keys, p_key)
    slot_ok = (slot < len(uniq_keys))
    hit = np.zeros((h, w), dtype=bool)
    hit[slot_ok] = uniq_keys[slot[slot_ok]] == p_key[slot_ok]
    direct = target & hit
    out[direct] = group_mean[slot[direct]]

    # nearest-neighbor fill for labeled pixels whose (cell, category) is empty
    sampled_cats = np.unique(cats)
    needy = target & ~hit & np.isin(labels, sampled_cats)
    if np.any(needy):
        for cat in sampled_cats:
            rows = needy & (labels == cat)
            if not np.any(rows):
                continue
            sel = cats == cat
            su = px[sel, 0]
            sv = px[sel, 1]
            sd = depths[sel]
            qu = uu[rows].astype(np.float64)
            qv = vv[rows].astype(np.float64)
            du = qu[:, None] - su[None, :]
            dv = qv[:, None] - sv[None, :]
            d2 = du * du + dv * dv
            k = min(NEIGHBOR_COUNT, len(sd))
            # stable sort over canonically ordered samples implements the
            # (distance, then smaller v, then smaller u) tie rule
            nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
            out[rows] = np.sum(sd[nearest], axis=1) / k
    return DepthMap(out)


def densify_reference(sparse: SparseDepth, seg: SegMap, grid: GridSpec = GridSpec(),
                      dynamic_mask: MaskMap | None = None) -> DepthMap:
    """Plain per-pixel reimplementation of :func:`densify` (exhaustive
    nearest-neighbor search, no vectorization); the equivalence oracle."""
    if len(sparse) == 0:
        raise ValueError("sparse depth input is empty")
    h, w = seg.height, seg.width
    mask_values = None
    if dynamic_mask is not None:
        if dynamic_mask.values.shape != (h, w):
            raise ValueError("dynamic mask dimensions must match the segmentation")
        mask_values = dynamic_mask.values

    idx = sorted(range(len(sparse)),
                 key=lambda i: (sparse.pixels[i, 1], sparse.pixels[i, 0]))
    samples = []  # (u, v, depth, category) in canonical order
    for i in idx:
        u, v = sparse.pixels[i]
        ui = min(max(int(round(u)), 0), w - 1)
        vi = min(max(int(round(v)), 0), h - 1)
        cat = int(seg.labels[vi, ui])
        if cat == 0:
            continue
        if mask_values is not None and mask_values[vi, ui] == 0:
            continue
        samples.append((float(u), float(v), float(sparse.depths[i]), cat))

    out = np.zeros((h, w))
    if not samples:
        return DepthMap(out)

    groups: dict[tuple, list] = {}
    by_cat: dict[int, list] = {}
    for j, (u, v, depth, cat) in enumerate(samples):
        key = (*cell_of((u, v), grid, w, h), cat)
        groups.setdefault(key, []).append(depth)
        by_cat.setdefault(cat, []).append((u, v, depth, j))

    for v in range(h):
        for u in range(w):
            cat = int(seg.labels[v, u])
            if cat == 0 or cat not in by_cat:
                continue
            if mask_values is not None and mask_values[v, u] == 0:
                continue
            key = (*cell_of((u, v), grid, w, h), cat)
            if key in groups:
                vals = groups[key]
                total = 0.0
                for x in vals:
                    total += x
                out[v, u] = total / len(vals)
                continue
            ranked = sorted(
                ((float(su - u) * float(su - u) + float(sv - v) * float(sv - v), j, depth)
                 for su, sv, depth, j in by_cat[cat]),
                key=lambda t: (t[0], t[1]),
            )
            chosen = ranked[: min(NEIGHBOR_COUNT, len(ranked))]
            total = 0.0
            for _, _, depth in chosen:
                total += depth
            out[v, u] = total / len(chosen)
    return DepthMap(out)
