"""Binary and text file formats shared across the pipeline.

Binary rasters (all little-endian, row-major):
  "DPF1"  u32 width, u32 height, f32 depths (0.0 = invalid)
  "SEG1"  u32 width, u32 height, u16 labels
  "MSK1"  u32 width, u32 height, f32 weights in [0, 1]

Network file:
  "NET1"  u32 layer count; per layer u32 d, u32 k, u32 r, f64 W0 (d*k),
  f64 bias (d), f64 A (r*k), f64 B (d*r), u8 flags (bit0: base frozen,
  bit1: refiner trainable). The architecture family is fixed: tanh hidden
  layers, a linear final layer, softplus-to-inverse-depth output head.

Text formats: TUM trajectories ("timestamp tx ty tz qx qy qz qw"),
sparse-depth samples, pixel-match lists, loss-log CSV, PGM (P5) images.
Floats are written with repr-exact precision so files round-trip and two
identical runs produce byte-identical outputs.
"""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path

import numpy as np

from .geometry import DepthMap, MaskMap, Pose, SegMap, Trajectory

_F = "%.17g"


class FormatError(ValueError):
    """Malformed input file; message carries the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}", f.tell() - len(data))
    return data


def _read_header(f, magic: bytes):
    got = _read_exact(f, 4, "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
    w, h = struct.unpack("<II", _read_exact(f, 8, "dimensions"))
    if w == 0 or h == 0:
        raise FormatError(f"degenerate dimensions {w}x{h}", 4)
    return w, h


def _write_raster(path, magic: bytes, array: np.ndarray, dtype) -> None:
    h, w = array.shape
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def _read_raster(path, magic: bytes, dtype, itemsize: int) -> np.ndarray:
    with open(path, "rb") as f:
        w, h = _read_header(f, magic)
        payload = _read_exact(f, w * h * itemsize, "raster payload")
        extra = f.read(1)
        if extra:
            raise FormatError("trailing bytes after raster payload", f.tell() - 1)
    return np.frombuffer(payload, dtype=dtype).reshape(h, w)


def write_depth(path, depth: DepthMap) -> None:
    _write_raster(path, b"DPF1", depth.values, "<f4")


def read_depth(path) -> DepthMap:
    return DepthMap(_read_raster(path, b"DPF1", "<f4", 4).astype(np.float64))


def write_seg(path, seg: SegMap) -> None:
    _write_raster(path, b"SEG1", seg.labels, "<u2")


def read_seg(path) -> SegMap:
    return SegMap(_read_raster(path, b"SEG1", "<u2", 2))


def write_mask(path, mask: MaskMap) -> None:
    _write_raster(path, b"MSK1", mask.values, "<f4")


def read_mask(path) -> MaskMap:
    return MaskMap(_read_raster(path, b"MSK1", "<f4", 4).astype(np.float64))


# ---------------------------------------------------------------------------
# PGM images (P5, maxval 255)


def write_pgm(path, image: np.ndarray) -> None:
    """Write an intensity raster in [0, 1] as an 8-bit binary PGM."""
    img = np.asarray(image, dtype=np.float64)
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into an intensity raster in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise FormatError("not a binary PGM (P5) file", 0)
    # header: three whitespace-separated tokens after the magic
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", pos)
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}", 2)
    if len(data) - pos < w * h:
        raise FormatError("truncated PGM payload", len(data))
    q = np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w)
    return q.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# trajectories (TUM format)


def write_trajectory(path, traj: Trajectory) -> None:
    lines = []
    for ts, pose in zip(traj.timestamps, traj.poses):
        q = pose.quaternion()
        t = pose.translation
        fields = [ts, t[0], t[1], t[2], q[0], q[1], q[2], q[3]]
        lines.append(" ".join(_F % x for x in fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_trajectory(path) -> Trajectory:
    timestamps, poses = [], []
    for i, line in enumerate(Path(path).read_text(encoding="ascii").splitlines()):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(f"trajectory line {i + 1} has {len(parts)} fields, expected 8")
        ts, tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts)
        timestamps.append(ts)
        poses.append(Pose.from_quaternion((qx, qy, qz, qw), (tx, ty, tz)))
    return Trajectory(tuple(timestamps), tuple(poses))


# ---------------------------------------------------------------------------
# sparse depth samples and pixel matches


def write_sparse_depth(path, frame_id: int, pixels: np.ndarray, depths: np.ndarray) -> None:
    """One line per sample: "u v depth"; header "# frame <id>"."""
    lines = [f"# frame {frame_id}"]
    for (u, v), d in zip(np.asarray(pixels), np.asarray(depths)):
        lines.append(f"{_F % u} {_F % v} {_F % d}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_sparse_depth(path):
    frame_id = None
    pixels, depths = [], []
    for i, line in enumerate(Path(path).read_text(encoding="ascii").splitlines()):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "frame":
                frame_id = int(parts[1])
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"sparse-depth line {i + 1} has {len(parts)} fields, expected 3")
        u, v, d = (float(p) for p in parts)
        pixels.append((u, v))
        depths.append(d)
    if frame_id is None:
        raise FormatError("sparse-depth file is missing the '# frame <id>' header")
    return frame_id, np.array(pixels, dtype=np.float64).reshape(-1, 2), np.array(depths)


def write_matches(path, frame_a: int, frame_b: int,
                  pixels_a: np.ndarray, pixels_b: np.ndarray) -> None:
    """Pixel correspondences, one "ua va ub vb" line per match."""
    lines = [f"# matches {frame_a} {frame_b}"]
    for (ua, va), (ub, vb) in zip(np.asarray(pixels_a), np.asarray(pixels_b)):
        lines.append(" ".join(_F % x for x in (ua, va, ub, vb)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_matches(path):
    frame_a = frame_b = None
    pa, pb = [], []
    for i, line in enumerate(Path(path).read_text(encoding="ascii").splitlines()):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 3 and parts[0] == "matches":
                frame_a, frame_b = int(parts[1]), int(parts[2])
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"matches line {i + 1} has {len(parts)} fields, expected 4")
        ua, va, ub, vb = (float(p) for p in parts)
        pa.append((ua, va))
        pb.append((ub, vb))
    if frame_a is None:
        raise FormatError("matches file is missing the '# matches <a> <b>' header")
    return (
        frame_a,
        frame_b,
        np.array(pa, dtype=np.float64).reshape(-1, 2),
        np.array(pb, dtype=np.float64).reshape(-1, 2),
    )


# ---------------------------------------------------------------------------
# loss log CSV

LOSS_LOG_FIELDS = ("step", "l_p", "l_s", "l_g", "l_d", "l_total",
                   "n_p", "n_s", "n_g", "n_d")


def write_loss_log(path, rows) -> None:
    """Rows are dicts with :data:`LOSS_LOG_FIELDS` keys."""
    with open(path, "w", newline="", encoding="ascii") as f:
        writer = csv.writer(f)
        writer.writerow(LOSS_LOG_FIELDS)
        for row in rows:
            writer.writerow(
                [
                    int(row["step"]),
                    *(_F % row[k] for k in ("l_p", "l_s", "l_g", "l_d", "l_total")),
                    *(int(row[k]) for k in ("n_p", "n_s", "n_g", "n_d")),
                ]
            )


def read_loss_log(path):
    rows = []
    with open(path, newline="", encoding="ascii") as f:
        for rec in csv.DictReader(f):
            rows.append(
                {
                    "step": int(rec["step"]),
                    **{k: float(rec[k]) for k in ("l_p", "l_s", "l_g", "l_d", "l_total")},
                    **{k: int(rec[k]) for k in ("n_p", "n_s", "n_g", "n_d")},
                }
            )
    return rows


# ---------------------------------------------------------------------------
# network serialization ("NET1")

FLAG_BASE_FROZEN = 0x01
FLAG_REFINER_TRAINABLE = 0x02


def write_net(path, net) -> None:
    from .refinernet import ToyDepthNet  # local import to avoid a cycle

    assert isinstance(net, ToyDepthNet)
    buf = io.BytesIO()
    buf.write(b"NET1")
    buf.write(struct.pack("<I", len(net.layers)))
    for layer in net.layers:
        d, k = layer.w0.shape
        r = layer.rank
        buf.write(struct.pack("<III", d, k, r))
        buf.write(np.ascontiguousarray(layer.w0, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.a, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.b, dtype="<f8").tobytes())
        buf.write(struct.pack("<B", FLAG_BASE_FROZEN | FLAG_REFINER_TRAINABLE))
    Path(path).write_bytes(buf.getvalue())


def read_net(path):
    from .refinernet import RefinerLayer, ToyDepthNet

    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != b"NET1":
            raise FormatError(f"bad magic {magic!r}, expected b'NET1'", 0)
        (n_layers,) = struct.unpack("<I", _read_exact(f, 4, "layer count"))
        layers = []
        for i in range(n_layers):
            d, k, r = struct.unpack("<III", _read_exact(f, 12, f"layer {i} header"))
            w0 = np.frombuffer(_read_exact(f, 8 * d * k, "W0"), dtype="<f8").reshape(d, k)
            bias = np.frombuffer(_read_exact(f, 8 * d, "bias"), dtype="<f8").copy()
            a = np.frombuffer(_read_exact(f, 8 * r * k, "A"), dtype="<f8").reshape(r, k)
            b = np.frombuffer(_read_exact(f, 8 * d * r, "B"), dtype="<f8").reshape(d, r)
            (flags,) = struct.unpack("<B", _read_exact(f, 1, "flags"))
            if not flags & FLAG_BASE_FROZEN:
                raise FormatError(f"layer {i} does not mark its base weights frozen")
            activation = "tanh" if i < n_layers - 1 else "linear"
            layers.append(RefinerLayer(w0.copy(), bias, a.copy(), b.copy(), activation))
        extra = f.read(1)
        if extra:
            raise FormatError("trailing bytes after last layer", f.tell() - 1)
    return ToyDepthNet(layers)
