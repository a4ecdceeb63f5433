"""Gradient-distribution statistics and activation-attention maps, with
plain CSV/PGM emitters.

File naming convention inside a run directory:
``<run>/<epoch>_<layer>_<role>.csv`` for stats and
``<run>/attn_<image>_<layer>.pgm`` for attention maps.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .tensor import Tensor

NEAR_ZERO = 1e-8  # |g| below this counts as a vanished gradient entry


@dataclass
class GradientStatsRow:
    epoch: int
    layer: str
    role: str
    mean: float
    std: float
    max_abs: float
    l2: float
    near_zero_frac: float


STATS_HEADER = ("epoch", "layer", "role", "mean", "std", "max_abs", "l2",
                "near_zero_frac")


def collect_gradient_stats(named_grads, epoch):
    """One row per (layer, role); ``named_grads`` maps (tag, role) -> array."""
    rows = []
    for (tag, role) in sorted(named_grads):
        g = np.asarray(named_grads[(tag, role)])
        rows.append(GradientStatsRow(
            epoch=epoch, layer=tag, role=role,
            mean=float(g.mean()), std=float(g.std()),
            max_abs=float(np.abs(g).max()),
            l2=float(np.sqrt((g * g).sum())),
            near_zero_frac=float((np.abs(g) < NEAR_ZERO).mean())))
    return rows


def layer_grad_norm(rows, layer, weights_only=True):
    """l2 norm over a layer's weight-role gradients (one epoch's rows)."""
    sq = 0.0
    for r in rows:
        if r.layer == layer and (not weights_only or r.role.startswith("W")):
            sq += r.l2 ** 2
    return float(np.sqrt(sq))


# ---------------------------------------------------------------------------
# attention maps
# ---------------------------------------------------------------------------

@dataclass
class AttentionMap:
    values: np.ndarray  # H x W in [0, 1]
    layer_index: int
    image_id: int


def bilinear_resize(a, out_h, out_w):
    """Deterministic corner-aligned bilinear resize of a 2-D array."""
    h, w = a.shape
    if (h, w) == (out_h, out_w):
        return a.copy()
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = a[np.ix_(y0, x0)] * (1 - wx) + a[np.ix_(y0, x1)] * wx
    bot = a[np.ix_(y1, x0)] * (1 - wx) + a[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def activation_attention(model, image, layer_index):
    """Channel-mean absolute activation of one layer, resized to the input
    and max-normalized (skipped when the map is identically zero)."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    if img.ndim != 3:
        raise InputError(f"image must be (C, H, W), got shape {img.shape}")
    if layer_index < 0 or layer_index >= len(model.body):
        raise InputError(
            f"layer index {layer_index} out of range 0..{len(model.body) - 1}")
    x = Tensor._wrap(img[None, :, :, :])
    act = model.forward_collect(x, upto=layer_index)[layer_index]
    if act.ndim == 4:
        m = np.abs(act.data[0]).mean(axis=0)
    else:
        m = np.abs(act.data[0]).reshape(1, -1)
    m = bilinear_resize(m, img.shape[1], img.shape[2])
    peak = m.max()
    if peak > 0:
        m = m / peak
    return AttentionMap(values=m, layer_index=layer_index, image_id=-1)


# ---------------------------------------------------------------------------
# emitters
# ---------------------------------------------------------------------------

def emit_csv(rows, path, header=STATS_HEADER):
    """RFC-4180 CSV with a header row. ``rows`` are dataclasses or tuples."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(header)
            for row in rows:
                if hasattr(row, "__dataclass_fields__"):
                    row = [getattr(row, k) for k in row.__dataclass_fields__]
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    except OSError as e:
        raise InputError(f"cannot write CSV {path}: {e}") from e


def emit_pgm(amap, path):
    """ASCII 'P2' PGM, maxval 255, pixel = round(value * 255)."""
    values = amap.values if isinstance(amap, AttentionMap) else np.asarray(amap)
    pix = np.rint(np.clip(values, 0.0, 1.0) * 255).astype(int)
    h, w = pix.shape
    try:
        with open(path, "w", encoding="ascii") as f:
            f.write(f"P2\n{w} {h}\n255\n")
            for row in pix:
                f.write(" ".join(str(v) for v in row) + "\n")
    except OSError as e:
        raise InputError(f"cannot write PGM {path}: {e}") from e


def parse_pgm(path):
    """Read back an ASCII PGM as floats in [0, 1] (test/round-trip helper)."""
    with open(path, "r", encoding="ascii") as f:
        tokens = f.read().split()
    if tokens[0] != "P2":
        raise InputError(f"{path} is not an ASCII PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array(tokens[4:4 + w * h], dtype=np.float64).reshape(h, w)
    return data / maxval


def stats_path(run_dir, epoch, layer, role):
    return os.path.join(run_dir, f"{epoch}_{layer}_{role}.csv")


def attn_path(run_dir, image_index, layer):
    return os.path.join(run_dir, f"attn_{image_index}_{layer}.pgm")


def emit_stats_files(rows, run_dir):
    """Write one CSV per (epoch, layer, role), per the naming convention."""
    groups = {}
    for r in rows:
        groups.setdefault((r.epoch, r.layer, r.role), []).append(r)
    paths = []
    for (epoch, layer, role), group in sorted(groups.items()):
        p = stats_path(run_dir, epoch, layer, role)
        emit_csv(group, p)
        paths.append(p)
    return paths
