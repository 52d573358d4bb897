"""Prototype activations as heatmaps, peak bounding boxes, and cross-client
agreement.

A prototype's similarity map (negated distances) is upsampled to input
resolution with corner-aligned bilinear interpolation, min-max normalized,
and thresholded at a high percentile; the minimal rectangle covering the
hot region is the prototype's bounding box.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import save_pnm
from .errors import ConfigurationError
from .model import PrototypeModel
from .tensor import Tensor, no_grad

Box = tuple[int, int, int, int]  # x, y, w, h in pixels


@dataclass
class PrototypeActivation:
    prototype: int
    class_id: int
    raw_map: np.ndarray  # similarity map at feature resolution
    heatmap: np.ndarray  # upsampled, min-max normalized to [0, 1]
    score: float  # -(min distance)
    box: Box
    degenerate: bool = False  # constant heatmap: box spans the full image


def upsample_bilinear(src: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear upsampling of a 2-d map; exact on constants."""
    h, w = src.shape
    th, tw = target_hw
    if th < h or tw < w:
        raise ConfigurationError(f"cannot downscale {h}x{w} to {th}x{tw}")
    ys = np.linspace(0.0, h - 1.0, th) if th > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, tw) if tw > 1 else np.zeros(1)
    y0 = np.minimum(ys.astype(int), h - 1)
    x0 = np.minimum(xs.astype(int), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    dy = (ys - y0)[:, None]
    dx = (xs - x0)[None, :]
    return (src[np.ix_(y0, x0)] * (1 - dy) * (1 - dx)
            + src[np.ix_(y0, x1)] * (1 - dy) * dx
            + src[np.ix_(y1, x0)] * dy * (1 - dx)
            + src[np.ix_(y1, x1)] * dy * dx)


def activation_bbox(heatmap: np.ndarray, percentile: float = 95.0) -> tuple[Box, bool]:
    """Minimal rectangle covering all pixels at or above the percentile of
    the heatmap's value range (so a single hot pixel gives a 1x1 box).

    Always contains the argmax.  A constant heatmap yields the full-image
    box with a degeneracy flag (and a warning).
    """
    if heatmap.size == 0:
        raise ConfigurationError("activation_bbox: empty heatmap")
    h, w = heatmap.shape
    lo = float(heatmap.min())
    hi = float(heatmap.max())
    if hi == lo:
        warnings.warn("activation_bbox: constant heatmap, returning full-image box")
        return (0, 0, w, h), True
    thresh = lo + (percentile / 100.0) * (hi - lo)
    ys, xs = np.nonzero(heatmap >= thresh)
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    return (x0, y0, x1 - x0 + 1, y1 - y0 + 1), False


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two (x, y, w, h) rectangles, in [0, 1]."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    if min(aw, ah, bw, bh) < 0:
        raise ConfigurationError(f"iou: negative extents in {a} or {b}")
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def _normalize(m: np.ndarray) -> np.ndarray:
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def prototype_activations(image: np.ndarray, model: PrototypeModel,
                          percentile: float = 95.0) -> tuple[list[PrototypeActivation], int]:
    """All prototype activations for one (C, H, W) image, plus the predicted
    class; activations are sorted by descending similarity score."""
    dtype = model.config.dtype
    hw = tuple(model.config.backbone.image_hw)
    with no_grad():
        logits, dmaps, scores = model.forward(Tensor(image[None].astype(dtype, copy=False)))
    pred = int(np.argmax(logits.data[0]))
    acts = []
    for j in range(model.config.num_prototypes):
        sim = -dmaps.data[0, j]
        up = upsample_bilinear(sim, hw)
        heat = _normalize(up)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            box, degenerate = activation_bbox(heat, percentile)
        acts.append(PrototypeActivation(
            prototype=j,
            class_id=int(model.proto_layer.class_ids[j]),
            raw_map=sim,
            heatmap=heat,
            score=float(scores.data[0, j]),
            box=box,
            degenerate=degenerate,
        ))
    acts.sort(key=lambda a: (-a.score, a.prototype))
    return acts, pred


def top_activation_for_class(image: np.ndarray, model: PrototypeModel, class_id: int,
                             percentile: float = 95.0) -> PrototypeActivation:
    """Highest-scoring prototype whose identity matches the given class."""
    acts, _ = prototype_activations(image, model, percentile)
    for act in acts:
        if act.class_id == class_id:
            return act
    raise ConfigurationError(f"no prototype belongs to class {class_id}")


def top_activation(image: np.ndarray, model: PrototypeModel,
                   percentile: float = 95.0) -> PrototypeActivation:
    """Top prototype of the model's own predicted class for this image."""
    acts, pred = prototype_activations(image, model, percentile)
    for act in acts:
        if act.class_id == pred:
            return act
    return acts[0]


# rendering ------------------------------------------------------------------


def _diverging_rgb(heat: np.ndarray) -> np.ndarray:
    """Blue (0) -> white (0.5) -> red (1) palette for a [0, 1] map."""
    h = np.clip(heat, 0.0, 1.0)
    low = 2.0 * h  # 0..0.5 ramps toward white
    high = 2.0 * (h - 0.5)  # 0.5..1 ramps away from white
    r = np.where(h <= 0.5, low, 1.0)
    g = np.where(h <= 0.5, low, 1.0 - high)
    b = np.where(h <= 0.5, 1.0, 1.0 - high)
    return np.stack([r, g, b])


def _burn_box(rgb: np.ndarray, box: Box, color=(1.0, 0.0, 0.0), width: int = 1) -> np.ndarray:
    out = rgb.copy()
    x, y, w, h = box
    _, ih, iw = out.shape
    x0, y0 = max(x, 0), max(y, 0)
    x1, y1 = min(x + w, iw), min(y + h, ih)
    for c in range(3):
        out[c, y0 : min(y0 + width, y1), x0:x1] = color[c]
        out[c, max(y1 - width, y0) : y1, x0:x1] = color[c]
        out[c, y0:y1, x0 : min(x0 + width, x1)] = color[c]
        out[c, y0:y1, max(x1 - width, x0) : x1] = color[c]
    return out


def render_explanation(image: np.ndarray, act: PrototypeActivation) -> np.ndarray:
    """Side-by-side panel: input with the box burned in | diverging heatmap."""
    gray = image[0] if image.ndim == 3 else image
    rgb = np.stack([gray, gray, gray])
    overlay = _burn_box(rgb, act.box)
    heat_rgb = _diverging_rgb(act.heatmap)
    sep = np.ones((3, gray.shape[0], 2))
    return np.concatenate([overlay, sep, heat_rgb], axis=2)


EXPLAIN_FIELDS = ("prototype", "class", "score", "box_x", "box_y", "box_w", "box_h")


def explain(image: np.ndarray, model: PrototypeModel, top_k: int,
            out_dir=None, stem: str = "image", percentile: float = 95.0
            ) -> list[PrototypeActivation]:
    """Top-k prototype activations; optionally render panels and a CSV."""
    acts, _ = prototype_activations(image, model, percentile)
    top = acts[: max(1, top_k)]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for rank, act in enumerate(top):
            panel = render_explanation(image, act)
            save_pnm(panel, out_dir / f"{stem}_top{rank}_proto{act.prototype}.ppm")
        with open(out_dir / f"{stem}_explanations.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=EXPLAIN_FIELDS)
            w.writeheader()
            for act in top:
                w.writerow({
                    "prototype": act.prototype, "class": act.class_id,
                    "score": repr(act.score), "box_x": act.box[0], "box_y": act.box[1],
                    "box_w": act.box[2], "box_h": act.box[3],
                })
    return top


def cross_client_agreement(image: np.ndarray, models: list[PrototypeModel],
                           percentile: float = 95.0) -> np.ndarray:
    """Pairwise IoU matrix of each client's top predicted-class prototype box."""
    if len(models) < 2:
        raise ConfigurationError("agreement needs at least two client models")
    boxes = [top_activation(image, m, percentile).box for m in models]
    n = len(boxes)
    mat = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            mat[i, j] = 1.0 if i == j else iou(boxes[i], boxes[j])
    return mat


def mean_off_diagonal(mat: np.ndarray) -> float:
    n = mat.shape[0]
    mask = ~np.eye(n, dtype=bool)
    return float(mat[mask].mean())
