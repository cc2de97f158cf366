from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import numerics as nx
from ..numerics import Tensor
from .config import HeadParams

MAX_LOG_SCALE = 4.0


@dataclass(frozen=True)
class Detection:
    frame_index: int
    label: int  # 1..num_classes
    score: float
    box: tuple[float, float, float, float]  # cx, cy, w, h

    def to_record(self) -> dict:
        return {"frame": self.frame_index, "class": self.label, "score": self.score,
                "box": list(self.box)}


def head_forward(feats: Tensor, head: HeadParams) -> tuple[Tensor, Tensor]:
    """Class logits ``(n, C+1)`` and box deltas ``(n, 4)``."""
    logits = nx.linear(feats, head.w_cls, head.b_cls)
    deltas = nx.linear(feats, head.w_reg, head.b_reg)
    return logits, deltas


def apply_deltas(geometry: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    g = np.asarray(geometry, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    dw = np.clip(d[:, 2], -MAX_LOG_SCALE, MAX_LOG_SCALE)
    dh = np.clip(d[:, 3], -MAX_LOG_SCALE, MAX_LOG_SCALE)
    return np.stack([
        g[:, 0] + d[:, 0] * g[:, 2],
        g[:, 1] + d[:, 1] * g[:, 3],
        g[:, 2] * np.exp(dw),
        g[:, 3] * np.exp(dh),
    ], axis=1)


def regression_targets(geometry: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Inverse of :func:`apply_deltas` (without clipping)."""
    g = np.asarray(geometry, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    return np.stack([
        (t[:, 0] - g[:, 0]) / g[:, 2],
        (t[:, 1] - g[:, 1]) / g[:, 3],
        np.log(t[:, 2] / g[:, 2]),
        np.log(t[:, 3] / g[:, 3]),
    ], axis=1)


def decode(feats: Tensor, geometry: np.ndarray, frame_index: int, head: HeadParams) -> list[Detection]:
    with nx.no_tape():
        logits, deltas = head_forward(feats, head)
    probs = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    boxes = apply_deltas(geometry, deltas.data)
    labels = probs.argmax(axis=1)
    dets = []
    for i in np.flatnonzero(labels > 0):
        dets.append(Detection(frame_index, int(labels[i]), float(probs[i, labels[i]]),
                              tuple(float(v) for v in boxes[i])))
    return dets


def detect_head(C, head: HeadParams) -> list[Detection]:
    """Detections for a list of key-frame ``BoxFeature``s (background dropped)."""
    if not C:
        return []
    feats = Tensor(np.stack([b.semantic for b in C]))
    geom = np.array([b.geometry for b in C])
    return decode(feats, geom, C[0].frame_index, head)


def to_corners(box) -> tuple[float, float, float, float]:
    cx, cy, w, h = box
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = to_corners(a)
    bx0, by0, bx1, by1 = to_corners(b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    a0, a1 = a[:, :2] - a[:, 2:] / 2, a[:, :2] + a[:, 2:] / 2
    b0, b1 = b[:, :2] - b[:, 2:] / 2, b[:, :2] + b[:, 2:] / 2
    lo = np.maximum(a0[:, None], b0[None])
    hi = np.minimum(a1[:, None], b1[None])
    inter = np.clip(hi - lo, 0, None).prod(axis=-1)
    union = a[:, 2:].prod(axis=1)[:, None] + b[:, 2:].prod(axis=1)[None] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy per-class suppression; equal scores keep list order."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept: list[int] = []
    for i in order:
        if all(dets[j].label != dets[i].label or iou(dets[i].box, dets[j].box) <= iou_threshold
               for j in kept):
            kept.append(i)
    return [dets[i] for i in kept]
