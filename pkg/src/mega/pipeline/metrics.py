"""VOC-style average precision at a fixed IoU threshold."""
from __future__ import annotations

from typing import Hashable, Mapping, Sequence

import numpy as np

from .detection import Detection, iou_matrix


def average_precision(scored: Sequence[tuple[Hashable, float, np.ndarray]],
                      gt: Mapping[Hashable, np.ndarray], iou_threshold: float = 0.5) -> float:
    """All-point interpolated AP for one class.

    ``scored`` lists ``(image_key, score, box)``; ``gt`` maps image keys to
    ``(n, 4)`` ground-truth boxes of that class. Each ground truth matches
    at most one detection, highest score first.
    """
    n_gt = sum(len(b) for b in gt.values())
    if n_gt == 0:
        return float("nan")
    order = sorted(range(len(scored)), key=lambda i: -scored[i][1])
    used = {key: np.zeros(len(b), dtype=bool) for key, b in gt.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        key, _, box = scored[i]
        boxes = gt.get(key)
        if boxes is None or len(boxes) == 0:
            continue
        overlaps = iou_matrix(np.asarray(box)[None], boxes)[0]
        j = int(overlaps.argmax())
        if overlaps[j] >= iou_threshold and not used[key][j]:
            used[key][j] = True
            tp[rank] = 1
    if not len(order):
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(order) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_ap(detections: Mapping[Hashable, Sequence[Detection]],
            ground_truth: Mapping[Hashable, tuple[np.ndarray, np.ndarray]],
            num_classes: int, iou_threshold: float = 0.5) -> tuple[float, list[float]]:
    """Mean over classes of AP; keys identify images (e.g. ``(video, frame)``)."""
    per_class = []
    for c in range(1, num_classes + 1):
        scored = [(key, d.score, np.asarray(d.box)) for key, dets in detections.items()
                  for d in dets if d.label == c]
        gt = {key: boxes[labels == c] for key, (boxes, labels) in ground_truth.items()}
        per_class.append(average_precision(scored, gt, iou_threshold))
    valid = [a for a in per_class if not np.isnan(a)]
    return (float(np.mean(valid)) if valid else float("nan")), per_class
