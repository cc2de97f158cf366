"""Synthetic proposal streams standing in for a backbone + RPN.

Each track is an object moving linearly (bouncing off the image border)
whose per-frame *quality* drops during occlusion episodes. A true box's
feature is ``codebook[class] * q + noise * (1 - q)``; distractor boxes are
pure noise with low objectness.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..pools import FrameProposals
from .config import PipelineConfig


@dataclass
class Track:
    class_id: int  # 1..num_classes
    start: tuple[float, float]
    velocity: tuple[float, float]
    size: tuple[float, float]
    quality: np.ndarray  # (T,) in [0, 1]

    def position(self, t: int) -> tuple[float, float]:
        """Centre at 1-based frame ``t``; reflected to stay inside the image."""
        out = []
        for x0, v, half in zip(self.start, self.velocity, (self.size[0] / 2, self.size[1] / 2)):
            lo, hi = half, 1.0 - half
            span = hi - lo
            x = x0 - lo + v * (t - 1)
            x = np.mod(x, 2 * span)
            out.append(lo + (x if x <= span else 2 * span - x))
        return out[0], out[1]

    def box(self, t: int) -> np.ndarray:
        cx, cy = self.position(t)
        return np.array([cx, cy, self.size[0], self.size[1]])


@dataclass
class SceneModel:
    num_frames: int
    num_classes: int
    dim: int
    tracks: list[Track]
    codebook: np.ndarray  # (num_classes, dim)
    noise: float = 1.0
    box_jitter: float = 0.03
    objectness_noise: float = 0.05

    def ground_truth(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """``(boxes (n, 4), labels (n,))`` of every object at frame ``t``."""
        boxes = np.array([tr.box(t) for tr in self.tracks]).reshape(-1, 4)
        labels = np.array([tr.class_id for tr in self.tracks], dtype=np.int64)
        return boxes, labels


def occlusion_quality(T: int, rng: np.random.Generator, occluded_fraction: float = 0.45,
                      min_len: int = 3, max_len: int = 12, clear=(0.75, 1.0),
                      occluded=(0.0, 0.15)) -> np.ndarray:
    """Per-frame quality with randomly placed occlusion episodes."""
    q = rng.uniform(*clear, size=T)
    covered = np.zeros(T, dtype=bool)
    attempts = 0
    while covered.mean() < occluded_fraction and attempts < 100:
        attempts += 1
        length = int(rng.integers(min_len, max_len + 1))
        start = int(rng.integers(0, max(1, T - length + 1)))
        covered[start:start + length] = True
    q[covered] = rng.uniform(*occluded, size=int(covered.sum()))
    return q


def make_codebook(num_classes: int, dim: int, seed: int = 1234) -> np.ndarray:
    """Class prototypes with per-dimension scale ~1, shared across scenes of one benchmark."""
    rng = np.random.default_rng(seed)
    book = rng.normal(size=(num_classes, dim))
    return book / np.linalg.norm(book, axis=1, keepdims=True) * np.sqrt(dim)


def make_scene(num_frames: int, num_classes: int = 3, dim: int = 16, num_tracks: int = 2,
               seed: int = 0, codebook: np.ndarray | None = None,
               occluded_fraction: float = 0.45, **occlusion) -> SceneModel:
    rng = np.random.default_rng(seed)
    book = make_codebook(num_classes, dim) if codebook is None else codebook
    tracks = []
    for _ in range(num_tracks):
        size = tuple(rng.uniform(0.15, 0.3, size=2))
        start = (rng.uniform(size[0] / 2, 1 - size[0] / 2), rng.uniform(size[1] / 2, 1 - size[1] / 2))
        speed = rng.uniform(0.002, 0.008)
        angle = rng.uniform(0, 2 * np.pi)
        tracks.append(Track(
            class_id=int(rng.integers(1, num_classes + 1)),
            start=start,
            velocity=(speed * np.cos(angle), speed * np.sin(angle)),
            size=size,
            quality=occlusion_quality(num_frames, rng, occluded_fraction, **occlusion),
        ))
    return SceneModel(num_frames, num_classes, dim, tracks, book)


def synth_video(scene: SceneModel, config: PipelineConfig, seed: int) -> list[FrameProposals]:
    """One ``FrameProposals`` per frame: a true box per track plus distractors up to ``config.N``."""
    rng = np.random.default_rng(seed)
    d = scene.dim
    frames = []
    for t in range(1, scene.num_frames + 1):
        feats, geom, obj = [], [], []
        for tr in scene.tracks:
            q = float(tr.quality[t - 1])
            box = tr.box(t)
            jitter = rng.normal(scale=scene.box_jitter, size=4)
            box = np.array([box[0] + jitter[0] * box[2], box[1] + jitter[1] * box[3],
                            box[2] * np.exp(jitter[2]), box[3] * np.exp(jitter[3])])
            noise = rng.normal(scale=scene.noise, size=d)
            feats.append(scene.codebook[tr.class_id - 1] * q + noise * (1 - q))
            geom.append(box)
            obj.append(np.clip(0.35 + 0.6 * q + rng.normal(scale=scene.objectness_noise), 0.0, 1.0))
        for _ in range(max(0, config.N - len(scene.tracks))):
            w, h = rng.uniform(0.08, 0.3, size=2)
            geom.append(np.array([rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h]))
            feats.append(rng.normal(scale=scene.noise, size=d))
            obj.append(rng.uniform(0.0, 0.5))
        frames.append(FrameProposals(t, np.array(feats), np.array(geom), np.array(obj)))
    return frames
