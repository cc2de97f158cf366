"""Long Range Memory: fixed-capacity FIFO of per-level frame features."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .errors import ContractViolation
from .numerics import Tensor
from .relation import BoxFeature


@dataclass(frozen=True)
class MemoryBlock:
    """Detached features of one frame at one level."""

    frame_index: int
    feats: np.ndarray
    geometry: np.ndarray
    objectness: np.ndarray

    def __len__(self) -> int:
        return self.feats.shape[0]

    @classmethod
    def from_boxes(cls, frame_index: int, boxes: Sequence[BoxFeature]) -> "MemoryBlock":
        feats = np.stack([b.semantic for b in boxes]) if boxes else np.zeros((0, 0))
        geom = np.array([b.geometry for b in boxes], dtype=np.float64).reshape(-1, 4)
        obj = np.array([b.objectness for b in boxes], dtype=np.float64)
        return cls(frame_index, feats, geom, obj)

    def boxes(self) -> list[BoxFeature]:
        return [BoxFeature(f, tuple(g), self.frame_index, float(o))
                for f, g, o in zip(self.feats, self.geometry, self.objectness)]


def _detach(frame_index: int, payload: Any) -> Any:
    if isinstance(payload, MemoryBlock):
        feats = payload.feats.data if isinstance(payload.feats, Tensor) else payload.feats
        arr = np.array(feats, dtype=np.float64)
        arr.setflags(write=False)
        geom = np.array(payload.geometry, dtype=np.float64)
        geom.setflags(write=False)
        obj = np.array(payload.objectness, dtype=np.float64)
        obj.setflags(write=False)
        return MemoryBlock(payload.frame_index, arr, geom, obj)
    if isinstance(payload, (list, tuple)) and all(isinstance(b, BoxFeature) for b in payload):
        return _detach(frame_index, MemoryBlock.from_boxes(frame_index, payload))
    if isinstance(payload, Tensor):
        raise ContractViolation("push MemoryBlocks or BoxFeature lists, not raw tensors")
    return payload


class LongRangeMemory:
    """``num_levels`` synchronized FIFO queues holding up to ``capacity`` frames.

    Payloads are detached on push: numeric features are copied into
    read-only arrays with no link to any gradient tape.
    """

    def __init__(self, num_levels: int, capacity: int):
        if num_levels < 1 or capacity < 0:
            raise ContractViolation(f"bad memory shape: levels={num_levels}, capacity={capacity}")
        self.num_levels = num_levels
        self.capacity = capacity
        self._frames: deque[int] = deque()
        self._levels: list[deque] = [deque() for _ in range(num_levels)]

    def __len__(self) -> int:
        return len(self._frames)

    @property
    def frame_indices(self) -> list[int]:
        return list(self._frames)

    def reset(self) -> None:
        self._frames.clear()
        for q in self._levels:
            q.clear()

    def push(self, frame_index: int, per_level: Sequence[Any]) -> None:
        if len(per_level) != self.num_levels:
            raise ContractViolation(
                f"memory push needs {self.num_levels} levels, got {len(per_level)}"
            )
        if self._frames and frame_index <= self._frames[-1]:
            raise ContractViolation(
                f"out-of-order memory push: frame {frame_index} after {self._frames[-1]}"
            )
        if self.capacity == 0:
            return
        detached = [_detach(frame_index, p) for p in per_level]
        self._frames.append(frame_index)
        for q, p in zip(self._levels, detached):
            q.append(p)
        while len(self._frames) > self.capacity:
            self._frames.popleft()
            for q in self._levels:
                q.popleft()

    def entries(self, level: int) -> list[Any]:
        """Cached payloads at ``level``, oldest first."""
        if not 0 <= level < self.num_levels:
            raise ContractViolation(f"memory level {level} outside 0..{self.num_levels - 1}")
        return list(self._levels[level])

    def view_block(self, level: int) -> tuple[np.ndarray, np.ndarray, np.ndarray] | None:
        """``(feats, geometry, row_frames)`` of all cached boxes at ``level``, or ``None`` when empty."""
        blocks = [b for b in self.entries(level) if len(b)]
        if not blocks:
            return None
        return (
            np.concatenate([b.feats for b in blocks]),
            np.concatenate([b.geometry for b in blocks]),
            np.concatenate([np.full(len(b), b.frame_index, dtype=np.int64) for b in blocks]),
        )

    def to_json(self) -> str:
        levels = []
        for q in self._levels:
            levels.append([
                {"frame": b.frame_index, "feats": b.feats.tolist(), "geometry": b.geometry.tolist(),
                 "objectness": b.objectness.tolist()}
                if isinstance(b, MemoryBlock) else {"frame": f, "payload": repr(b)}
                for f, b in zip(self._frames, q)
            ])
        return json.dumps({"capacity": self.capacity, "frames": list(self._frames), "levels": levels})

    @classmethod
    def from_json(cls, text: str) -> "LongRangeMemory":
        raw = json.loads(text)
        mem = cls(len(raw["levels"]), raw["capacity"])
        for i, frame in enumerate(raw["frames"]):
            blocks = []
            for level in raw["levels"]:
                e = level[i]
                feats = np.asarray(e["feats"], dtype=np.float64)
                blocks.append(MemoryBlock(frame, feats.reshape(len(e["objectness"]), -1),
                                          np.asarray(e["geometry"]).reshape(-1, 4),
                                          np.asarray(e["objectness"])))
            mem.push(frame, blocks)
        return mem


def memory_push(mem: LongRangeMemory, frame_index: int, per_level_features: Sequence[Any]) -> LongRangeMemory:
    mem.push(frame_index, per_level_features)
    return mem


def memory_view(mem: LongRangeMemory, level: int) -> list[BoxFeature]:
    return [box for block in mem.entries(level) for box in block.boxes()]
