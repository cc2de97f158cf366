"""Per-frame proposals, local/global pool construction and distillation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from .errors import ContractViolation, DataError
from .relation import BoxFeature

Role = Literal["local", "global", "memory_view"]


@dataclass
class FrameProposals:
    """Candidate boxes of one frame, kept sorted by descending objectness.

    ``box_ids`` remembers each box's position in the original (unsorted)
    input; the sort is stable so equal scores keep that order.
    """

    frame_index: int
    feats: np.ndarray  # (n, d)
    geometry: np.ndarray  # (n, 4) cx, cy, w, h
    objectness: np.ndarray  # (n,)
    box_ids: np.ndarray = None

    def __post_init__(self):
        self.feats = np.asarray(self.feats, dtype=np.float64)
        self.geometry = np.asarray(self.geometry, dtype=np.float64).reshape(-1, 4)
        self.objectness = np.asarray(self.objectness, dtype=np.float64).reshape(-1)
        n = self.objectness.shape[0]
        if self.feats.ndim != 2 or self.feats.shape[0] != n or self.geometry.shape[0] != n:
            raise ContractViolation(
                f"frame {self.frame_index}: inconsistent box counts "
                f"(feats {self.feats.shape}, geometry {self.geometry.shape}, objectness {n})"
            )
        if self.box_ids is None:
            self.box_ids = np.arange(n)
        order = np.argsort(-self.objectness, kind="stable")
        if np.any(order != np.arange(n)):
            self.feats = self.feats[order]
            self.geometry = self.geometry[order]
            self.objectness = self.objectness[order]
            self.box_ids = np.asarray(self.box_ids)[order]

    def __len__(self) -> int:
        return self.objectness.shape[0]

    @property
    def dim(self) -> int:
        return self.feats.shape[1]

    def top(self, k: int) -> "FrameProposals":
        if k >= len(self):
            return self
        return FrameProposals(self.frame_index, self.feats[:k], self.geometry[:k],
                              self.objectness[:k], self.box_ids[:k])

    @property
    def boxes(self) -> list[BoxFeature]:
        return [BoxFeature(f, tuple(g), self.frame_index, float(o))
                for f, g, o in zip(self.feats, self.geometry, self.objectness)]

    def to_record(self) -> dict:
        order = np.argsort(self.box_ids, kind="stable")
        return {
            "frame": int(self.frame_index),
            "boxes": [
                {"cx": g[0], "cy": g[1], "w": g[2], "h": g[3],
                 "objectness": float(self.objectness[i]), "feat": self.feats[i].tolist()}
                for i in order
                for g in [self.geometry[i].tolist()]
            ],
        }


@dataclass
class ProposalPool:
    frames: list[FrameProposals]
    role: Role = "local"

    def __post_init__(self):
        idx = [f.frame_index for f in self.frames]
        if len(set(idx)) != len(idx):
            raise ContractViolation(f"duplicate frame index in {self.role} pool: {idx}")
        if self.role == "local" and idx and idx != list(range(idx[0], idx[0] + len(idx))):
            raise ContractViolation(f"local pool frames must be contiguous: {idx}")

    @property
    def frame_indices(self) -> list[int]:
        return [f.frame_index for f in self.frames]

    def num_boxes(self) -> int:
        return sum(len(f) for f in self.frames)

    def feats(self) -> np.ndarray:
        return np.concatenate([f.feats for f in self.frames], axis=0)

    def geometry(self) -> np.ndarray:
        return np.concatenate([f.geometry for f in self.frames], axis=0)

    def row_frames(self) -> np.ndarray:
        return np.concatenate([np.full(len(f), f.frame_index, dtype=np.int64) for f in self.frames])

    def boxes(self) -> list[BoxFeature]:
        return [b for f in self.frames for b in f.boxes]


def local_window(k: int, T: int, tau: int, online: bool = False, T_l: int | None = None) -> range:
    """Frame indices of the local pool for key frame ``k`` (1-based, clipped)."""
    if not 1 <= k <= T:
        raise ContractViolation(f"key frame {k} outside 1..{T}")
    if online:
        span = T_l if T_l is not None else 2 * tau + 1
        return range(max(1, k - span + 1), k + 1)
    return range(max(1, k - tau), min(T, k + tau) + 1)


def build_local_pool(video: Sequence[FrameProposals], k: int, tau: int, K_l: int,
                     online: bool = False, T_l: int | None = None) -> ProposalPool:
    """Key frame keeps all its boxes; every other frame keeps its top ``K_l``."""
    frames = []
    for t in local_window(k, len(video), tau, online, T_l):
        fp = video[t - 1]
        frames.append(fp if t == k else fp.top(K_l))
    return ProposalPool(frames, "local")


class GlobalSampler:
    """Seeded shuffle of ``1..T`` read through a window that slides by one per key frame."""

    def __init__(self, T: int, seed: int):
        if T < 1:
            raise ContractViolation(f"video length must be positive, got {T}")
        self.T = T
        self.seed = seed
        self.order = np.random.default_rng(seed).permutation(np.arange(1, T + 1))

    def window(self, k: int, T_g: int, online: bool = False) -> list[tuple[int, int]]:
        """``(slot, frame)`` pairs for key frame ``k``.

        ``slot`` is the unwrapped position in the shuffled sequence. Offline,
        slots are ``k-1 .. k+T_g-2`` read modulo ``T``. Online, the scan skips
        entries later than ``k``.
        """
        if not 1 <= k <= self.T:
            raise ContractViolation(f"key frame {k} outside 1..{self.T}")
        size = min(T_g, self.T if not online else k)
        out = []
        pos = k - 1
        scanned = 0
        while len(out) < size and scanned < self.T:
            frame = int(self.order[pos % self.T])
            if not online or frame <= k:
                out.append((pos, frame))
            pos += 1
            scanned += 1
        return out

    def frames(self, k: int, T_g: int, online: bool = False) -> list[int]:
        return [f for _, f in self.window(k, T_g, online)]


def build_global_pool(video: Sequence[FrameProposals], sampler: GlobalSampler, k: int,
                      T_g: int, K_g: int, online: bool = False) -> ProposalPool:
    frames = [video[t - 1].top(K_g) for t in sampler.frames(k, T_g, online)]
    return ProposalPool(frames, "global")


def distill(pool: ProposalPool, K_d: int) -> ProposalPool:
    """Keep each frame's top ``K_d`` boxes (earlier original index wins ties)."""
    return ProposalPool([f.top(K_d) for f in pool.frames], pool.role)


# ---------------------------------------------------------------- JSONL io


def parse_record(line: str, lineno: int, dim: int | None = None) -> FrameProposals:
    try:
        rec = json.loads(line)
        frame = rec["frame"]
        boxes = rec["boxes"]
        if not isinstance(frame, int) or isinstance(frame, bool):
            raise DataError("'frame' must be an integer", lineno)
        feats, geom, obj = [], [], []
        for b in boxes:
            geom.append([float(b["cx"]), float(b["cy"]), float(b["w"]), float(b["h"])])
            obj.append(float(b["objectness"]))
            feats.append([float(v) for v in b["feat"]])
    except DataError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"malformed proposal record ({exc.__class__.__name__}: {exc})", lineno) from exc
    if feats and len({len(f) for f in feats}) != 1:
        raise DataError("boxes have differing feature lengths", lineno)
    d = len(feats[0]) if feats else (dim or 0)
    if dim is not None and feats and d != dim:
        raise DataError(f"feature length {d} != {dim}", lineno)
    geom_a = np.asarray(geom, dtype=np.float64).reshape(-1, 4)
    obj_a = np.asarray(obj, dtype=np.float64)
    if np.any(geom_a[:, 2:] <= 0):
        raise DataError("box width/height must be positive", lineno)
    if np.any((obj_a < 0) | (obj_a > 1)):
        raise DataError("objectness outside [0, 1]", lineno)
    if not (np.all(np.isfinite(geom_a)) and np.all(np.isfinite(np.asarray(feats, dtype=np.float64)))):
        raise DataError("non-finite values", lineno)
    return FrameProposals(frame, np.asarray(feats, dtype=np.float64).reshape(-1, d), geom_a, obj_a)


def _is_header(line: str) -> bool:
    return line.lstrip().startswith('{"manifest"')


def read_proposals_jsonl(path: str | Path) -> list[FrameProposals]:
    """Read one frame per line; frames must be strictly increasing."""
    frames: list[FrameProposals] = []
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or _is_header(line):
                continue
            fp = parse_record(line, lineno, dim)
            if len(fp):
                dim = fp.dim
            if frames and fp.frame_index <= frames[-1].frame_index:
                raise DataError(
                    f"frame {fp.frame_index} not after frame {frames[-1].frame_index}", lineno
                )
            frames.append(fp)
    return frames


def write_proposals_jsonl(frames: Iterable[FrameProposals], path: str | Path,
                          header: dict | None = None) -> None:
    with open(path, "w") as fh:
        if header is not None:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
        for fp in frames:
            fh.write(json.dumps(fp.to_record()) + "\n")
