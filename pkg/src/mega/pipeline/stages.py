"""Global, local and memory-enhanced local aggregation over pooled box rows."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import numerics as nx
from ..errors import ContractViolation
from ..memory import LongRangeMemory, MemoryBlock
from ..numerics import Tensor
from ..pools import FrameProposals, ProposalPool
from ..relation import RelationParams, pairwise_embedding, relate


@dataclass
class Rows:
    """Stacked box rows of a pool: features plus per-row geometry and frame.

    ``spans`` maps each frame index to its ``(start, stop)`` row range;
    within a frame rows keep descending-objectness order.
    """

    feats: Tensor
    geometry: np.ndarray
    frames: np.ndarray
    spans: dict[int, tuple[int, int]]
    objectness: np.ndarray | None = None

    def __len__(self) -> int:
        return self.feats.shape[0]

    @classmethod
    def from_frames(cls, frames: Sequence[FrameProposals]) -> "Rows":
        spans, start = {}, 0
        for fp in frames:
            spans[fp.frame_index] = (start, start + len(fp))
            start += len(fp)
        dim = next((fp.dim for fp in frames if len(fp)), 0)
        feats = np.concatenate([fp.feats.reshape(-1, dim) for fp in frames]) if frames else np.zeros((0, dim))
        return cls(
            Tensor(feats),
            np.concatenate([fp.geometry for fp in frames]) if frames else np.zeros((0, 4)),
            np.concatenate([np.full(len(fp), fp.frame_index, dtype=np.int64) for fp in frames])
            if frames else np.zeros(0, dtype=np.int64),
            spans,
            np.concatenate([fp.objectness for fp in frames]) if frames else np.zeros(0),
        )

    def with_feats(self, feats: Tensor) -> "Rows":
        return Rows(feats, self.geometry, self.frames, self.spans, self.objectness)

    def top_rows(self, k: int) -> np.ndarray:
        """Row indices of each frame's first ``k`` rows."""
        idx = [np.arange(a, min(b, a + k)) for a, b in self.spans.values()]
        return np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64)

    def frame_rows(self, frame: int) -> np.ndarray:
        a, b = self.spans[frame]
        return np.arange(a, b)


class StageObserver:
    """Hook points for structural tracing; the default does nothing."""

    def global_stack(self, stack: int, query_frames: np.ndarray, ref_frames: np.ndarray) -> None:
        pass

    def local_stack(self, stack: int, query_frames: np.ndarray, ref_frames: np.ndarray,
                    memory_frames: np.ndarray) -> None:
        pass


_NULL = StageObserver()


def _count(stats: dict | None, key: str, value: int) -> None:
    if stats is not None:
        stats[key] = stats.get(key, 0) + value


def run_global_stage(L: Rows, G: Rows | None, stacks: Sequence[RelationParams],
                     observer: StageObserver = _NULL, stats: dict | None = None) -> Rows:
    """Location-free stacks; every stack uses the same un-updated ``G`` as references."""
    if not stacks:
        return L
    if G is None or len(G) == 0:
        raise ContractViolation("global stage needs a non-empty global pool")
    feats = L.feats
    for s, params in enumerate(stacks, start=1):
        observer.global_stack(s, L.frames, G.frames)
        feats = relate(feats, G.feats, params, None)
        _count(stats, "pairs_global", len(L) * len(G))
        _count(stats, "updates", len(L))
    return L.with_feats(feats)


def run_local_stage(Lg: Rows, stacks: Sequence[RelationParams], K_l: int, K_d: int,
                    memory: LongRangeMemory | None = None, observer: StageObserver = _NULL,
                    stats: dict | None = None) -> list[Rows]:
    """Location-based stacks, optionally reading the memory; returns every level 0..N_l.

    Stack 1 references each frame's top ``K_l`` rows, later stacks the top
    ``K_d``. With a non-empty memory, stack ``k`` also references memory
    level ``k-1``. Queries are always every row of the pool.
    """
    if not stacks:
        raise ContractViolation("local stage needs at least one relation module")
    if memory is not None and memory.num_levels != len(stacks) + 1:
        raise ContractViolation(
            f"memory has {memory.num_levels} levels, local stage needs {len(stacks) + 1}"
        )
    levels = [Lg]
    cur = Lg
    for s, params in enumerate(stacks, start=1):
        ref_idx = cur.top_rows(K_l if s == 1 else K_d)
        ref_feats = nx.take_rows(cur.feats, ref_idx)
        ref_geom = cur.geometry[ref_idx]
        ref_frames = cur.frames[ref_idx]
        mem_frames = np.zeros(0, dtype=np.int64)
        view = memory.view_block(s - 1) if memory is not None else None
        if view is not None:
            m_feats, m_geom, mem_frames = view
            ref_feats = nx.concat_rows([ref_feats, Tensor(m_feats)])
            ref_geom = np.concatenate([ref_geom, m_geom])
            ref_frames = np.concatenate([ref_frames, mem_frames])
        observer.local_stack(s, cur.frames, cur.frames[ref_idx], mem_frames)
        emb = pairwise_embedding(cur.geometry, cur.frames, ref_geom, ref_frames, params.embed_dim)
        cur = cur.with_feats(relate(cur.feats, ref_feats, params, emb))
        _count(stats, "pairs_local", len(cur) * len(ref_frames))
        _count(stats, "updates", len(cur))
        levels.append(cur)
    return levels


def memory_blocks(levels: Sequence[Rows], frame: int, K_l: int, K_d: int) -> list[MemoryBlock]:
    """Features of ``frame`` at every level, truncated to the rows later stacks read."""
    out = []
    for i, rows in enumerate(levels):
        a, b = rows.spans[frame]
        b = min(b, a + (K_l if i == 0 else K_d))
        obj = rows.objectness[a:b] if rows.objectness is not None else np.zeros(b - a)
        out.append(MemoryBlock(frame, rows.feats.data[a:b], rows.geometry[a:b], obj))
    return out


# ------------------------------------------------- pool-level public wrappers


def _pool_from_rows(rows: Rows, like: ProposalPool) -> ProposalPool:
    frames = []
    for fp in like.frames:
        a, b = rows.spans[fp.frame_index]
        frames.append(FrameProposals(fp.frame_index, rows.feats.data[a:b], fp.geometry,
                                     fp.objectness, fp.box_ids))
    return ProposalPool(frames, like.role)


def global_stage(L: ProposalPool, G: ProposalPool, params: Sequence[RelationParams]) -> ProposalPool:
    out = run_global_stage(Rows.from_frames(L.frames),
                           Rows.from_frames(G.frames) if G.frames else None, params)
    return _pool_from_rows(out, L)


def local_stage(Lg: ProposalPool, params: Sequence[RelationParams], K_l: int, K_d: int) -> ProposalPool:
    levels = run_local_stage(Rows.from_frames(Lg.frames), params, K_l, K_d)
    return _pool_from_rows(levels[-1], Lg)


def enhanced_local_stage(Lg: ProposalPool, mem: LongRangeMemory, params: Sequence[RelationParams],
                         K_l: int, K_d: int) -> tuple[ProposalPool, list[MemoryBlock]]:
    """Memory-enhanced local stage plus the oldest window frame's per-level features."""
    levels = run_local_stage(Rows.from_frames(Lg.frames), params, K_l, K_d, memory=mem)
    oldest = Lg.frames[0].frame_index
    return _pool_from_rows(levels[-1], Lg), memory_blocks(levels, oldest, K_l, K_d)
