"""Sliding-window streaming inference over one video."""
from __future__ import annotations

import logging
from typing import Iterable, Iterator

import numpy as np

from .. import numerics as nx
from ..errors import ContractViolation
from ..memory import LongRangeMemory
from ..pools import FrameProposals, GlobalSampler, local_window
from .config import MegaParams, PipelineConfig
from .detection import Detection, decode, nms
from .stages import Rows, StageObserver, memory_blocks, run_global_stage, run_local_stage

log = logging.getLogger(__name__)


class PipelineObserver(StageObserver):
    def begin_frame(self, k: int, local_frames: list[int], global_window: list[tuple[int, int]]) -> None:
        pass

    def end_frame(self, k: int) -> None:
        pass

    def push(self, k: int, frame: int) -> None:
        pass


class FrameStore:
    """Pulls frames from a source on demand and keeps them for later reuse.

    Frames must arrive as ``1..T`` in order; requesting a frame past the
    end of the source is a contract violation naming that frame.
    """

    def __init__(self, source: Iterable[FrameProposals], T: int):
        self._it: Iterator[FrameProposals] = iter(source)
        self._frames: list[FrameProposals] = []
        self.T = T

    def __len__(self) -> int:
        return self.T

    def load(self, t: int) -> FrameProposals:
        if not 1 <= t <= self.T:
            raise ContractViolation(f"frame {t} outside 1..{self.T}")
        while len(self._frames) < t:
            try:
                fp = next(self._it)
            except StopIteration:
                raise ContractViolation(
                    f"source ended before frame {len(self._frames) + 1} of declared length {self.T}"
                ) from None
            expected = len(self._frames) + 1
            if fp.frame_index != expected:
                raise ContractViolation(f"expected frame {expected}, source gave {fp.frame_index}")
            if len(fp) == 0:
                raise ContractViolation(f"frame {expected} has no proposals")
            self._frames.append(fp)
        return self._frames[t - 1]

    @property
    def loaded(self) -> int:
        return len(self._frames)

    def __getitem__(self, i: int) -> FrameProposals:
        return self.load(i + 1)


def _video_length(source, config: PipelineConfig) -> int:
    if config.T is not None:
        return config.T
    try:
        return len(source)
    except TypeError:
        raise ContractViolation("config.T is required for sources without a length") from None


def run_video(source, config: PipelineConfig, params: MegaParams,
              observer: PipelineObserver | None = None,
              stats: list[dict] | None = None) -> list[list[Detection]]:
    """Detect every frame of a video; returns one detection list per frame.

    ``stats``, when given, receives one dict per frame with pool sizes,
    memory occupancy and attention-pair counts.
    """
    config.validate()
    params.check(config)
    obs = observer or PipelineObserver()
    T = _video_length(source, config)
    store = FrameStore(source, T)
    memory = LongRangeMemory(config.N_l + 1, config.memory_capacity)
    ahead = 0 if config.online else config.tau

    for t in range(1, min(ahead + 1, T) + 1):
        store.load(t)
    sampler = GlobalSampler(T, config.seed)
    if config.N_g:
        for t in sampler.frames(1, config.T_g, config.online):
            store.load(t)

    results: list[list[Detection]] = []
    for k in range(1, T + 1):
        window = list(local_window(k, T, config.tau, config.online, config.T_l))
        gwin = sampler.window(k, config.T_g, config.online) if config.N_g else []
        obs.begin_frame(k, window, gwin)
        frame_stats = {"frame": k, "local_frames": len(window), "global_frames": len(gwin),
                       "memory_frames": len(memory), "pairs_global": 0, "pairs_local": 0,
                       "updates": 0}

        local = [store.load(t) if t == k else store.load(t).top(config.K_l) for t in window]
        L = Rows.from_frames(local)
        G = Rows.from_frames([store.load(t).top(config.K_g) for _, t in gwin]) if gwin else None
        frame_stats["local_boxes"] = len(L)
        frame_stats["global_boxes"] = len(G) if G is not None else 0

        Lg = run_global_stage(L, G, params.global_stacks, obs, frame_stats)
        use_memory = memory if config.mode == "mega" else None
        levels = run_local_stage(Lg, params.local_stacks, config.K_l, config.K_d,
                                 use_memory, obs, frame_stats)
        key_rows = levels[-1].frame_rows(k)
        final = levels[-1]
        C = nx.take_rows(final.feats, key_rows)
        dets = nms(decode(C, final.geometry[key_rows], k, params.head), config.nms_iou)
        results.append(dets)
        obs.end_frame(k)

        oldest = window[0]
        if config.mode == "mega" and oldest == k - (config.T_l - 1 if config.online else config.tau):
            memory.push(oldest, memory_blocks(levels, oldest, config.K_l, config.K_d))
            obs.push(k, oldest)

        if k + ahead + 1 <= T:
            store.load(k + ahead + 1)
        if config.N_g and k < T:
            for t in sampler.frames(k + 1, config.T_g, config.online):
                if not config.online or t <= k + 1:
                    store.load(t)

        frame_stats["value_mults"] = (frame_stats["pairs_global"] + frame_stats["pairs_local"]) * config.dim
        frame_stats["detections"] = len(dets)
        if stats is not None:
            stats.append(frame_stats)
        log.debug("frame %d: %d detections, memory %s", k, len(dets), memory.frame_indices)
    return results
