"""Aggregation-size formula, receptive-field tracing and pairwise cost model."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractViolation
from .pipeline.config import MegaParams, PipelineConfig
from .pipeline.inference import PipelineObserver, run_video
from .pipeline.synth import make_scene, synth_video
from .pools import local_window

COUNT_KEYS = ("pairs_global", "pairs_local", "value_mults", "updates")


def aggregation_size(N_l: int, T_m: int, T_l: int, T_g: int) -> tuple[int, int]:
    """Steady-state (local, global) reference frame counts reaching a key frame."""
    for name, v in (("N_l", N_l), ("T_m", T_m), ("T_l", T_l), ("T_g", T_g)):
        if v < 0:
            raise ContractViolation(f"{name} must be >= 0, got {v}")
    return N_l * T_m + T_l, N_l * T_m + T_g


# ------------------------------------------------------------ taint tracing


@dataclass
class ReceptiveField:
    key: int
    local_frames: frozenset[int]
    global_slots: frozenset[int]
    slot_frames: dict[int, int] = field(default_factory=dict)  # slot -> frame it read

    @property
    def global_frames(self) -> frozenset[int]:
        return frozenset(self.slot_frames[s] for s in self.global_slots)

    @property
    def local_count(self) -> int:
        return len(self.local_frames)

    @property
    def global_count(self) -> int:
        return len(self.global_slots)


Taint = tuple[frozenset, frozenset]  # (local frames, global slots)


def _union(a: Taint, b: Taint) -> Taint:
    return a[0] | b[0], a[1] | b[1]


class TaintTracer(PipelineObserver):
    """Propagates frame-of-origin labels along every attention edge the pipeline runs.

    Every query row attends to every reference row (softmax weights are
    generically nonzero), so a row's label after a stack is its own label
    united with all reference labels of that stack. Rows of one frame share
    a label, which keeps the bookkeeping per frame.
    """

    def __init__(self, targets: Iterable[int] | None = None):
        self.targets = None if targets is None else set(targets)
        self.memory: dict[tuple[int, int], Taint] = {}
        self.fields: dict[int, ReceptiveField] = {}
        self.slot_frames: dict[int, int] = {}

    def begin_frame(self, k, local_frames, global_window):
        self.k = k
        self.cur: dict[int, Taint] = {t: (frozenset([t]), frozenset()) for t in local_frames}
        self.global_taint: Taint = (frozenset(), frozenset(s for s, _ in global_window))
        self.slot_frames.update(global_window)
        self.levels: list[dict[int, Taint]] = []

    def global_stack(self, stack, query_frames, ref_frames):
        self.cur = {t: _union(v, self.global_taint) for t, v in self.cur.items()}

    def local_stack(self, stack, query_frames, ref_frames, memory_frames):
        if stack == 1:
            self.levels.append(dict(self.cur))
        refs: Taint = (frozenset(), frozenset())
        for t in set(int(f) for f in ref_frames):
            refs = _union(refs, self.cur[t])
        for t in set(int(f) for f in memory_frames):
            refs = _union(refs, self.memory[(t, stack - 1)])
        self.cur = {t: _union(v, refs) for t, v in self.cur.items()}
        self.levels.append(dict(self.cur))

    def end_frame(self, k):
        if self.targets is None or k in self.targets:
            loc, glob = self.cur[k]
            self.fields[k] = ReceptiveField(k, loc, glob, {s: self.slot_frames[s] for s in glob})

    def push(self, k, frame):
        for level, taints in enumerate(self.levels):
            self.memory[(frame, level)] = taints[frame]


def _tiny(config: PipelineConfig) -> PipelineConfig:
    return config.replace(dim=8, heads=2, embed_dim=8)


def trace_receptive_field(config: PipelineConfig, T: int, k: int | Sequence[int],
                          seed: int = 0) -> ReceptiveField | dict[int, ReceptiveField]:
    """Run the pipeline at tiny dims on a synthetic video of length ``T`` and trace ``k``.

    ``k`` may be a single key frame or a sequence (one pass serves all).
    """
    keys = [k] if isinstance(k, (int, np.integer)) else list(k)
    cfg = _tiny(config).replace(T=T)
    scene = make_scene(T, cfg.num_classes, cfg.dim, num_tracks=1, seed=seed)
    video = synth_video(scene, cfg, seed=seed)
    tracer = TaintTracer(keys)
    run_video(video, cfg, MegaParams.init(cfg, seed=seed), observer=tracer)
    if isinstance(k, (int, np.integer)):
        return tracer.fields[int(k)]
    return {key: tracer.fields[key] for key in keys}


# ------------------------------------------------------------ cost model


@dataclass
class CostReport:
    """Per-frame counts and their totals.

    ``pairs_*`` count attention (query, reference) evaluations per stage,
    ``value_mults`` the multiply-adds of the weighted value sums, and
    ``updates`` the feature vectors rewritten by a relation module.
    """

    per_frame: list[dict[str, int]]

    @property
    def totals(self) -> dict[str, int]:
        out = {key: sum(f[key] for f in self.per_frame) for key in COUNT_KEYS}
        out["pairs"] = out["pairs_global"] + out["pairs_local"]
        return out

    def frame(self, k: int) -> dict[str, int]:
        return self.per_frame[k - 1]


def _frame_counts(config: PipelineConfig, k: int, n_window: int, n_global: int,
                  occupancy: int) -> dict[str, int]:
    N, K_l, K_d = config.N, min(config.K_l, config.N), config.K_d
    L = N + (n_window - 1) * K_l
    G = n_global * min(config.K_g, N)
    pairs_global = config.N_g * L * G if n_global else 0
    pairs_local = 0
    for s in range(1, config.N_l + 1):
        per_frame = K_l if s == 1 else min(K_d, K_l)
        mem_rows = K_l if s == 1 else min(K_d, K_l)
        pairs_local += L * (n_window * per_frame + occupancy * mem_rows)
    updates = (config.N_g if n_global else 0) * L + config.N_l * L
    return {
        "frame": k,
        "local_boxes": L,
        "global_boxes": G,
        "memory_frames": occupancy,
        "pairs_global": pairs_global,
        "pairs_local": pairs_local,
        "value_mults": (pairs_global + pairs_local) * config.dim,
        "updates": updates,
    }


def _occupancy(config: PipelineConfig, k: int) -> int:
    if config.memory_capacity == 0:
        return 0
    lag = config.T_l - 1 if config.online else config.tau
    return min(config.T_m, max(0, k - 1 - lag))


def _global_size(config: PipelineConfig, T: int, k: int) -> int:
    if not config.N_g:
        return 0
    return min(config.T_g, k if config.online else T)


def count_ops(config: PipelineConfig, T: int) -> CostReport:
    """Closed-form per-frame counts for a ``T``-frame video with ``config.N`` boxes per frame."""
    config.validate()
    frames = []
    for k in range(1, T + 1):
        n_window = len(local_window(k, T, config.tau, config.online, config.T_l))
        frames.append(_frame_counts(config, k, n_window, _global_size(config, T, k),
                                    _occupancy(config, k)))
    return CostReport(frames)


def enlarged_window_ops(config: PipelineConfig, T: int) -> CostReport:
    """Base model whose local window also spans the ``T_m`` frames memory would cover.

    The window for ``k`` becomes ``k - tau - T_m .. k + tau`` (online:
    ``k - T_l - T_m + 1 .. k``), clipped to the video; there is no memory.
    """
    config.validate()
    frames = []
    for k in range(1, T + 1):
        if config.online:
            lo, hi = k - config.T_l - config.T_m + 1, k
        else:
            lo, hi = k - config.tau - config.T_m, k + config.tau
        n_window = min(T, hi) - max(1, lo) + 1
        frames.append(_frame_counts(config, k, n_window, _global_size(config, T, k), 0))
    return CostReport(frames)


def steady_state_frame(config: PipelineConfig) -> tuple[int, int]:
    """A ``(T, k)`` pair with full windows and a full memory at ``k``."""
    reach = config.T_l + config.T_m + config.T_g + 1
    T = 10 * reach
    return T, T // 2


def steady_pairs(config: PipelineConfig, enlarged: bool = False) -> int:
    T, k = steady_state_frame(config)
    report = enlarged_window_ops(config, T) if enlarged else count_ops(config, T)
    f = report.frame(k)
    return f["pairs_global"] + f["pairs_local"]


def second_divided_differences(xs: Sequence[int], ys: Sequence[int]) -> list[Fraction]:
    """Exact second divided differences; all zero iff the points are collinear."""
    if len(xs) != len(ys) or len(xs) < 3:
        raise ContractViolation("need at least three (x, y) points")
    slopes = [Fraction(ys[i + 1] - ys[i], xs[i + 1] - xs[i]) for i in range(len(xs) - 1)]
    return [(slopes[i + 1] - slopes[i]) / (xs[i + 2] - xs[i]) for i in range(len(slopes) - 1)]


@dataclass
class LinearityReport:
    T_m: list[int]
    mega_pairs: list[int]
    enlarged_pairs: list[int]
    mega_second_diff: list[Fraction]
    enlarged_second_diff: list[Fraction]
    crossover: int | None  # smallest T_m >= 1 where the enlarged window costs more

    @property
    def holds(self) -> bool:
        return all(d == 0 for d in self.mega_second_diff) and all(d > 0 for d in self.enlarged_second_diff)


def linearity_report(config: PipelineConfig, T_ms: Sequence[int] = (8, 16, 32, 64)) -> LinearityReport:
    """Steady-state pair counts of memory vs. enlarged window as ``T_m`` grows."""
    mega = config.replace(mode="mega")
    m = [steady_pairs(mega.replace(T_m=t)) for t in T_ms]
    e = [steady_pairs(mega.replace(T_m=t), enlarged=True) for t in T_ms]
    crossover = None
    for t in range(1, max(T_ms) + 1):
        c = mega.replace(T_m=t)
        if steady_pairs(c, enlarged=True) > steady_pairs(c):
            crossover = t
            break
    return LinearityReport(list(T_ms), m, e, second_divided_differences(T_ms, m),
                           second_divided_differences(T_ms, e), crossover)


# ------------------------------------------------------------ sweeps


@dataclass
class FieldCheck:
    N_l: int
    T_m: int
    T_l: int
    T_g: int
    traced_local: int
    traced_global: int
    expected_local: int
    expected_global: int

    @property
    def ok(self) -> bool:
        return (self.traced_local, self.traced_global) == (self.expected_local, self.expected_global)


def receptive_field_sweep(N_ls: Sequence[int] = (1, 2, 3), T_ms: Sequence[int] = (0, 2, 4),
                          T_ls: Sequence[int] = (3, 5), T_g: int = 3,
                          base: PipelineConfig | None = None) -> list[FieldCheck]:
    """Trace a steady-state key frame for every config and compare with the formula."""
    base = base or PipelineConfig()
    rows = []
    for N_l in N_ls:
        for T_m in T_ms:
            for T_l in T_ls:
                cfg = base.replace(N_l=N_l, T_m=T_m, tau=(T_l - 1) // 2, T_g=T_g, mode="mega",
                                   online=False, K_l=4, K_g=3, K_d=2, N=5)
                T = 10 * (T_m + T_l)
                # deep enough for every memory chain, far enough from the end for full windows
                k = T - cfg.tau - 1
                rf = trace_receptive_field(cfg, T, k)
                loc, glob = aggregation_size(N_l, T_m, T_l, T_g)
                rows.append(FieldCheck(N_l, T_m, T_l, T_g, rf.local_count, rf.global_count, loc, glob))
    return rows

