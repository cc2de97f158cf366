"""Temporal-dropout training with plain SGD."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import numerics as nx
from ..errors import NumericError
from ..memory import LongRangeMemory
from ..numerics import GradTape, Tensor
from ..pools import FrameProposals, local_window
from .config import MegaParams, PipelineConfig
from .detection import head_forward, iou_matrix, regression_targets
from .stages import Rows, memory_blocks, run_global_stage, run_local_stage

log = logging.getLogger(__name__)

POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.4

GroundTruth = Callable[[int], tuple[np.ndarray, np.ndarray]]


@dataclass
class TrainingInstance:
    key: int
    local: list[FrameProposals]  # ascending; key frame holds all boxes
    global_: list[FrameProposals]
    memory: list[FrameProposals]  # frames feeding the gradient-free memory pass
    gt_boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    gt_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def local_frames(self) -> list[int]:
        return [f.frame_index for f in self.local]

    @property
    def global_frames(self) -> list[int]:
        return [f.frame_index for f in self.global_]

    @property
    def memory_frames(self) -> list[int]:
        return [f.frame_index for f in self.memory]


def _pick(rng: np.random.Generator, candidates: Sequence[int], n: int) -> list[int]:
    candidates = list(candidates)
    if len(candidates) <= n:
        return candidates
    return sorted(int(c) for c in rng.choice(candidates, size=n, replace=False))


def sample_training_instance(video: Sequence[FrameProposals], k: int, config: PipelineConfig,
                             rng: np.random.Generator,
                             ground_truth: GroundTruth | None = None) -> TrainingInstance:
    """Key frame plus two window frames, two global frames and up to two memory frames."""
    T = len(video)
    window = local_window(k, T, config.tau, config.online, config.T_l)
    local_ids = sorted(_pick(rng, [t for t in window if t != k], 2) + [k])
    global_range = range(1, (k if config.online else T) + 1)
    global_ids = _pick(rng, global_range, 2) if config.N_g else []
    memory_ids: list[int] = []
    if config.memory_capacity:
        first = window[0]
        memory_ids = _pick(rng, range(max(1, first - config.T_m), first), 2)
    local = [video[t - 1] if t == k else video[t - 1].top(config.K_l) for t in local_ids]
    gt_boxes, gt_labels = ground_truth(k) if ground_truth else (np.zeros((0, 4)), np.zeros(0, dtype=np.int64))
    return TrainingInstance(
        key=k,
        local=local,
        global_=[video[t - 1].top(config.K_g) for t in global_ids],
        memory=[video[t - 1].top(config.K_l) for t in memory_ids],
        gt_boxes=np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4),
        gt_labels=np.asarray(gt_labels, dtype=np.int64),
    )


def build_training_memory(inst: TrainingInstance, params: MegaParams,
                          config: PipelineConfig) -> LongRangeMemory:
    """Run the base model over the memory frames and cache every level (detached)."""
    memory = LongRangeMemory(config.N_l + 1, max(config.T_m, len(inst.memory)))
    if not inst.memory:
        return memory
    rows = Rows.from_frames(inst.memory)
    G = Rows.from_frames(inst.global_) if inst.global_ else None
    rows = run_global_stage(rows, G, params.global_stacks)
    levels = run_local_stage(rows, params.local_stacks, config.K_l, config.K_d)
    for fp in inst.memory:
        memory.push(fp.frame_index, memory_blocks(levels, fp.frame_index, config.K_l, config.K_d))
    return memory


def detection_loss(logits: Tensor, deltas: Tensor, geometry: np.ndarray,
                   gt_boxes: np.ndarray, gt_labels: np.ndarray) -> Tensor:
    """Cross-entropy over matched/negative boxes plus smooth-L1 on positives."""
    n = logits.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    valid = np.ones(n, dtype=bool)
    pos = np.zeros(n, dtype=bool)
    matched = np.zeros(n, dtype=np.int64)
    if len(gt_boxes):
        ious = iou_matrix(geometry, gt_boxes)
        best = ious.max(axis=1)
        matched = ious.argmax(axis=1)
        pos = best >= POSITIVE_IOU
        labels[pos] = gt_labels[matched[pos]]
        valid = pos | (best < NEGATIVE_IOU)
    rows = np.flatnonzero(valid)
    if rows.size == 0:
        return Tensor(0.0)
    logp = nx.log_softmax_rows(logits)
    ce = nx.scale(nx.sum_all(nx.pick(logp, rows, labels[rows])), -1.0 / rows.size)
    pos_rows = np.flatnonzero(pos)
    if pos_rows.size == 0:
        return ce
    target = regression_targets(geometry[pos_rows], gt_boxes[matched[pos_rows]])
    diff = nx.sub(nx.take_rows(deltas, pos_rows), Tensor(target))
    reg = nx.scale(nx.sum_all(nx.smooth_l1(diff)), 1.0 / pos_rows.size)
    return nx.add(ce, reg)


def training_loss(inst: TrainingInstance, params: MegaParams, config: PipelineConfig,
                  memory: LongRangeMemory | None = None) -> Tensor:
    """Loss over the key frame's boxes.

    When ``memory`` is ``None`` the memory is rebuilt here; its contents
    are detached on push, so no gradient flows through its construction.
    """
    if memory is None and config.memory_capacity:
        memory = build_training_memory(inst, params, config)
    rows = Rows.from_frames(inst.local)
    G = Rows.from_frames(inst.global_) if inst.global_ else None
    rows = run_global_stage(rows, G, params.global_stacks)
    levels = run_local_stage(rows, params.local_stacks, config.K_l, config.K_d,
                             memory if config.memory_capacity else None)
    key_rows = levels[-1].frame_rows(inst.key)
    C = nx.take_rows(levels[-1].feats, key_rows)
    logits, deltas = head_forward(C, params.head)
    return detection_loss(logits, deltas, levels[-1].geometry[key_rows], inst.gt_boxes, inst.gt_labels)


def sgd_update(params: MegaParams, grads: Sequence[np.ndarray], learning_rate: float) -> None:
    if learning_rate == 0:
        return
    for p, g in zip(params.parameters(), grads):
        p.data -= learning_rate * g


def train_step(instances: TrainingInstance | Sequence[TrainingInstance], params: MegaParams,
               learning_rate: float, config: PipelineConfig) -> float:
    """One SGD step on the mean loss of ``instances``; returns that loss."""
    batch = [instances] if isinstance(instances, TrainingInstance) else list(instances)
    plist = params.parameters()
    with GradTape() as tape:
        losses = [training_loss(inst, params, config) for inst in batch]
        total = losses[0] if len(losses) == 1 else nx.scale(
            nx.sum_all(nx.concat_rows([nx.reshape(l, (1, 1)) for l in losses])), 1.0 / len(losses))
    value = float(total.data)
    if not np.isfinite(value):
        raise NumericError(f"non-finite training loss at key frame {batch[0].key}")
    grads = tape.gradient(total, plist)
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    sgd_update(params, grads, learning_rate)
    return value


@dataclass
class TrainingVideo:
    frames: list[FrameProposals]
    ground_truth: GroundTruth


def train(videos: Sequence[TrainingVideo], config: PipelineConfig, params: MegaParams,
          steps: int, learning_rate: float, seed: int = 0, batch_size: int = 1,
          callback: Callable[[int, float], None] | None = None) -> list[float]:
    """SGD over randomly drawn (video, key frame) instances; returns the loss curve."""
    config.validate()
    params.check(config)
    rng = np.random.default_rng(seed)
    losses = []
    for step in range(steps):
        batch = []
        for _ in range(batch_size):
            v = videos[int(rng.integers(len(videos)))]
            k = int(rng.integers(1, len(v.frames) + 1))
            batch.append(sample_training_instance(v.frames, k, config, rng, v.ground_truth))
        loss = train_step(batch, params, learning_rate, config)
        losses.append(loss)
        if callback:
            callback(step, loss)
        if step % 100 == 0:
            log.info("step %d loss %.4f", step, loss)
    return losses
