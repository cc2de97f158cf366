"""Toy occlusion benchmark comparing single-frame, base-model and memory-enhanced detectors."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .pipeline import (MegaParams, PipelineConfig, TrainingVideo, make_codebook, make_scene,
                       mean_ap, run_video, synth_video, train)

log = logging.getLogger(__name__)


@dataclass
class BenchmarkConfig:
    num_classes: int = 3
    train_videos: int = 30
    test_videos: int = 20
    frames: int = 60
    tracks: int = 2
    occluded_fraction: float = 0.45
    min_occlusion: int = 3
    max_occlusion: int = 12
    occluded_quality: tuple[float, float] = (0.2, 0.45)  # dimmed, not erased: neighbours can restore it
    steps: int = 3000
    learning_rate: float = 0.2
    batch_size: int = 2
    seed: int = 0
    base: PipelineConfig = field(default_factory=PipelineConfig)


def variant_configs(bench: BenchmarkConfig) -> dict[str, PipelineConfig]:
    base = bench.base.replace(num_classes=bench.num_classes)
    return {
        "single_frame": base.replace(tau=0, T_l=1, N_g=0, T_m=0, mode="base_model"),
        "base_model": base.replace(mode="base_model"),
        "mega": base.replace(mode="mega"),
    }


def make_videos(bench: BenchmarkConfig, count: int, seed_offset: int, config: PipelineConfig):
    book = make_codebook(bench.num_classes, config.dim, seed=bench.seed)
    out = []
    for i in range(count):
        s = bench.seed * 100003 + seed_offset + i
        scene = make_scene(bench.frames, bench.num_classes, config.dim, bench.tracks, seed=s,
                           codebook=book, occluded_fraction=bench.occluded_fraction,
                           min_len=bench.min_occlusion, max_len=bench.max_occlusion,
                           occluded=tuple(bench.occluded_quality))
        out.append((scene, synth_video(scene, config, seed=s + 7919)))
    return out


def evaluate(config: PipelineConfig, params: MegaParams, videos) -> tuple[float, list[float]]:
    dets, gts = {}, {}
    for vi, (scene, frames) in enumerate(videos):
        per_frame = run_video(frames, config, params)
        for t, d in enumerate(per_frame, start=1):
            dets[(vi, t)] = d
            gts[(vi, t)] = scene.ground_truth(t)
    return mean_ap(dets, gts, config.num_classes)


def run_benchmark(bench: BenchmarkConfig | None = None, variants: list[str] | None = None) -> dict:
    """Train each variant with the same budget and report its test mAP (percent)."""
    bench = bench or BenchmarkConfig()
    configs = variant_configs(bench)
    probe = configs["mega"]
    train_set = make_videos(bench, bench.train_videos, 0, probe)
    test_set = make_videos(bench, bench.test_videos, 50_000, probe)
    results = {}
    for name in variants or list(configs):
        cfg = configs[name]
        params = MegaParams.init(cfg, seed=bench.seed)
        t0 = time.time()
        losses = train([TrainingVideo(f, s.ground_truth) for s, f in train_set], cfg, params,
                       bench.steps, bench.learning_rate, seed=bench.seed, batch_size=bench.batch_size)
        m, per_class = evaluate(cfg, params, test_set)
        results[name] = {"map": 100 * m, "per_class": [100 * a for a in per_class],
                         "final_loss": float(np.mean(losses[-50:])), "seconds": time.time() - t0}
        log.info("%s: mAP %.2f (%.1fs)", name, 100 * m, results[name]["seconds"])
    return results
