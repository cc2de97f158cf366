import numpy as np
import pytest

from mega.errors import ContractViolation
from mega.memory import LongRangeMemory
from mega.pools import FrameProposals, ProposalPool
from mega.relation import BoxFeature, RelationParams, relation_module
from mega.pipeline import enhanced_local_stage, global_stage, local_stage
from oracles import module_oracle


def frame(t, n, d=8, seed=0, positive=False):
    r = np.random.default_rng(seed * 7919 + t)
    feats = r.normal(size=(n, d))
    geom = np.column_stack([r.uniform(0.2, 0.8, n), r.uniform(0.2, 0.8, n),
                            r.uniform(0.05, 0.3, n), r.uniform(0.05, 0.3, n)])
    return FrameProposals(t, np.abs(feats) if positive else feats, geom, r.uniform(size=n))


def stacks(n, seed, d=8, M=2, E=20):
    rng = np.random.default_rng(seed)
    return [RelationParams.init(d, M, E, rng) for _ in range(n)]


def pool_feats(pool):
    return pool.feats()


def with_semantic(boxes, feats):
    return [BoxFeature(f, b.geometry, b.frame_index, b.objectness) for b, f in zip(boxes, feats)]


def top_boxes(pool, feats, K):
    """Each frame's first K boxes (pool rows are objectness-sorted), carrying ``feats``."""
    out, start = [], 0
    boxes = with_semantic(pool.boxes(), feats)
    for fp in pool.frames:
        out += boxes[start:start + min(K, len(fp))]
        start += len(fp)
    return out


# ---------------------------------------------------------------- global

def test_global_stage_without_stacks_is_identity():
    L = ProposalPool([frame(1, 3), frame(2, 3)])
    out = global_stage(L, ProposalPool([frame(5, 3)], "global"), [])
    assert np.array_equal(out.feats(), L.feats())


def test_global_stage_zero_values_is_residual_identity():
    L = ProposalPool([frame(1, 3, positive=True), frame(2, 3, positive=True)])
    G = ProposalPool([frame(7, 3), frame(9, 3)], "global")
    p = stacks(1, 0)
    p[0].w_value.data[:] = 0.0
    p[0].w_out.data[:] = np.eye(8)
    p[0].b_out.data[:] = 0.0
    assert np.array_equal(global_stage(L, G, p).feats(), L.feats())


@pytest.mark.parametrize("n_stacks", [1, 2])
def test_global_stage_matches_loop_oracle(n_stacks):
    L = ProposalPool([frame(1, 3, seed=1), frame(2, 3, seed=1)])
    G = ProposalPool([frame(8, 3, seed=1), frame(4, 3, seed=1)], "global")
    p = stacks(n_stacks, 3)
    q = L.boxes()
    for params in p:  # references are the original G at every stack
        q = with_semantic(q, module_oracle(q, G.boxes(), params, "location_free"))
    out = global_stage(L, G, p)
    assert np.max(np.abs(out.feats() - np.array([b.semantic for b in q]))) <= 1e-12
    assert np.array_equal(out.geometry(), L.geometry())


def test_global_stage_needs_references():
    with pytest.raises(ContractViolation):
        global_stage(ProposalPool([frame(1, 2)]), ProposalPool([], "global"), stacks(1, 0))


# ---------------------------------------------------------------- local

def test_single_box_local_stack_is_h_of_f_plus_value():
    fp = frame(1, 1)
    p = stacks(1, 4)
    f = fp.feats[0]
    expect = np.maximum(p[0].w_out.data @ (f + p[0].w_value.data @ f) + p[0].b_out.data, 0)
    out = local_stage(ProposalPool([fp]), p, K_l=1, K_d=1)
    assert np.allclose(out.feats()[0], expect, atol=1e-14)


def local_oracle(pool, params, K_l, K_d, memory_levels=None, mode="location_based"):
    feats = pool.feats()
    for s, p in enumerate(params, start=1):
        refs = top_boxes(pool, feats, K_l if s == 1 else K_d)
        if memory_levels:
            refs = refs + memory_levels[s - 1]
        feats = module_oracle(with_semantic(pool.boxes(), feats), refs, p, mode)
    return feats


def test_local_stage_matches_loop_oracle():
    pool = ProposalPool([frame(t, 5, seed=2) for t in (3, 4, 5)])
    p = stacks(3, 5)
    got = local_stage(pool, p, K_l=4, K_d=2).feats()
    assert np.max(np.abs(got - local_oracle(pool, p, 4, 2))) <= 1e-12


def test_zero_gates_equal_location_free_stack():
    pool = ProposalPool([frame(t, 4, seed=6) for t in (1, 2)])
    p = stacks(2, 6)
    for params in p:
        params.w_geo.data[:] = 0.0
    got = local_stage(pool, p, K_l=3, K_d=2).feats()
    free = local_oracle(pool, p, 3, 2, mode="location_free")
    assert np.max(np.abs(got - free)) <= 1e-12


def test_enhanced_with_empty_memory_equals_local_bitwise():
    pool = ProposalPool([frame(t, 5, seed=3) for t in (2, 3, 4)])
    p = stacks(2, 7)
    plain = local_stage(pool, p, 4, 2)
    enh, oldest = enhanced_local_stage(pool, LongRangeMemory(3, 4), p, 4, 2)
    assert np.array_equal(plain.feats(), enh.feats())
    assert [b.frame_index for b in oldest] == [2, 2, 2]
    assert [len(b) for b in oldest] == [4, 2, 2]


def test_enhanced_with_one_memory_frame_matches_loop_oracle():
    pool = ProposalPool([frame(t, 5, seed=4) for t in (6, 7, 8)])
    p = stacks(2, 8)
    r = np.random.default_rng(9)
    mem_levels = []
    for level, n in enumerate((4, 2, 2)):
        mem_levels.append([BoxFeature(r.normal(size=8), (r.uniform(0.2, 0.8), r.uniform(0.2, 0.8), 0.1, 0.2), 5,
                                      float(r.uniform())) for _ in range(n)])
    mem = LongRangeMemory(3, 2)
    mem.push(5, mem_levels)
    enh, _ = enhanced_local_stage(pool, mem, p, 4, 2)
    expect = local_oracle(pool, p, 4, 2, memory_levels=mem_levels)
    assert np.max(np.abs(enh.feats() - expect)) <= 1e-12
    assert not np.allclose(enh.feats(), local_stage(pool, p, 4, 2).feats())


def test_enhanced_level_mismatch_rejected():
    pool = ProposalPool([frame(1, 3)])
    with pytest.raises(ContractViolation):
        enhanced_local_stage(pool, LongRangeMemory(2, 2), stacks(2, 0), 2, 1)
