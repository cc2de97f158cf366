import numpy as np
import pytest
from hypothesis import given, strategies as st

from mega import numerics as nx
from mega.errors import ContractViolation
from mega.memory import LongRangeMemory, MemoryBlock, memory_push, memory_view
from mega.numerics import GradTape, Tensor
from mega.relation import BoxFeature


def boxes(t, n=2, d=3):
    r = np.random.default_rng(t)
    return [BoxFeature(r.normal(size=d), (0.5, 0.5, 0.1, 0.1), t, 0.5) for _ in range(n)]


def push_frames(mem, frames, n=2):
    for t in frames:
        memory_push(mem, t, [boxes(t, n) for _ in range(mem.num_levels)])
    return mem


def test_fifo_evicts_oldest():
    mem = push_frames(LongRangeMemory(2, 2), [1, 2, 3])
    assert mem.frame_indices == [2, 3]
    for level in range(2):
        assert [b.frame_index for b in mem.entries(level)] == [2, 3]


def test_push_into_empty():
    assert len(push_frames(LongRangeMemory(1, 4), [7])) == 1


def test_level_count_is_N_l_plus_one():
    mem = LongRangeMemory(3 + 1, 5)
    assert mem.num_levels == 4
    with pytest.raises(ContractViolation):
        mem.push(1, [boxes(1)] * 3)


def test_out_of_order_push_rejected():
    mem = push_frames(LongRangeMemory(1, 3), [4])
    with pytest.raises(ContractViolation):
        mem.push(4, [boxes(4)])
    with pytest.raises(ContractViolation):
        mem.push(2, [boxes(2)])


def test_view_empty_and_ordering():
    mem = LongRangeMemory(2, 3)
    assert memory_view(mem, 0) == []
    push_frames(mem, [1, 2], n=20)
    view = memory_view(mem, 1)
    assert len(view) == 40
    assert [b.frame_index for b in view[:20]] == [1] * 20


def test_view_after_five_pushes():
    mem = push_frames(LongRangeMemory(1, 3), range(1, 6))
    assert [b.frame_index for b in memory_view(mem, 0)][::2] == [3, 4, 5]


def test_view_level_out_of_range():
    with pytest.raises(ContractViolation):
        memory_view(LongRangeMemory(2, 3), 2)


@given(st.integers(0, 30), st.integers(1, 8))
def test_schedule_after_n_pushes(n, T_m):
    mem = push_frames(LongRangeMemory(3, T_m), range(1, n + 1), n=1)
    expect = list(range(max(1, n - T_m + 1), n + 1))
    for level in range(3):
        assert [b.frame_index for b in mem.entries(level)] == expect
        assert len(memory_view(mem, level)) == len(expect)


def test_zero_capacity_holds_nothing():
    mem = push_frames(LongRangeMemory(2, 0), [1, 2])
    assert len(mem) == 0 and mem.view_block(0) is None


def test_cached_features_are_detached_copies():
    src = Tensor(np.ones((2, 3)), requires_grad=True)
    block = MemoryBlock(1, src, np.tile([0.5, 0.5, 0.1, 0.1], (2, 1)), np.ones(2))
    mem = LongRangeMemory(1, 2)
    mem.push(1, [block])
    src.data[:] = 5.0  # later mutation of the source does not leak in
    cached = mem.entries(0)[0].feats
    assert isinstance(cached, np.ndarray) and not cached.flags.writeable
    assert np.array_equal(cached, np.ones((2, 3)))


def test_loss_through_memory_has_zero_gradient():
    w = Tensor(np.ones((2, 3)), requires_grad=True)
    mem = LongRangeMemory(1, 2)
    with GradTape() as tape:
        scaled = nx.mul(Tensor(np.ones((2, 3))), w)
        mem.push(1, [MemoryBlock(1, scaled, np.tile([0.5, 0.5, 0.1, 0.1], (2, 1)), np.ones(2))])
        feats, _, _ = mem.view_block(0)
        loss = nx.sum_all(nx.mul(Tensor(feats), Tensor(feats)))
    assert np.array_equal(tape.gradient(loss, [w])[0], np.zeros((2, 3)))


def test_raw_tensor_push_rejected():
    with pytest.raises(ContractViolation):
        LongRangeMemory(1, 1).push(1, [Tensor(np.ones((1, 2)))])


def test_json_round_trip():
    mem = push_frames(LongRangeMemory(2, 3), [1, 2, 5])
    back = LongRangeMemory.from_json(mem.to_json())
    assert back.frame_indices == [1, 2, 5]
    for level in range(2):
        for a, b in zip(mem.entries(level), back.entries(level)):
            assert np.array_equal(a.feats, b.feats)


def test_reset_empties_every_level():
    mem = push_frames(LongRangeMemory(2, 3), [1, 2])
    mem.reset()
    assert len(mem) == 0 and all(mem.entries(i) == [] for i in range(2))
