"""Tests for the replay buffers."""

import numpy as np
import pytest

from eventrl.agent import LatentState, TransitionTuple
from eventrl.buffers import StepBuffer, TrajectoryBuffer
from eventrl.tpp import EventSequence


def tup(i):
    return TransitionTuple(LatentState(np.array([float(i)]), float(i)), 0, 1.0, 0.0,
                           LatentState(np.array([float(i)]), float(i) + 1.0))


class TestStepBuffer:
    def test_fifo_eviction_at_capacity(self):
        buf = StepBuffer(capacity=4)
        for i in range(7):
            buf.push(tup(i))
        assert len(buf) == 4
        held = sorted(t.s.t for t in buf._items)
        assert held == [3.0, 4.0, 5.0, 6.0]

    def test_sample_without_replacement(self):
        buf = StepBuffer(capacity=16)
        for i in range(16):
            buf.push(tup(i))
        batch = buf.sample(16, rng=0)
        ids = [t.s.t for t in batch]
        assert len(set(ids)) == 16

    def test_sample_too_large_rejected(self):
        buf = StepBuffer(capacity=8)
        buf.push(tup(0))
        with pytest.raises(ValueError):
            buf.sample(2, rng=0)

    def test_sample_deterministic(self):
        buf = StepBuffer(capacity=8)
        for i in range(8):
            buf.push(tup(i))
        a = [t.s.t for t in buf.sample(4, rng=3)]
        b = [t.s.t for t in buf.sample(4, rng=3)]
        assert a == b


class TestTrajectoryBuffer:
    def test_capacity_fifo(self):
        buf = TrajectoryBuffer(capacity=3)
        for i in range(5):
            buf.push(EventSequence(events=[(0.5 + i, 1, 0)], horizon=10.0))
        assert len(buf) == 3
        firsts = [s.events[0][0] for s in buf]
        assert firsts == [2.5, 3.5, 4.5]

    def test_rejects_invalid_stream(self):
        buf = TrajectoryBuffer(capacity=2)
        with pytest.raises(ValueError):
            buf.push(EventSequence(events=[(11.0, 1, 0)], horizon=10.0))

    def test_sample(self):
        buf = TrajectoryBuffer(capacity=8)
        for i in range(8):
            buf.push(EventSequence(events=[(1.0 + i, 1, 0)], horizon=20.0))
        got = buf.sample(3, rng=1)
        assert len(got) == 3
        assert buf.sample(100, rng=0) and len(buf.sample(100, rng=0)) == 8
