"""Replay buffers: a FIFO ring of decision tuples and a trajectory store."""

from __future__ import annotations

from collections import deque

import numpy as np

from .agent import TransitionTuple
from .tpp import EventSequence, make_rng


class StepBuffer:
    """Fixed-capacity FIFO ring of TransitionTuples with uniform sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: list[TransitionTuple] = []
        self._write = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, item: TransitionTuple) -> None:
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self._write] = item   # overwrite oldest
            self._write = (self._write + 1) % self.capacity

    def sample(self, batch_size: int, rng) -> list[TransitionTuple]:
        """Uniform batch without replacement within the batch."""
        rng = make_rng(rng)
        n = len(self._items)
        if batch_size > n:
            raise ValueError(f"batch {batch_size} exceeds buffer size {n}")
        idx = rng.choice(n, size=batch_size, replace=False)
        return [self._items[i] for i in idx]


class TrajectoryBuffer:
    """Bounded store of complete episode streams (FIFO eviction)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque[EventSequence] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def push(self, seq: EventSequence) -> None:
        """Admit a finished episode; basic stream invariants are re-checked."""
        if seq.horizon <= 0:
            raise ValueError("trajectory must carry a positive horizon")
        last = -np.inf
        for t, _, _ in seq.events:
            if not (last < t < seq.horizon):
                raise ValueError("trajectory violates stream invariants")
            last = t
        self._items.append(seq)

    def sample(self, batch_size: int, rng) -> list[EventSequence]:
        rng = make_rng(rng)
        n = len(self._items)
        if n == 0:
            raise ValueError("empty trajectory buffer")
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        return [self._items[i] for i in idx]
