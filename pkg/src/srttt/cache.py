"""Fixed-capacity residual cache of routed keys/values with priority eviction."""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CacheEntry:
    key: np.ndarray  # n_heads x d_head, post-RoPE
    value: np.ndarray  # n_heads x d_head
    priority: float
    insertion_seq: int = -1
    source_position: int = -1


@dataclass(frozen=True)
class CacheSnapshot:
    keys: np.ndarray  # m x n_heads x d_head
    values: np.ndarray
    positions: np.ndarray
    insertion_seqs: np.ndarray

    def __len__(self):
        return len(self.positions)


class ResidualCache:
    """Bounded store; when full, a newcomer replaces the lowest-priority
    resident (oldest on ties) if its priority is at least as high, otherwise
    it is rejected.
    """

    def __init__(self, capacity: int, n_heads: int = 1, d_head: int = 1):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.n_heads = n_heads
        self.d_head = d_head
        self.next_insertion_seq = 0
        self._entries: dict[int, CacheEntry] = {}
        self._heap: list[tuple[float, int]] = []

    def __len__(self):
        return len(self._entries)

    @property
    def entries(self) -> list[CacheEntry]:
        return [self._entries[s] for s in sorted(self._entries)]

    def insert(self, entry: CacheEntry) -> CacheEntry | None:
        """Insert ``entry``; returns the evicted or rejected entry, if any."""
        if entry.priority < 0:
            raise ValueError("priority must be non-negative")
        seq = self.next_insertion_seq
        self.next_insertion_seq += 1
        entry = CacheEntry(
            np.array(entry.key, dtype=np.float64),
            np.array(entry.value, dtype=np.float64),
            float(entry.priority),
            seq,
            entry.source_position,
        )
        if len(self._entries) < self.capacity:
            self._push(entry)
            return None
        prio, victim_seq = self._heap[0]
        if entry.priority >= prio:
            heapq.heappop(self._heap)
            victim = self._entries.pop(victim_seq)
            self._push(entry)
            return victim
        return entry

    def _push(self, entry: CacheEntry):
        self._entries[entry.insertion_seq] = entry
        heapq.heappush(self._heap, (entry.priority, entry.insertion_seq))

    def snapshot(self) -> CacheSnapshot:
        ents = self.entries
        shape = (0, self.n_heads, self.d_head)
        keys = np.stack([e.key for e in ents]) if ents else np.zeros(shape)
        values = np.stack([e.value for e in ents]) if ents else np.zeros(shape)
        keys.setflags(write=False)
        values.setflags(write=False)
        return CacheSnapshot(
            keys,
            values,
            np.array([e.source_position for e in ents], dtype=np.int64),
            np.array([e.insertion_seq for e in ents], dtype=np.int64),
        )

    def reset(self):
        self._entries.clear()
        self._heap.clear()

    def dump(self) -> str:
        lines = [f"# capacity={self.capacity} occupancy={len(self)}", "insertion_seq\tsource_position\tpriority"]
        for e in self.entries:
            lines.append(f"{e.insertion_seq}\t{e.source_position}\t{e.priority:.6g}")
        return "\n".join(lines) + "\n"
