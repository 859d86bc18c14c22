"""Prioritized replay with a temporal-similarity bonus.

Priority of a stored transition is |td_error| + alpha * S(h_t, h_next) +
floor, where S is cosine similarity of the fused recurrent features at
storage time mapped to [0, 1]. Sampling is proportional to
priority**priority_exponent through a sum tree, with stratified draws and
importance weights (N * P(i))**(-beta) normalized by the batch maximum.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def similarity(h_t: np.ndarray, h_next: np.ndarray) -> float:
    """Cosine similarity mapped to [0, 1]; 0.5 when either vector is zero."""
    h_t = np.asarray(h_t, dtype=np.float64).ravel()
    h_next = np.asarray(h_next, dtype=np.float64).ravel()
    if h_t.shape != h_next.shape:
        raise ValueError(f"shape mismatch {h_t.shape} vs {h_next.shape}")
    na, nb = np.linalg.norm(h_t), np.linalg.norm(h_next)
    if na == 0.0 or nb == 0.0:
        return 0.5
    cosine = float(np.dot(h_t, h_next) / (na * nb))
    return (min(1.0, max(-1.0, cosine)) + 1.0) / 2.0


class SumTree:
    """Flat-array binary sum tree over `capacity` leaves.

    Internal nodes are recomputed as left+right on every update, so the
    root stays consistent with the leaves without accumulating drift.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.nodes = np.zeros(2 * capacity - 1)

    @property
    def total(self) -> float:
        return float(self.nodes[0])

    def leaf(self, slot: int) -> float:
        return float(self.nodes[self.capacity - 1 + slot])

    def update(self, slot: int, value: float) -> None:
        if not 0 <= slot < self.capacity:
            raise IndexError(f"slot {slot} out of range")
        idx = self.capacity - 1 + slot
        self.nodes[idx] = value
        while idx > 0:
            idx = (idx - 1) // 2
            self.nodes[idx] = self.nodes[2 * idx + 1] + self.nodes[2 * idx + 2]

    def find_prefix(self, mass: float) -> int:
        """Return the leaf slot containing the given cumulative mass."""
        idx = 0
        while idx < self.capacity - 1:
            left = 2 * idx + 1
            if mass <= self.nodes[left] or self.nodes[left + 1] == 0.0:
                idx = left
            else:
                mass -= self.nodes[left]
                idx = left + 1
        return idx - (self.capacity - 1)


@dataclass
class Transition:
    """One step of experience with enough context to re-drive the network.

    `frames` is the observation window that produced the action (T frames,
    uint8); `next_frame` extends it by one step, so the successor window is
    frames[1:] plus next_frame. Hidden snapshots are taken at storage time.
    """

    frames: np.ndarray  # (T, C, H, W) uint8
    action: int
    reward: float
    next_frame: np.ndarray  # (C, H, W) uint8
    done: bool
    h_t: np.ndarray
    h_next: np.ndarray

    def next_frames(self) -> np.ndarray:
        return np.concatenate([self.frames[1:], self.next_frame[None]], axis=0)


class ReplayBuffer:
    """Ring buffer + sum tree; single-writer, not thread-safe."""

    def __init__(self, capacity: int, alpha_similarity: float = 0.5,
                 priority_floor: float = 0.01, priority_exponent: float = 0.6,
                 uniform: bool = False):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if priority_floor <= 0:
            raise ValueError("priority_floor must be positive (keeps priorities > 0)")
        self.capacity = capacity
        self.alpha_similarity = alpha_similarity
        self.priority_floor = priority_floor
        self.priority_exponent = priority_exponent
        self.uniform = uniform
        self.tree = SumTree(capacity)
        self.storage: list[Transition | None] = [None] * capacity
        self.slot_ids = np.full(capacity, -1, dtype=np.int64)
        self.similarities = np.zeros(capacity)
        self.priorities = np.zeros(capacity)
        self.next_id = 0
        self.stale_updates = 0

    def __len__(self) -> int:
        return min(self.next_id, self.capacity)

    def _priority(self, td_error: float, sim: float) -> float:
        return abs(float(td_error)) + self.alpha_similarity * sim + self.priority_floor

    def _leaf_value(self, priority: float) -> float:
        if self.uniform:
            return 1.0
        return priority ** self.priority_exponent

    def push(self, transition: Transition, td_error: float) -> int:
        """Insert (evicting the oldest at capacity); returns the insertion id."""
        slot = self.next_id % self.capacity
        sim = similarity(transition.h_t, transition.h_next)
        priority = self._priority(td_error, sim)
        self.storage[slot] = transition
        self.slot_ids[slot] = self.next_id
        self.similarities[slot] = sim
        self.priorities[slot] = priority
        self.tree.update(slot, self._leaf_value(priority))
        self.next_id += 1
        return self.next_id - 1

    def sample(self, batch: int, beta: float, rng: np.random.Generator):
        """Stratified proportional sample.

        Returns (transitions, ids, weights): `ids` are insertion ids for
        later priority updates, `weights` are max-normalized importance
        weights computed at the given beta.
        """
        n = len(self)
        if batch < 1 or batch > n:
            raise ValueError(f"cannot sample {batch} items from {n}")
        total = self.tree.total
        segment = total / batch
        slots = np.empty(batch, dtype=np.int64)
        for i in range(batch):
            mass = rng.uniform(i * segment, (i + 1) * segment)
            slots[i] = self.tree.find_prefix(mass)
        probs = np.array([self.tree.leaf(s) for s in slots]) / total
        weights = (n * probs) ** (-beta)
        weights = weights / weights.max()
        transitions = [self.storage[s] for s in slots]
        ids = self.slot_ids[slots].copy()
        return transitions, ids, weights

    def update_priorities(self, ids, td_errors, similarities=None) -> None:
        """Refresh priorities for previously sampled items.

        Similarities default to the values stored at insertion time. Ids
        whose slot has been overwritten since sampling are skipped and
        counted in `stale_updates`.
        """
        ids = np.asarray(ids, dtype=np.int64)
        td_errors = np.asarray(td_errors, dtype=np.float64)
        if similarities is not None:
            similarities = np.asarray(similarities, dtype=np.float64)
        for j, ident in enumerate(ids):
            slot = int(ident) % self.capacity
            if self.slot_ids[slot] != ident:
                self.stale_updates += 1
                continue
            sim = self.similarities[slot] if similarities is None else similarities[j]
            self.similarities[slot] = sim
            priority = self._priority(td_errors[j], sim)
            self.priorities[slot] = priority
            self.tree.update(slot, self._leaf_value(priority))
