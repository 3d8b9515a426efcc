"""Bounded FIFO bank of feature snapshots for contrastive negatives.

The bank holds two kinds of entries: target samples (feature plus the
logits they had when enqueued, so later steps can average them into
refined pseudo-labels) and pool samples retrieved from the auxiliary
index (feature only — their logits are deliberately discarded).  Once
enqueued an entry is immutable; it leaves only by FIFO eviction.

Internally entries live in parallel ring-buffer arrays so per-query
candidate filtering is vectorized; :class:`BankEntry` objects are
materialized only at the API boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class Origin(Enum):
    TARGET = 0
    POOL = 1


@dataclass(frozen=True)
class BankEntry:
    """One immutable snapshot: who, from where, looking like what."""

    sample_id: int
    origin: Origin
    feature: np.ndarray
    logits: np.ndarray | None = None
    insertion_counter: int = -1


class MemoryBank:
    """FIFO ring of at most ``capacity`` feature snapshots."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = int(capacity)
        self._features: np.ndarray | None = None  # (capacity, d)
        self._logits: np.ndarray | None = None  # (capacity, C)
        self._ids = np.zeros(self.capacity, dtype=np.uint64)
        self._origins = np.zeros(self.capacity, dtype=np.uint8)
        self._counters = np.zeros(self.capacity, dtype=np.int64)
        self._head = 0  # oldest slot
        self._size = 0
        self._next_counter = 0
        self._target_rows: dict[int, set[int]] = {}
        self._pool_rows: dict[int, set[int]] = {}
        self._pseudo_cache: np.ndarray | None = None

    def __len__(self) -> int:
        return self._size

    @property
    def occupancy(self) -> int:
        return self._size

    @property
    def feature_dim(self) -> int | None:
        return None if self._features is None else self._features.shape[1]

    def _validate(self, entry: BankEntry) -> None:
        feature = np.asarray(entry.feature)
        if feature.ndim != 1 or not np.all(np.isfinite(feature)):
            raise ValueError("feature must be a finite vector")
        norm = float(np.sqrt(feature.astype(np.float64) @ feature.astype(np.float64)))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError("feature must be unit-norm")
        if entry.origin is Origin.TARGET:
            if entry.logits is None:
                raise ValueError("target entries require logits")
            if not np.all(np.isfinite(entry.logits)):
                raise ValueError("logits must be finite")
        elif entry.logits is not None:
            raise ValueError("pool entries carry no logits")

    def enqueue(self, entries: list[BankEntry]) -> list[int]:
        """Append entries in order, evicting oldest first; returns evicted IDs."""
        entries = list(entries)
        if len(entries) > self.capacity:
            raise ValueError("batch larger than capacity")
        if not entries:
            return []
        for entry in entries:
            self._validate(entry)
        if self._features is None:
            feature = np.asarray(entries[0].feature)
            self._features = np.zeros((self.capacity, feature.shape[0]), dtype=feature.dtype)
        if self._logits is None:
            target_logits = next(
                (np.asarray(e.logits) for e in entries if e.logits is not None), None
            )
            if target_logits is not None:
                self._logits = np.zeros(
                    (self.capacity, target_logits.shape[0]), dtype=target_logits.dtype
                )

        evicted: list[int] = []
        overflow = self._size + len(entries) - self.capacity
        for _ in range(max(0, overflow)):
            evicted.append(self._evict_oldest())
        for entry in entries:
            self._write(entry)
        self._pseudo_cache = None
        return evicted

    def _evict_oldest(self) -> int:
        row = self._head
        sample_id = int(self._ids[row])
        rows = self._target_rows if self._origins[row] == Origin.TARGET.value else self._pool_rows
        rows[sample_id].discard(row)
        if not rows[sample_id]:
            del rows[sample_id]
        self._head = (self._head + 1) % self.capacity
        self._size -= 1
        return sample_id

    def _write(self, entry: BankEntry) -> None:
        row = (self._head + self._size) % self.capacity
        self._ids[row] = np.uint64(entry.sample_id)
        self._origins[row] = entry.origin.value
        self._features[row] = entry.feature
        if entry.origin is Origin.TARGET:
            self._logits[row] = entry.logits
            self._target_rows.setdefault(int(entry.sample_id), set()).add(row)
        else:
            self._pool_rows.setdefault(int(entry.sample_id), set()).add(row)
        self._counters[row] = self._next_counter
        self._next_counter += 1
        self._size += 1

    def entries(self) -> list[BankEntry]:
        """Resident entries, oldest first."""
        out = []
        for offset in range(self._size):
            row = (self._head + offset) % self.capacity
            out.append(self._entry_at(row))
        return out

    def _entry_at(self, row: int) -> BankEntry:
        is_target = self._origins[row] == Origin.TARGET.value
        return BankEntry(
            sample_id=int(self._ids[row]),
            origin=Origin.TARGET if is_target else Origin.POOL,
            feature=self._features[row].copy(),
            logits=self._logits[row].copy() if is_target else None,
            insertion_counter=int(self._counters[row]),
        )

    def aggregate_logits(self, sample_id: int, current_logits: np.ndarray) -> np.ndarray:
        """Uniform mean of the current logits and every resident snapshot.

        Averaging over the snapshots this sample left in previous steps
        smooths single-view noise out of the pseudo-label; with no
        residents the current logits come back unchanged.
        """
        current = np.asarray(current_logits)
        rows = self._target_rows.get(int(sample_id))
        if not rows:
            return current.copy()
        stack = np.vstack([self._logits[sorted(rows)], current[None, :]])
        return np.mean(stack, axis=0, dtype=np.float64).astype(current.dtype)

    def target_pseudo_labels(self) -> np.ndarray:
        """argmax of stored logits per slot (cached until the next enqueue)."""
        if self._pseudo_cache is None:
            if self._logits is None:
                self._pseudo_cache = np.zeros(self.capacity, dtype=np.int64)
            else:
                self._pseudo_cache = np.argmax(self._logits, axis=1)
        return self._pseudo_cache

    def negative_candidate_rows(
        self, query_id: int, query_label: int, neighbor_ids
    ) -> np.ndarray:
        """Slot indices eligible as negatives, ordered by insertion counter.

        Target slots qualify when they belong to a different sample whose
        stored-logit argmax disagrees with the query's label; pool slots
        qualify when their sample ID is among the query's neighbor IDs.
        """
        if self._size == 0:
            return np.zeros(0, dtype=np.int64)
        live = self._live_mask()
        is_target = self._origins == Origin.TARGET.value
        pseudo = self.target_pseudo_labels()
        target_ok = (
            live
            & is_target
            & (self._ids != np.uint64(query_id))
            & (pseudo != int(query_label))
        )
        rows = set(np.flatnonzero(target_ok).tolist())
        for nid in neighbor_ids:
            rows.update(self._pool_rows.get(int(nid), ()))
        out = np.fromiter(rows, dtype=np.int64, count=len(rows))
        return out[np.argsort(self._counters[out], kind="stable")]

    def negative_candidates(
        self, query_id: int, query_pseudo_label: int, neighbor_ids
    ) -> list[BankEntry]:
        rows = self.negative_candidate_rows(query_id, query_pseudo_label, neighbor_ids)
        return [self._entry_at(int(r)) for r in rows]

    def resident_pool_ids(self, ids) -> list[int]:
        """Subset of ``ids`` that currently have pool entries in the bank."""
        return [int(i) for i in ids if int(i) in self._pool_rows]

    def _live_mask(self) -> np.ndarray:
        mask = np.zeros(self.capacity, dtype=bool)
        if self._size == self.capacity:
            mask[:] = True
        else:
            end = self._head + self._size
            if end <= self.capacity:
                mask[self._head : end] = True
            else:
                mask[self._head :] = True
                mask[: end % self.capacity] = True
        return mask

    def feature_rows(self, rows: np.ndarray) -> np.ndarray:
        return self._features[rows]

    def id_rows(self, rows: np.ndarray) -> np.ndarray:
        return self._ids[rows]

    def counter_rows(self, rows: np.ndarray) -> np.ndarray:
        return self._counters[rows]

    def origin_rows(self, rows: np.ndarray) -> np.ndarray:
        return self._origins[rows]


def init_bank(capacity: int, seed_entries: list[BankEntry]) -> MemoryBank:
    """Fresh bank pre-filled with ``seed_entries`` (at most ``capacity``)."""
    if len(seed_entries) > capacity:
        raise ValueError("seed larger than capacity")
    bank = MemoryBank(capacity)
    bank.enqueue(list(seed_entries))
    return bank
