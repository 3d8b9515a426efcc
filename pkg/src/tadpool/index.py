"""Exact cosine-similarity retrieval over a deduplicated vector pool.

The pool is small enough (well under 10M rows) that retrieval is a
brute-force scan: similarities are computed in double precision and
ranked descending, ties broken by ascending ID, so every query has one
well-defined answer.  Deduplication at build time keeps, out of any
group of near-identical rows, only the lowest-ID member; the greedy
ascending-ID scan makes that choice order-independent.
"""

from __future__ import annotations

import numpy as np

from tadpool import io
from tadpool.numerics import Rng, l2_normalize

DEFAULT_DEDUP_THRESHOLD = 0.999


class EmbeddingIndex:
    """Immutable embedding rows plus a soft-delete mask.

    Rows are stored in ascending-ID order, unit-normalized float32.
    ``remove`` only flips alive flags; queries never see dead rows.
    """

    def __init__(self, embeddings: np.ndarray, ids: np.ndarray, tags: np.ndarray):
        embeddings = np.asarray(embeddings, dtype=np.float32)
        ids = np.asarray(ids, dtype=np.uint64)
        tags = np.asarray(tags, dtype=np.uint16)
        if embeddings.ndim != 2:
            raise ValueError("embeddings must be a 2-d array")
        if len(ids) != len(embeddings) or len(tags) != len(embeddings):
            raise ValueError("ids and tags must have one entry per row")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("duplicate ids")
        if len(embeddings) and np.any(
            np.abs(np.linalg.norm(embeddings, axis=1) - 1.0) > 1e-5
        ):
            raise ValueError("embeddings must be unit-norm")
        order = np.argsort(ids, kind="stable")
        self.embeddings = embeddings[order]
        self.ids = ids[order]
        self.tags = tags[order]
        self.alive = np.ones(len(self.ids), dtype=bool)
        self._row_of = {int(i): row for row, i in enumerate(self.ids)}
        # Double-precision copy used for every similarity scan.
        self._emb64 = self.embeddings.astype(np.float64)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_alive(self) -> int:
        return int(np.count_nonzero(self.alive))

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def alive_ids(self) -> np.ndarray:
        return self.ids[self.alive]

    def _normalize_query(self, query: np.ndarray) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        if q.ndim != 1 or q.shape[0] != self.dim:
            raise ValueError("query dimension mismatch")
        return l2_normalize(q)

    def _ranked_alive_rows(self, query: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Top-k alive row indices and similarities (desc sim, asc ID ties)."""
        if self.num_alive == 0:
            raise ValueError("empty index")
        if k < 1:
            raise ValueError("k must be at least 1")
        q = self._normalize_query(query)
        rows = np.flatnonzero(self.alive)
        sims = self._emb64[rows] @ q
        order = np.lexsort((self.ids[rows], -sims))[: min(k, len(rows))]
        return rows[order], sims[order]

    def top_k(self, query: np.ndarray, k: int) -> list[tuple[int, float]]:
        """The min(k, alive) most similar items as (id, similarity) pairs."""
        rows, sims = self._ranked_alive_rows(query, k)
        return [(int(i), float(s)) for i, s in zip(self.ids[rows], sims)]

    def dedup_sample(
        self, query: np.ndarray, num_retrieved: int, candidate_factor: int, rng: Rng
    ) -> set[int]:
        """Uniform sample of ``num_retrieved`` IDs from a widened top list.

        Candidates are the top ``candidate_factor * num_retrieved`` alive
        items; sampling without replacement from that list keeps the
        retrieved set from collapsing onto near-duplicates of the query.
        With ``candidate_factor == 1`` the result is exactly the top list.
        """
        if num_retrieved < 1 or candidate_factor < 1:
            raise ValueError("num_retrieved and candidate_factor must be at least 1")
        rows, _ = self._ranked_alive_rows(query, candidate_factor * num_retrieved)
        take = min(num_retrieved, len(rows))
        picks = rng.choice_without_replacement(len(rows), take)
        return {int(self.ids[rows[p]]) for p in picks}

    def precompute_neighbors(
        self,
        queries: np.ndarray,
        query_ids: np.ndarray,
        num_retrieved: int,
        candidate_factor: int,
    ) -> "NeighborTable":
        """Freeze per-query candidate lists of length r*n (desc sim, asc ID)."""
        if num_retrieved < 1 or candidate_factor < 1:
            raise ValueError("num_retrieved and candidate_factor must be at least 1")
        if self.num_alive == 0:
            raise ValueError("empty index")
        queries = np.asarray(queries, dtype=np.float64)
        if queries.ndim != 2 or queries.shape[1] != self.dim:
            raise ValueError("query dimension mismatch")
        if len(query_ids) != len(queries):
            raise ValueError("query_ids must have one entry per query")

        per_query = candidate_factor * num_retrieved
        q = l2_normalize(queries)
        rows = np.flatnonzero(self.alive)
        ids_alive = self.ids[rows]
        sims = q @ self._emb64[rows].T  # (num_queries, num_alive)
        m = min(per_query, len(rows))
        table: dict[int, np.ndarray] = {}
        for qi in range(len(queries)):
            row_sims = sims[qi]
            if m < len(rows):
                part = np.argpartition(-row_sims, m - 1)[:m]
                # Pull in every item tied with the boundary similarity so
                # the ID tie-break below sees the full equal-sim group.
                cand = np.flatnonzero(row_sims >= row_sims[part].min())
            else:
                cand = np.arange(len(rows))
            order = np.lexsort((ids_alive[cand], -row_sims[cand]))[:m]
            neighbor_ids = ids_alive[cand[order]].copy()
            neighbor_ids.setflags(write=False)
            table[int(query_ids[qi])] = neighbor_ids
        return NeighborTable(table)

    def remove(self, ids) -> int:
        """Soft-delete items; unknown or already-dead IDs count as zero."""
        removed = 0
        for i in ids:
            row = self._row_of.get(int(i))
            if row is not None and self.alive[row]:
                self.alive[row] = False
                removed += 1
        return removed

    def knn_classify(self, labels: dict[int, int], query: np.ndarray, k: int) -> int:
        """Majority vote over the labels of the k nearest alive items.

        Ties are broken toward the smallest class id.  Every voting
        neighbor must have a label.
        """
        rows, _ = self._ranked_alive_rows(query, k)
        votes = []
        for i in self.ids[rows]:
            label = labels.get(int(i))
            if label is None:
                raise ValueError(f"missing label for id {int(i)}")
            votes.append(label)
        counts = np.bincount(np.asarray(votes, dtype=np.int64))
        return int(np.argmax(counts))

    def save(self, path: str) -> None:
        """Serialize alive rows; dead rows are dropped permanently."""
        keep = self.alive
        io.write_array_container(
            path, self.embeddings[keep], self.ids[keep], self.tags[keep], None
        )


def load_index(path: str) -> EmbeddingIndex:
    samples, ids, tags, _ = io.read_array_container(path)
    return EmbeddingIndex(samples, ids, tags)


class NeighborTable:
    """Frozen map from target ID to its ranked pool-neighbor IDs."""

    def __init__(self, table: dict[int, np.ndarray]):
        self._table = dict(table)

    def __len__(self) -> int:
        return len(self._table)

    def __contains__(self, target_id: int) -> bool:
        return int(target_id) in self._table

    def ids(self):
        return self._table.keys()

    def neighbors(self, target_id: int) -> np.ndarray:
        try:
            return self._table[int(target_id)]
        except KeyError:
            raise ValueError(f"unknown target id {int(target_id)}") from None


def random_neighbor_table(
    pool_ids: np.ndarray, query_ids: np.ndarray, per_query: int, rng: Rng
) -> NeighborTable:
    """Retriever ablation: neighbor lists drawn uniformly from the pool.

    Each query gets ``per_query`` distinct pool IDs (fewer only if the
    pool itself is smaller), from a stream split per query ID so tables
    are reproducible regardless of query order.
    """
    pool_ids = np.asarray(pool_ids, dtype=np.uint64)
    take = min(per_query, len(pool_ids))
    table: dict[int, np.ndarray] = {}
    for qid in np.asarray(query_ids, dtype=np.uint64):
        picks = rng.split(int(qid)).choice_without_replacement(len(pool_ids), take)
        neighbor_ids = pool_ids[picks].copy()
        neighbor_ids.setflags(write=False)
        table[int(qid)] = neighbor_ids
    return NeighborTable(table)


def build_index(
    embeddings: np.ndarray,
    ids: np.ndarray,
    tags: np.ndarray | None = None,
    dedup_threshold: float = DEFAULT_DEDUP_THRESHOLD,
) -> tuple[EmbeddingIndex, list[int]]:
    """Normalize, deduplicate, and index a pool of embeddings.

    Deduplication is a greedy scan in ascending-ID order: an item is
    dropped iff some already-kept lower-ID item has cosine similarity
    >= ``dedup_threshold`` with it (decided in double precision).
    Returns the index and the list of dropped IDs.
    """
    embeddings = np.asarray(embeddings, dtype=np.float32)
    if embeddings.ndim != 2:
        raise ValueError("embeddings must be a 2-d array")
    ids = np.asarray(ids, dtype=np.uint64)
    if len(ids) != len(embeddings):
        raise ValueError("ids must have one entry per row")
    if len(np.unique(ids)) != len(ids):
        raise ValueError("duplicate ids")
    if tags is None:
        tags = np.zeros(len(ids), dtype=np.uint16)
    tags = np.asarray(tags, dtype=np.uint16)

    order = np.argsort(ids, kind="stable")
    if len(embeddings):
        emb = l2_normalize(embeddings[order].astype(np.float64)).astype(np.float32)
    else:
        emb = embeddings
    sorted_ids = ids[order]
    sorted_tags = tags[order]

    keep_mask = _greedy_dedup_mask(emb, dedup_threshold)
    dropped = [int(i) for i in sorted_ids[~keep_mask]]
    index = EmbeddingIndex(emb[keep_mask], sorted_ids[keep_mask], sorted_tags[keep_mask])
    return index, dropped


def _greedy_dedup_mask(emb: np.ndarray, threshold: float) -> np.ndarray:
    """Keep mask for the greedy ascending-order near-duplicate scan.

    Bulk similarities are computed in float32 blocks; any pair landing
    within a small band of the threshold is re-decided in float64, so
    the result is identical to a full double-precision scan.
    """
    n = len(emb)
    keep = np.ones(n, dtype=bool)
    if n == 0 or threshold > 1.0:
        return keep
    emb64 = emb.astype(np.float64)
    band = max(1e-4, 32 * emb.shape[1] * float(np.finfo(np.float32).eps))
    block = 2048
    kept_rows: list[int] = [0]
    for start in range(1, n, block):
        stop = min(start + block, n)
        chunk = emb[start:stop]
        prev = np.asarray(kept_rows)
        prev_max = (
            np.max(chunk @ emb[prev].T, axis=1)
            if len(prev)
            else np.full(stop - start, -np.inf)
        )
        local = chunk @ chunk.T
        local_kept: list[int] = []
        for i in range(stop - start):
            cand = float(prev_max[i])
            if local_kept:
                cand = max(cand, float(np.max(local[i, local_kept])))
            if cand >= threshold - band:
                # Near the decision boundary: redo this row exactly.
                rows_so_far = np.concatenate([prev, start + np.asarray(local_kept)]) if local_kept else prev
                exact = emb64[rows_so_far] @ emb64[start + i]
                drop = bool(np.any(exact >= threshold))
            else:
                drop = False
            if drop:
                keep[start + i] = False
            else:
                local_kept.append(i)
        kept_rows.extend(start + i for i in local_kept)
    return keep
