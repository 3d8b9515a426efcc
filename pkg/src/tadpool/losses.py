"""Adaptation objectives: contrastive term, consistency term, pseudo-labels.

The contrastive term pulls two augmented views of a target sample
together while pushing away a per-query negative set assembled from the
feature bank: resident target snapshots whose stored-logit argmax
disagrees with the query's label, plus pool snapshots sampled from the
query's frozen retrieval candidates.  The consistency term is plain
cross-entropy of the weakly-augmented view against the (refined)
pseudo-label.  All loss math runs in float64 regardless of input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from tadpool.bank import MemoryBank, Origin
from tadpool.index import NeighborTable
from tadpool.numerics import Rng, log_softmax, log_sum_exp, softmax

# Provenance flags inside a NegativeSet.
LABEL_FILTERED = 0
RETRIEVED = 1

# Unit-norm guard for contrastive inputs; loose enough for float32
# rounding, tight enough to catch an unnormalized feature.
_UNIT_TOL = 1e-4


class Mode(Enum):
    """Which label feeds the objective: ground truth or pseudo-label."""

    TRAIN_TIME = "train_time"
    TEST_TIME = "test_time"


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.07
    num_retrieved: int = 2
    candidate_factor: int = 5
    contrastive_weight: float = 1.0
    include_positive: bool = True
    mode: Mode = Mode.TEST_TIME

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.num_retrieved < 0:
            raise ValueError("num_retrieved must be non-negative")
        if self.candidate_factor < 1:
            raise ValueError("candidate_factor must be at least 1")
        if self.contrastive_weight < 0:
            raise ValueError("contrastive_weight must be non-negative")


@dataclass
class NegativeSet:
    """Per-query negatives: bank feature rows plus provenance.

    ``sampled_pool_ids`` records the full retrieval draw for this step —
    including IDs not yet resident in the bank — so the training loop
    can enqueue exactly the neighbors it sampled.
    """

    ids: np.ndarray
    features: np.ndarray
    provenance: np.ndarray
    sampled_pool_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def empty_negative_set(feature_dim: int) -> NegativeSet:
    return NegativeSet(
        ids=np.zeros(0, dtype=np.uint64),
        features=np.zeros((0, feature_dim), dtype=np.float64),
        provenance=np.zeros(0, dtype=np.uint8),
        sampled_pool_ids=np.zeros(0, dtype=np.uint64),
    )


def build_negative_set(
    query_id: int,
    query_label: int,
    bank: MemoryBank,
    neighbor_table: NeighborTable | None,
    config: LossConfig,
    rng: Rng,
) -> NegativeSet:
    """Assemble the query's negatives from the bank.

    The retrieved part samples ``num_retrieved`` IDs uniformly without
    replacement from the query's frozen candidate list (length
    ``candidate_factor * num_retrieved``) and keeps the ones whose pool
    snapshots are resident in the bank.  With ``num_retrieved == 0`` the
    neighbor table is never consulted.  The union is deduplicated by
    sample ID, keeping the most recent snapshot.
    """
    if config.num_retrieved > 0:
        if neighbor_table is None:
            raise ValueError("neighbor table required when num_retrieved > 0")
        candidates = neighbor_table.neighbors(query_id)
        take = min(config.num_retrieved, len(candidates))
        picks = rng.choice_without_replacement(len(candidates), take)
        sampled = np.sort(candidates[picks])
    else:
        sampled = np.zeros(0, dtype=np.uint64)

    rows = bank.negative_candidate_rows(query_id, query_label, sampled)
    if len(rows) == 0:
        out = empty_negative_set(bank.feature_dim or 0)
        out.sampled_pool_ids = sampled
        return out

    # Deduplicate by sample ID, keeping the most recent snapshot: rows
    # arrive in ascending insertion order, so the last occurrence wins.
    ids = bank.id_rows(rows)
    _, first_in_reversed = np.unique(ids[::-1], return_index=True)
    kept = rows[len(rows) - 1 - first_in_reversed]
    kept = kept[np.argsort(bank.counter_rows(kept), kind="stable")]
    provenance = np.where(
        bank.origin_rows(kept) == Origin.POOL.value, RETRIEVED, LABEL_FILTERED
    ).astype(np.uint8)
    return NegativeSet(
        ids=bank.id_rows(kept),
        features=bank.feature_rows(kept),
        provenance=provenance,
        sampled_pool_ids=sampled,
    )


def _check_unit(name: str, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norms = np.sqrt(np.sum(v * v, axis=-1))
    if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
        raise ValueError(f"{name} must be unit-norm")
    return v


def info_nce(
    query_feat: np.ndarray,
    key_feat: np.ndarray,
    negatives: NegativeSet | np.ndarray,
    temperature: float,
    include_positive: bool = True,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Contrastive loss and its exact gradients.

    loss = -s_pos + log Z with s = (dot / temperature); Z sums the
    negatives' scores, plus the positive's own score when
    ``include_positive`` (the default — it bounds the loss below by 0).
    In literal mode an empty negative set leaves the denominator
    undefined and raises.  Returns (loss, d/d_query, d/d_key,
    d/d_negatives); negatives are typically bank constants, so their
    gradient is informational.
    """
    q = _check_unit("query feature", query_feat)
    k = _check_unit("key feature", key_feat)
    neg = negatives.features if isinstance(negatives, NegativeSet) else np.asarray(negatives)
    neg = neg.astype(np.float64)
    if len(neg):
        _check_unit("negative features", neg)

    s_pos = float(q @ k) / temperature
    s_neg = (neg @ q) / temperature if len(neg) else np.zeros(0)

    if include_positive:
        log_z = log_sum_exp(np.concatenate([[s_pos], s_neg]))
        p_pos = float(np.exp(s_pos - log_z))
        coef_pos = p_pos - 1.0
    else:
        if len(neg) == 0:
            raise ValueError("empty negative set: literal denominator undefined")
        log_z = log_sum_exp(s_neg)
        coef_pos = -1.0
    loss = float(log_z - s_pos)
    p_neg = np.exp(s_neg - log_z) if len(neg) else np.zeros(0)

    grad_query = (coef_pos * k + (p_neg @ neg if len(neg) else 0.0)) / temperature
    grad_key = coef_pos * q / temperature
    grad_negatives = p_neg[:, None] * q[None, :] / temperature if len(neg) else np.zeros_like(neg)
    return loss, grad_query, grad_key, grad_negatives


def filtered_pseudo_label(
    bank: MemoryBank, sample_id: int, current_logits: np.ndarray
) -> tuple[int, np.ndarray]:
    """Refined pseudo-label: argmax of bank-averaged logits.

    Ties resolve to the smallest class index.  Returns the label and the
    averaged logits it was read from.
    """
    averaged = bank.aggregate_logits(sample_id, current_logits)
    return int(np.argmax(averaged)), averaged


def ce_consistency(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of ``logits`` against a hard label, with gradient.

    grad = softmax(logits) - onehot(label), computed in float64.
    """
    v = np.asarray(logits, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("logits must be a vector")
    if not 0 <= int(label) < len(v):
        raise ValueError("label out of range")
    logp = log_softmax(v)
    grad = softmax(v)
    grad[int(label)] -= 1.0
    return float(-logp[int(label)]), grad


def total_loss(ce_loss: float, contrastive_loss: float, contrastive_weight: float) -> float:
    return float(ce_loss + contrastive_weight * contrastive_loss)
