"""Adaptation loop and experiment drivers.

One adaptation step processes a batch of target samples: build a weak and a
strong view of every sample, forward both through the current model, pick a
label per sample (the bank-averaged pseudo-label of the strong view, or the
ground-truth label in train-time mode), assemble per-sample negative sets
from the memory bank, and take one SGD step on

    cross_entropy(weak logits, label) + weight * info_nce(q, k, negatives)

where ``q`` is the weak-view feature and ``k`` the strong-view feature.  The
key, the negatives, and the label are constants: gradients flow through the
weak branch only (the key encoder shares weights because its momentum
coefficient is zero, but it receives no gradient).  After the update the
bank receives the batch's strong-view target entries (feature + logits) and
the strong-augmented features of the pool neighbors sampled this step, all
encoded with the pre-update parameters.

Every stochastic choice is derived from ``augment_seed`` through streams
keyed by purpose and, where applicable, (sample id, step) — so trajectories
replay bit-exactly and per-sample noise is independent of batch composition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .bank import BankEntry, MemoryBank, Origin, init_bank
from .data import (
    Dataset,
    ShiftSpec,
    embed_for_retrieval,
    make_shifted_task,
    stratified_subsample,
    strong_batch,
    strong_view,
    weak_batch,
)
from .index import EmbeddingIndex, NeighborTable, build_index, random_neighbor_table
from .losses import (
    RETRIEVED,
    LossConfig,
    Mode,
    build_negative_set,
    ce_consistency,
    filtered_pseudo_label,
    info_nce,
)
from .model import LrSchedule, ModelParams, backward, forward, init_params, sgd_step
from .numerics import Rng

# rng channels under the augment seed
_CH_BANK_PICK = 20
_CH_BANK_VIEW = 21
_CH_ORDER = 22
_CH_NEGATIVES = 23
# rng channels under the data seed (infrastructure, not augmentation)
_CH_SUBSET = 30
_CH_RANDOM_TABLE = 31

RETRIEVER_EMBEDDING = "embedding"
RETRIEVER_RANDOM = "random"


@dataclass(frozen=True)
class ModelSpec:
    """Encoder/head architecture (widths only; depth follows the tuple)."""

    hidden_dims: tuple[int, ...] = (64,)
    feature_dim: int = 16

    def __post_init__(self):
        if any(h < 1 for h in self.hidden_dims) or self.feature_dim < 1:
            raise ValueError("layer widths must be positive")


@dataclass(frozen=True)
class TaskSpec:
    """Synthetic task parameters; defaults are the reference benchmark."""

    num_classes: int = 6
    dim: int = 32
    n_source: int = 2400
    n_target: int = 1200
    n_pool: int = 50_000
    rotation: float = 0.35
    translation: tuple[float, ...] = (1.0, -0.5)
    num_planes: int = 2
    pool_target_mix: float = 0.2
    num_distractors: int = 3
    separation: float = 4.0
    scale: float = 1.0

    def realize(self, seed: int) -> tuple[Dataset, Dataset, Dataset]:
        return make_shifted_task(
            num_classes=self.num_classes,
            dim=self.dim,
            n_source=self.n_source,
            n_target=self.n_target,
            n_pool=self.n_pool,
            shift=ShiftSpec(
                rotation=self.rotation,
                translation=self.translation,
                num_planes=self.num_planes,
            ),
            pool_target_mix=self.pool_target_mix,
            num_distractors=self.num_distractors,
            separation=self.separation,
            scale=self.scale,
            seed=seed,
        )


@dataclass(frozen=True)
class AdaptationConfig:
    """Everything one adaptation run depends on besides the data itself."""

    loss: LossConfig = field(default_factory=LossConfig)
    epochs: int = 30
    batch_size: int = 64
    bank_capacity: int = 2048
    base_lr: float = 0.1
    start_lr: float = 1e-5
    min_lr: float = 1e-6
    warmup_epochs: int = 4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    target_fraction: float = 1.0
    retriever: str = RETRIEVER_EMBEDDING
    data_seed: int = 0
    init_seed: int = 0
    augment_seed: int = 0
    augment_scale: float = 1.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.bank_capacity < 1:
            raise ValueError("bank_capacity must be at least 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be non-negative")
        if not 0.0 < self.target_fraction <= 1.0:
            raise ValueError("target_fraction must lie in (0, 1]")
        if self.retriever not in (RETRIEVER_EMBEDDING, RETRIEVER_RANDOM):
            raise ValueError(f"unknown retriever {self.retriever!r}")
        if min(self.base_lr, self.start_lr, self.min_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.augment_scale < 0:
            raise ValueError("augment_scale must be non-negative")


@dataclass
class EpochMetrics:
    """One row of run metrics; epoch 0 is the pre-adaptation evaluation."""

    epoch: int
    top1: float | None
    mean_ce: float
    mean_contrastive: float
    pseudo_label_accuracy: float | None
    bank_occupancy: int
    mean_retrieved: float
    steps: int

    def as_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "top1": self.top1,
            "mean_ce": self.mean_ce,
            "mean_contrastive": self.mean_contrastive,
            "pseudo_label_accuracy": self.pseudo_label_accuracy,
            "bank_occupancy": self.bank_occupancy,
            "mean_retrieved": self.mean_retrieved,
            "steps": self.steps,
        }


@dataclass
class AdaptationResult:
    params: ModelParams
    metrics: list[EpochMetrics]

    @property
    def final_top1(self) -> float | None:
        return self.metrics[-1].top1

    @property
    def source_top1(self) -> float | None:
        return self.metrics[0].top1


def evaluate(params: ModelParams, dataset: Dataset) -> float:
    """Top-1 accuracy of argmax logits on raw (un-augmented) samples."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.labels is None:
        raise ValueError("evaluation requires labels")
    _, logits, _ = forward(params, dataset.samples)
    predictions = np.argmax(logits, axis=1)
    return float(np.mean(predictions == dataset.labels))


def _init_bank(
    params: ModelParams, target: Dataset, config: AdaptationConfig, root: Rng
) -> MemoryBank:
    """Seed the bank with strong views of randomly picked target samples."""
    n = len(target)
    take = min(config.bank_capacity, n)
    rows = np.sort(root.split(_CH_BANK_PICK).choice_without_replacement(n, take))
    view_rng = root.split(_CH_BANK_VIEW)
    views = strong_batch(
        target.samples[rows], target.ids[rows], 0, view_rng, config.augment_scale
    )
    features, logits, _ = forward(params, views, normalize_features=True)
    entries = [
        BankEntry(int(target.ids[r]), Origin.TARGET, features[i].copy(), logits[i].copy())
        for i, r in enumerate(rows)
    ]
    return init_bank(config.bank_capacity, entries)


def adapt(
    config: AdaptationConfig,
    params: ModelParams,
    target: Dataset,
    pool_data: Dataset | None,
    neighbor_table: NeighborTable | None,
    eval_data: Dataset | None = None,
) -> AdaptationResult:
    """Run the full adaptation loop; never mutates the passed-in params.

    ``target`` is the adaptation set (labels, when present, feed metrics
    only in test-time mode); ``eval_data`` is the labeled set scored once
    per epoch and defaults to ``target`` itself when that carries labels.
    ``pool_data`` supplies raw rows for pool-neighbor bank updates and may
    be omitted when retrieval is off.
    """
    loss_cfg = config.loss
    contrastive_on = loss_cfg.contrastive_weight > 0.0
    retrieval_on = contrastive_on and loss_cfg.num_retrieved > 0
    if len(target) == 0:
        raise ValueError("empty dataset")
    if loss_cfg.mode is Mode.TRAIN_TIME and target.labels is None:
        raise ValueError("train-time adaptation requires labels")
    if retrieval_on and neighbor_table is None:
        raise ValueError("neighbor table required when num_retrieved > 0")
    if retrieval_on and pool_data is None:
        raise ValueError("pool dataset required when retrieval is enabled")
    if eval_data is None and target.labels is not None:
        eval_data = target

    params = params.copy()
    n = len(target)
    steps_per_epoch = math.ceil(n / config.batch_size)
    root = Rng(config.augment_seed)
    bank = _init_bank(params, target, config, root)

    def epoch_row(epoch: int, **stats) -> EpochMetrics:
        return EpochMetrics(
            epoch=epoch,
            top1=evaluate(params, eval_data) if eval_data is not None else None,
            mean_ce=stats.get("mean_ce", 0.0),
            mean_contrastive=stats.get("mean_contrastive", 0.0),
            pseudo_label_accuracy=stats.get("pseudo_label_accuracy"),
            bank_occupancy=bank.occupancy,
            mean_retrieved=stats.get("mean_retrieved", 0.0),
            steps=stats.get("steps", 0),
        )

    metrics = [epoch_row(0)]
    if config.epochs == 0:
        return AdaptationResult(params, metrics)

    total_steps = config.epochs * steps_per_epoch
    schedule = LrSchedule(
        start_lr=config.start_lr,
        base_lr=config.base_lr,
        min_lr=config.min_lr,
        warmup_steps=min(config.warmup_epochs * steps_per_epoch, total_steps - 1),
        total_steps=total_steps,
    )
    pool_row_of = (
        {int(i): r for r, i in enumerate(pool_data.ids)} if pool_data is not None else {}
    )
    scale = config.augment_scale
    num_classes = params.num_classes
    feature_dim = params.feature_dim
    global_step = 0

    for epoch in range(1, config.epochs + 1):
        order = root.split(_CH_ORDER, epoch).permutation(n)
        ce_total = 0.0
        ctr_total = 0.0
        retrieved_total = 0
        pseudo_hits = 0
        samples_seen = 0

        for start in range(0, n, config.batch_size):
            rows = order[start : start + config.batch_size]
            batch = len(rows)
            ids = target.ids[rows]
            x = target.samples[rows]
            weak = weak_batch(x, ids, global_step, root, scale)
            strong = strong_batch(x, ids, global_step, root, scale)
            try:
                q_feat, weak_logits, weak_cache = forward(
                    params, weak, normalize_features=True
                )
                k_feat, strong_logits, _ = forward(params, strong, normalize_features=True)
            except ValueError as err:
                raise ValueError(f"{err} at step {global_step}") from None

            grad_feature = np.zeros((batch, feature_dim))
            grad_logits = np.zeros((batch, num_classes))
            labels = np.empty(batch, dtype=np.int64)
            sampled_pool: set[int] = set()

            for i in range(batch):
                sample_id = int(ids[i])
                if loss_cfg.mode is Mode.TRAIN_TIME:
                    label = int(target.labels[rows[i]])
                else:
                    label, _ = filtered_pseudo_label(bank, sample_id, strong_logits[i])
                labels[i] = label

                if contrastive_on:
                    negatives = build_negative_set(
                        sample_id,
                        label,
                        bank,
                        neighbor_table,
                        loss_cfg,
                        root.split(_CH_NEGATIVES, global_step, sample_id),
                    )
                    ctr, grad_q, _, _ = info_nce(
                        q_feat[i],
                        k_feat[i],
                        negatives.features,
                        loss_cfg.temperature,
                        include_positive=loss_cfg.include_positive,
                    )
                    grad_feature[i] = (loss_cfg.contrastive_weight / batch) * grad_q
                    ctr_total += ctr
                    retrieved_total += int(np.sum(negatives.provenance == RETRIEVED))
                    sampled_pool.update(int(p) for p in negatives.sampled_pool_ids)

                ce, grad_ce = ce_consistency(weak_logits[i], label)
                grad_logits[i] = grad_ce / batch
                ce_total += ce

            if target.labels is not None:
                pseudo_hits += int(np.sum(labels == target.labels[rows]))
            samples_seen += batch

            grads = backward(params, weak_cache, grad_feature, grad_logits)

            pool_entries: list[BankEntry] = []
            pool_ids = sorted(p for p in sampled_pool if p in pool_row_of)
            if pool_ids:
                pool_views = np.stack(
                    [
                        strong_view(
                            pool_data.samples[pool_row_of[p]], p, global_step, root, scale
                        )
                        for p in pool_ids
                    ]
                )
                pool_feat, _, _ = forward(params, pool_views, normalize_features=True)
                pool_entries = [
                    BankEntry(p, Origin.POOL, pool_feat[i].copy())
                    for i, p in enumerate(pool_ids)
                ]

            sgd_step(
                params,
                grads,
                schedule.lr_at(global_step),
                momentum=config.momentum,
                weight_decay=config.weight_decay,
            )

            target_entries = [
                BankEntry(int(ids[i]), Origin.TARGET, k_feat[i].copy(), strong_logits[i].copy())
                for i in range(batch)
            ]
            bank.enqueue(target_entries + pool_entries)
            global_step += 1

        metrics.append(
            epoch_row(
                epoch,
                mean_ce=ce_total / samples_seen,
                mean_contrastive=ctr_total / samples_seen,
                pseudo_label_accuracy=(
                    pseudo_hits / samples_seen if target.labels is not None else None
                ),
                mean_retrieved=retrieved_total / samples_seen,
                steps=steps_per_epoch,
            )
        )

    return AdaptationResult(params, metrics)


def train_source_model(
    source: Dataset,
    num_classes: int,
    model: ModelSpec,
    config: AdaptationConfig,
    epochs: int = 15,
    lr: float = 0.1,
) -> tuple[ModelParams, list[EpochMetrics]]:
    """Supervised training on the labeled source split (no retrieval).

    The provider model is always fit with plain supervised cross-entropy at
    its own learning rate (clean labels tolerate a much hotter schedule than
    self-training does), so the adaptation recipe in ``config`` does not
    leak into how the starting checkpoint is built.
    """
    params = init_params(
        source.dim, list(model.hidden_dims), model.feature_dim, num_classes, Rng(config.init_seed)
    )
    source_cfg = replace(
        config,
        loss=replace(config.loss, mode=Mode.TRAIN_TIME, contrastive_weight=0.0, num_retrieved=0),
        epochs=epochs,
        base_lr=lr,
        target_fraction=1.0,
    )
    result = adapt(source_cfg, params, source, None, None, eval_data=source)
    return result.params, result.metrics


@dataclass
class PreparedRun:
    """Per-seed shared state: data, source model, and retrieval structures."""

    source: Dataset
    target: Dataset
    pool: Dataset
    index: EmbeddingIndex
    dropped_ids: list[int]
    target_queries: np.ndarray
    source_params: ModelParams
    source_metrics: list[EpochMetrics]


def prepare_run(
    task: TaskSpec,
    model: ModelSpec,
    config: AdaptationConfig,
    source_epochs: int = 15,
    source_lr: float = 0.1,
) -> PreparedRun:
    source, target, pool = task.realize(config.data_seed)
    source_params, source_metrics = train_source_model(
        source, task.num_classes, model, config, epochs=source_epochs, lr=source_lr
    )
    index, dropped = build_index(embed_for_retrieval(pool.samples), pool.ids, pool.tags)
    return PreparedRun(
        source=source,
        target=target,
        pool=pool,
        index=index,
        dropped_ids=dropped,
        target_queries=embed_for_retrieval(target.samples),
        source_params=source_params,
        source_metrics=source_metrics,
    )


def build_neighbor_table(prep: PreparedRun, config: AdaptationConfig) -> NeighborTable | None:
    """Frozen per-query candidate lists for the configured retriever."""
    n_r = config.loss.num_retrieved
    if n_r == 0 or config.loss.contrastive_weight == 0.0:
        return None
    per_query = config.loss.candidate_factor * n_r
    if config.retriever == RETRIEVER_RANDOM:
        return random_neighbor_table(
            prep.index.alive_ids(),
            prep.target.ids,
            per_query,
            Rng(config.data_seed).split(_CH_RANDOM_TABLE),
        )
    return prep.index.precompute_neighbors(
        prep.target_queries, prep.target.ids, n_r, config.loss.candidate_factor
    )


def adaptation_subset(target: Dataset, fraction: float, data_seed: int) -> Dataset:
    """The adaptation split for a fraction: stratified, keyed by the fraction.

    Every driver funnels through this so runs that should see the same
    samples (e.g. a sweep arm and its cross-check) do so bit-exactly.
    """
    key = int(round(fraction * 10**6))
    return stratified_subsample(target, fraction, Rng(data_seed).split(_CH_SUBSET, key))


def run_adaptation(
    prep: PreparedRun, config: AdaptationConfig
) -> AdaptationResult:
    """One full run from shared prep: subsample, build table, adapt."""
    subset = adaptation_subset(prep.target, config.target_fraction, config.data_seed)
    table = build_neighbor_table(prep, config)
    return adapt(
        config, prep.source_params, subset, prep.pool, table, eval_data=prep.target
    )


def run_fraction_sweep(
    prep: PreparedRun, config: AdaptationConfig, fractions: list[float]
) -> list[dict]:
    """Retrieval vs no-retrieval accuracy at each target fraction."""
    rows = []
    for fraction in fractions:
        for variant, n_r in (("retrieval", config.loss.num_retrieved), ("no_retrieval", 0)):
            arm = replace(
                config, target_fraction=fraction, loss=replace(config.loss, num_retrieved=n_r)
            )
            result = run_adaptation(prep, arm)
            rows.append(
                {
                    "fraction": fraction,
                    "variant": variant,
                    "num_retrieved": n_r,
                    "source_top1": result.source_top1,
                    "final_top1": result.final_top1,
                }
            )
    return rows


def run_nn_sweep(
    prep: PreparedRun, config: AdaptationConfig, nr_values: list[int]
) -> list[dict]:
    """Accuracy per retrieved-neighbor count; 0 disables retrieval."""
    rows = []
    for n_r in nr_values:
        arm = replace(config, loss=replace(config.loss, num_retrieved=n_r))
        result = run_adaptation(prep, arm)
        rows.append(
            {
                "num_retrieved": n_r,
                "source_top1": result.source_top1,
                "final_top1": result.final_top1,
            }
        )
    return rows


def run_retriever_ablation(prep: PreparedRun, config: AdaptationConfig) -> list[dict]:
    """Embedding retriever vs uniform-random neighbor lists."""
    rows = []
    for retriever in (RETRIEVER_EMBEDDING, RETRIEVER_RANDOM):
        arm = replace(config, retriever=retriever)
        result = run_adaptation(prep, arm)
        rows.append(
            {
                "retriever": retriever,
                "source_top1": result.source_top1,
                "final_top1": result.final_top1,
            }
        )
    return rows


def run_pool_ablations(
    prep: PreparedRun,
    config: AdaptationConfig,
    variants: list[tuple[str, set[int] | None]],
) -> list[dict]:
    """Re-run adaptation on tag-filtered rebuilds of the pool index.

    Each variant is (name, kept-tags); ``None`` keeps the full pool.  The
    first row is always the full pool, and deltas are reported against it.
    """
    def run_with_pool(pool: Dataset) -> float:
        if len(pool) == 0:
            raise ValueError("empty pool after tag filter")
        index, _ = build_index(embed_for_retrieval(pool.samples), pool.ids, pool.tags)
        filtered = PreparedRun(
            source=prep.source,
            target=prep.target,
            pool=pool,
            index=index,
            dropped_ids=[],
            target_queries=prep.target_queries,
            source_params=prep.source_params,
            source_metrics=prep.source_metrics,
        )
        result = run_adaptation(filtered, config)
        assert result.final_top1 is not None
        return result.final_top1

    full_top1 = run_with_pool(prep.pool)
    rows = [
        {
            "variant": "full_pool",
            "kept_rows": len(prep.pool),
            "final_top1": full_top1,
            "delta_vs_full": 0.0,
        }
    ]
    for name, kept_tags in variants:
        if kept_tags is None:
            pool = prep.pool
        else:
            keep = np.isin(prep.pool.tags, sorted(kept_tags))
            pool = prep.pool.subset(np.flatnonzero(keep))
        top1 = run_with_pool(pool)
        rows.append(
            {
                "variant": name,
                "kept_rows": len(pool),
                "final_top1": top1,
                "delta_vs_full": top1 - full_top1,
            }
        )
    return rows


def run_domain_gap_sweep(
    task: TaskSpec,
    model: ModelSpec,
    config: AdaptationConfig,
    mix_fractions: list[float],
    source_epochs: int = 15,
) -> tuple[list[dict], float]:
    """Accuracy as the pool's target-domain share varies; reports Spearman rho.

    The source and target splits are bit-identical across mixes (their noise
    streams are independent of the pool's), so the source model is trained
    once and each mix only rebuilds the pool, its index, and the table.
    """
    base_prep: PreparedRun | None = None
    rows = []
    for mix in mix_fractions:
        mixed_task = replace(task, pool_target_mix=mix)
        if base_prep is None:
            base_prep = prepare_run(mixed_task, model, config, source_epochs=source_epochs)
            prep = base_prep
        else:
            _, _, pool = mixed_task.realize(config.data_seed)
            index, dropped = build_index(
                embed_for_retrieval(pool.samples), pool.ids, pool.tags
            )
            prep = PreparedRun(
                source=base_prep.source,
                target=base_prep.target,
                pool=pool,
                index=index,
                dropped_ids=dropped,
                target_queries=base_prep.target_queries,
                source_params=base_prep.source_params,
                source_metrics=base_prep.source_metrics,
            )
        result = run_adaptation(prep, config)
        rows.append(
            {
                "pool_target_mix": mix,
                "source_top1": result.source_top1,
                "final_top1": result.final_top1,
            }
        )
    accs = [row["final_top1"] for row in rows]
    if len(accs) < 2 or len(set(accs)) == 1:
        rho = 0.0
    else:
        rho = float(stats.spearmanr(mix_fractions, accs).statistic)
    return rows, rho
