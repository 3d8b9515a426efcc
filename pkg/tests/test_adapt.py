"""Adaptation-loop contracts: determinism, label hygiene, sweeps, metrics."""

import math
from dataclasses import replace

import numpy as np
import pytest

from tadpool.adapt import (
    AdaptationConfig,
    ModelSpec,
    TaskSpec,
    adapt,
    adaptation_subset,
    build_neighbor_table,
    evaluate,
    prepare_run,
    run_adaptation,
    run_domain_gap_sweep,
    run_fraction_sweep,
    run_nn_sweep,
    run_pool_ablations,
    run_retriever_ablation,
)
from tadpool.data import Dataset
from tadpool.index import NeighborTable
from tadpool.losses import LossConfig, Mode
from tadpool.model import init_params
from tadpool.numerics import Rng

# one small task shared by every test in the module; two epochs of it run
# in well under a second, so each test can afford a full adaptation
TINY_TASK = TaskSpec(
    num_classes=3,
    dim=8,
    n_source=90,
    n_target=48,
    n_pool=240,
    num_planes=2,
    pool_target_mix=0.5,
    num_distractors=2,
)
TINY_MODEL = ModelSpec(hidden_dims=(10,), feature_dim=6)
TINY_CONFIG = AdaptationConfig(
    loss=LossConfig(num_retrieved=2),
    epochs=2,
    batch_size=16,
    bank_capacity=64,
    base_lr=0.01,
    warmup_epochs=1,
    data_seed=7,
    init_seed=7,
    augment_seed=7,
)


@pytest.fixture(scope="module")
def prep():
    return prepare_run(TINY_TASK, TINY_MODEL, TINY_CONFIG, source_epochs=4)


def flatten_params(params) -> list[np.ndarray]:
    arrays = [a for layer in params.encoder for a in layer]
    arrays += list(params.head)
    arrays += [a for layer in params.encoder_velocity for a in layer]
    arrays += list(params.head_velocity)
    return arrays


def assert_params_equal(a, b):
    for x, y in zip(flatten_params(a), flatten_params(b)):
        np.testing.assert_array_equal(x, y)


class TrapTable(NeighborTable):
    """Neighbor table that fails the test if anyone asks it anything."""

    def __init__(self):
        super().__init__({})

    def neighbors(self, target_id):
        raise AssertionError("neighbor table consulted with retrieval disabled")


class TestAdaptLoop:
    def test_epochs_zero_returns_params_unchanged(self, prep):
        config = replace(TINY_CONFIG, epochs=0)
        result = adapt(
            config, prep.source_params, prep.target.without_labels(), prep.pool,
            build_neighbor_table(prep, config), eval_data=prep.target,
        )
        assert_params_equal(result.params, prep.source_params)
        assert len(result.metrics) == 1
        assert result.metrics[0].epoch == 0
        assert result.metrics[0].top1 == evaluate(prep.source_params, prep.target)

    def test_epoch_zero_row_is_source_only_baseline(self, prep):
        result = run_adaptation(prep, TINY_CONFIG)
        assert result.source_top1 == evaluate(prep.source_params, prep.target)

    def test_fixed_seeds_replay_bit_identical(self, prep):
        def go():
            return adapt(
                TINY_CONFIG, prep.source_params, prep.target.without_labels(),
                prep.pool, build_neighbor_table(prep, TINY_CONFIG), eval_data=prep.target,
            )

        a, b = go(), go()
        assert_params_equal(a.params, b.params)
        assert [m.as_dict() for m in a.metrics] == [m.as_dict() for m in b.metrics]

    def test_steps_per_epoch_is_batch_ceiling(self, prep):
        result = run_adaptation(prep, TINY_CONFIG)
        expected = math.ceil(len(prep.target) / TINY_CONFIG.batch_size)
        assert all(m.steps == expected for m in result.metrics[1:])

    def test_bank_occupancy_never_exceeds_capacity(self, prep):
        # one step enqueues at most batch * (1 + n_r) = 48 entries, so 50
        # slots force steady-state eviction without tripping the batch guard
        config = replace(TINY_CONFIG, bank_capacity=50, epochs=3)
        result = adapt(
            config, prep.source_params, prep.target.without_labels(), prep.pool,
            build_neighbor_table(prep, config), eval_data=prep.target,
        )
        assert all(m.bank_occupancy <= 50 for m in result.metrics)
        assert result.metrics[-1].bank_occupancy > 40  # it does fill up

    def test_hidden_labels_influence_metrics_only(self, prep):
        """TestTime trajectories are bit-identical under label permutation."""
        target = prep.target
        table = build_neighbor_table(prep, TINY_CONFIG)
        shuffled = Dataset(
            target.samples.copy(), target.ids.copy(), target.tags.copy(),
            np.roll(target.labels, 1),
        )
        honest = adapt(TINY_CONFIG, prep.source_params, target, prep.pool, table)
        scrambled = adapt(TINY_CONFIG, prep.source_params, shuffled, prep.pool, table)
        assert_params_equal(honest.params, scrambled.params)
        # the loss curves agree exactly; only label-derived metrics move
        for a, b in zip(honest.metrics, scrambled.metrics):
            assert a.mean_ce == b.mean_ce
            assert a.mean_contrastive == b.mean_contrastive
        assert honest.metrics[-1].pseudo_label_accuracy != scrambled.metrics[-1].pseudo_label_accuracy

    def test_train_time_mode_does_read_labels(self, prep):
        """Counterpart: with supervision on, permuted labels change the run."""
        config = replace(TINY_CONFIG, loss=replace(TINY_CONFIG.loss, mode=Mode.TRAIN_TIME))
        target = prep.target
        table = build_neighbor_table(prep, config)
        shuffled = Dataset(
            target.samples.copy(), target.ids.copy(), target.tags.copy(),
            np.roll(target.labels, 1),
        )
        honest = adapt(config, prep.source_params, target, prep.pool, table)
        scrambled = adapt(config, prep.source_params, shuffled, prep.pool, table)
        diffs = [
            float(np.abs(x - y).max())
            for x, y in zip(flatten_params(honest.params), flatten_params(scrambled.params))
        ]
        assert max(diffs) > 0.0

    def test_contrastive_weight_zero_ignores_retrieval_knobs(self, prep):
        """lambda = 0 collapses to pseudo-label self-training: n_r is inert."""
        base = replace(TINY_CONFIG, loss=replace(TINY_CONFIG.loss, contrastive_weight=0.0))
        runs = []
        for n_r in (0, 2):
            config = replace(base, loss=replace(base.loss, num_retrieved=n_r))
            runs.append(
                adapt(config, prep.source_params, prep.target.without_labels(),
                      prep.pool, None, eval_data=prep.target)
            )
        assert_params_equal(runs[0].params, runs[1].params)

    def test_neighbor_table_never_consulted_without_retrieval(self, prep):
        config = replace(TINY_CONFIG, loss=replace(TINY_CONFIG.loss, num_retrieved=0))
        result = adapt(
            config, prep.source_params, prep.target.without_labels(), prep.pool,
            TrapTable(), eval_data=prep.target,
        )
        assert result.final_top1 is not None
        assert all(m.mean_retrieved == 0.0 for m in result.metrics)

    def test_unlabeled_target_without_eval_data_has_no_accuracy(self, prep):
        result = adapt(
            TINY_CONFIG, prep.source_params, prep.target.without_labels(), prep.pool,
            build_neighbor_table(prep, TINY_CONFIG),
        )
        assert all(m.top1 is None for m in result.metrics)
        assert all(m.pseudo_label_accuracy is None for m in result.metrics[1:])


class TestAdaptValidation:
    def test_empty_target_rejected(self, prep):
        empty = prep.target.subset(np.array([], dtype=int))
        with pytest.raises(ValueError, match="empty dataset"):
            adapt(TINY_CONFIG, prep.source_params, empty, prep.pool, None)

    def test_train_time_requires_labels(self, prep):
        config = replace(TINY_CONFIG, loss=replace(TINY_CONFIG.loss, mode=Mode.TRAIN_TIME))
        with pytest.raises(ValueError, match="requires labels"):
            adapt(config, prep.source_params, prep.target.without_labels(), prep.pool,
                  build_neighbor_table(prep, config))

    def test_retrieval_requires_neighbor_table(self, prep):
        with pytest.raises(ValueError, match="neighbor table required"):
            adapt(TINY_CONFIG, prep.source_params, prep.target.without_labels(),
                  prep.pool, None)

    def test_retrieval_requires_pool_rows(self, prep):
        with pytest.raises(ValueError, match="pool dataset required"):
            adapt(TINY_CONFIG, prep.source_params, prep.target.without_labels(),
                  None, build_neighbor_table(prep, TINY_CONFIG))

    def test_numerical_blowup_reports_step_index(self, prep):
        config = replace(TINY_CONFIG, base_lr=1e18, warmup_epochs=0, epochs=3)
        with np.errstate(over="ignore"), pytest.raises(ValueError, match="at step"):
            adapt(config, prep.source_params, prep.target.without_labels(), prep.pool,
                  build_neighbor_table(prep, config), eval_data=prep.target)

    @pytest.mark.parametrize(
        "bad",
        [
            dict(epochs=-1),
            dict(batch_size=0),
            dict(bank_capacity=0),
            dict(warmup_epochs=-2),
            dict(target_fraction=0.0),
            dict(target_fraction=1.5),
            dict(retriever="oracle"),
            dict(base_lr=0.0),
            dict(momentum=1.0),
            dict(weight_decay=-0.1),
            dict(augment_scale=-1.0),
        ],
    )
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            replace(TINY_CONFIG, **bad)


class TestEvaluate:
    def test_constant_predictor_on_single_class_data(self):
        rng = Rng(0)
        params = init_params(4, [], 3, 2, rng)
        params.head[0][:] = 0.0
        params.head[1][:] = np.array([5.0, 0.0])  # always predicts class 0
        data = Dataset(rng.normal(size=(10, 4)), np.arange(10), np.zeros(10), np.zeros(10, int))
        assert evaluate(params, data) == 1.0

    def test_random_head_near_chance_on_balanced_classes(self):
        rng = Rng(1)
        c, n = 4, 4000
        params = init_params(6, [8], 5, c, rng)
        data = Dataset(
            rng.normal(size=(n, 6)), np.arange(n), np.zeros(n),
            np.arange(n, dtype=int) % c,
        )
        accuracy = evaluate(params, data)
        sigma = math.sqrt((1 / c) * (1 - 1 / c) / n)
        assert abs(accuracy - 1 / c) < 6 * sigma

    def test_empty_and_unlabeled_datasets_rejected(self, prep):
        with pytest.raises(ValueError, match="empty dataset"):
            evaluate(prep.source_params, prep.target.subset(np.array([], dtype=int)))
        with pytest.raises(ValueError, match="requires labels"):
            evaluate(prep.source_params, prep.target.without_labels())


class TestSubsetting:
    def test_fraction_one_is_a_permutation(self, prep):
        subset = adaptation_subset(prep.target, 1.0, TINY_CONFIG.data_seed)
        assert sorted(subset.ids) == sorted(prep.target.ids)

    def test_same_fraction_and_seed_reproduce_the_subset(self, prep):
        a = adaptation_subset(prep.target, 0.25, 3)
        b = adaptation_subset(prep.target, 0.25, 3)
        np.testing.assert_array_equal(a.ids, b.ids)

    def test_stratified_counts(self, prep):
        subset = adaptation_subset(prep.target, 0.25, 3)
        per_class = np.bincount(subset.labels, minlength=TINY_TASK.num_classes)
        full = np.bincount(prep.target.labels, minlength=TINY_TASK.num_classes)
        assert list(per_class) == [math.ceil(0.25 * n) for n in full]


class TestSweeps:
    def test_fraction_sweep_structure_and_determinism(self, prep):
        fractions = [0.25, 1.0]
        rows = run_fraction_sweep(prep, TINY_CONFIG, fractions)
        assert len(rows) == 2 * len(fractions)
        assert {row["variant"] for row in rows} == {"retrieval", "no_retrieval"}
        assert [row["fraction"] for row in rows] == [0.25, 0.25, 1.0, 1.0]
        again = run_fraction_sweep(prep, TINY_CONFIG, fractions)
        assert rows == again

    def test_nn_sweep_zero_matches_fraction_sweep_no_retrieval_cell(self, prep):
        nn_rows = run_nn_sweep(prep, TINY_CONFIG, [0])
        fraction_rows = run_fraction_sweep(prep, TINY_CONFIG, [1.0])
        no_retrieval = next(r for r in fraction_rows if r["variant"] == "no_retrieval")
        assert nn_rows[0]["num_retrieved"] == 0
        assert nn_rows[0]["final_top1"] == no_retrieval["final_top1"]

    def test_nn_sweep_preserves_input_order(self, prep):
        rows = run_nn_sweep(prep, replace(TINY_CONFIG, epochs=1), [2, 0, 1])
        assert [row["num_retrieved"] for row in rows] == [2, 0, 1]

    def test_retriever_ablation_emits_one_row_per_retriever(self, prep):
        rows = run_retriever_ablation(prep, replace(TINY_CONFIG, epochs=1))
        assert [row["retriever"] for row in rows] == ["embedding", "random"]
        assert all(0.0 <= row["final_top1"] <= 1.0 for row in rows)

    def test_pool_ablation_keep_everything_has_zero_delta(self, prep):
        rows = run_pool_ablations(prep, replace(TINY_CONFIG, epochs=1), [("all", None)])
        assert rows[0]["variant"] == "full_pool"
        assert rows[1]["delta_vs_full"] == 0.0
        assert rows[1]["kept_rows"] == rows[0]["kept_rows"]

    def test_pool_ablation_empty_filter_errors(self, prep):
        with pytest.raises(ValueError, match="empty pool"):
            run_pool_ablations(prep, replace(TINY_CONFIG, epochs=1), [("nothing", {999})])

    def test_pool_ablation_disjoint_filters_partition_the_pool(self, prep):
        rows = run_pool_ablations(
            prep, replace(TINY_CONFIG, epochs=1),
            [("target_like", {1}), ("distractors", {2, 3})],
        )
        assert rows[1]["kept_rows"] + rows[2]["kept_rows"] == rows[0]["kept_rows"]

    def test_domain_gap_sweep_reuses_source_and_reports_rho(self):
        mixes = [0.0, 1.0]
        rows, rho = run_domain_gap_sweep(
            TINY_TASK, TINY_MODEL, replace(TINY_CONFIG, epochs=1), mixes, source_epochs=2
        )
        assert [row["pool_target_mix"] for row in rows] == mixes
        assert len({row["source_top1"] for row in rows}) == 1
        assert -1.0 <= rho <= 1.0


class TestSourceTraining:
    def test_source_training_improves_over_init(self, prep):
        first = prep.source_metrics[0].top1
        last = prep.source_metrics[-1].top1
        assert last > first

    def test_source_model_independent_of_adaptation_lr(self):
        hot = prepare_run(TINY_TASK, TINY_MODEL, TINY_CONFIG, source_epochs=2)
        cold = prepare_run(
            TINY_TASK, TINY_MODEL, replace(TINY_CONFIG, base_lr=1e-5), source_epochs=2
        )
        assert_params_equal(hot.source_params, cold.source_params)
