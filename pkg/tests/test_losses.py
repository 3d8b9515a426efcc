"""Objective contracts: contrastive loss math, CE, pseudo-labels, negatives."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tadpool.bank import BankEntry, MemoryBank, Origin, init_bank
from tadpool.index import NeighborTable
from tadpool.losses import (
    LABEL_FILTERED,
    RETRIEVED,
    LossConfig,
    Mode,
    NegativeSet,
    build_negative_set,
    ce_consistency,
    filtered_pseudo_label,
    info_nce,
    total_loss,
)
from tadpool.numerics import Rng, l2_normalize


def unit(rng, d=6):
    return l2_normalize(rng.normal(size=d))


def nce_oracle(q, k, negatives, temperature, include_positive):
    """Naive double-precision denominator, no shift tricks."""
    s_pos = float(q @ k) / temperature
    terms = [float(n @ q) / temperature for n in negatives]
    if include_positive:
        terms = [s_pos] + terms
    z = math.fsum(math.exp(t) for t in terms)
    return math.log(z) - s_pos


class TestInfoNce:
    def test_symmetric_negative_gives_ln_two(self):
        """One negative scoring exactly like the positive at tau=1 -> ln 2."""
        q = np.array([1.0, 0.0])
        k = np.array([0.0, 1.0])
        negative = k.copy()  # same dot with q as the key
        loss, *_ = info_nce(q, k, negative[None, :], temperature=1.0)
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)
        loss_literal, *_ = info_nce(
            q, k, negative[None, :], temperature=1.0, include_positive=False
        )
        assert loss_literal == pytest.approx(0.0, abs=1e-12)

    def test_matches_naive_oracle_randomized(self):
        """Loss equals the unshifted f64 oracle over 100 random instances."""
        rng = np.random.default_rng(0)
        for trial in range(100):
            d = int(rng.integers(2, 12))
            q, k = unit(rng, d), unit(rng, d)
            negs = np.stack([unit(rng, d) for _ in range(int(rng.integers(1, 9)))])
            tau = float(rng.choice([0.07, 0.2, 0.5, 1.0]))
            include = bool(rng.random() < 0.5)
            loss, *_ = info_nce(q, k, negs, tau, include_positive=include)
            assert loss == pytest.approx(nce_oracle(q, k, negs, tau, include), abs=1e-9)

    def test_gradients_match_finite_differences(self):
        """Central FD on query, key, and negatives; h=1e-6 in float64."""
        rng = np.random.default_rng(1)
        h = 1e-6
        for trial in range(25):
            d = 5
            q, k = unit(rng, d), unit(rng, d)
            negs = np.stack([unit(rng, d) for _ in range(4)])
            tau = 0.2
            include = trial % 2 == 0
            loss, gq, gk, gn = info_nce(q, k, negs, tau, include_positive=include)

            def loss_of(q_, k_, n_):
                return nce_oracle(q_, k_, n_, tau, include)

            for vec, grad, which in ((q, gq, "q"), (k, gk, "k")):
                for i in range(d):
                    up, down = vec.copy(), vec.copy()
                    up[i] += h
                    down[i] -= h
                    fd = (
                        loss_of(up if which == "q" else q, up if which == "k" else k, negs)
                        - loss_of(down if which == "q" else q, down if which == "k" else k, negs)
                    ) / (2 * h)
                    assert grad[i] == pytest.approx(fd, abs=1e-6)
            for j in range(len(negs)):
                for i in range(d):
                    up, down = negs.copy(), negs.copy()
                    up[j, i] += h
                    down[j, i] -= h
                    fd = (loss_of(q, k, up) - loss_of(q, k, down)) / (2 * h)
                    assert gn[j, i] == pytest.approx(fd, abs=1e-6)

    def test_loss_non_negative_iff_positive_included(self):
        rng = np.random.default_rng(2)
        for trial in range(50):
            q, k = unit(rng), unit(rng)
            negs = np.stack([unit(rng) for _ in range(3)])
            loss, *_ = info_nce(q, k, negs, 0.1, include_positive=True)
            assert loss >= 0.0

    def test_adding_a_negative_never_decreases_loss(self):
        rng = np.random.default_rng(3)
        for trial in range(50):
            q, k = unit(rng), unit(rng)
            negs = np.stack([unit(rng) for _ in range(4)])
            for include in (True, False):
                base, *_ = info_nce(q, k, negs[:3], 0.3, include_positive=include)
                more, *_ = info_nce(q, k, negs, 0.3, include_positive=include)
                assert more >= base - 1e-12

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_empty_negatives_with_positive_is_zero(self, seed):
        rng = np.random.default_rng(seed)
        q, k = unit(rng), unit(rng)
        loss, gq, gk, gn = info_nce(q, k, np.zeros((0, 6)), 0.07)
        assert loss == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(gq, 0.0, atol=1e-12)
        np.testing.assert_allclose(gk, 0.0, atol=1e-12)

    def test_empty_negatives_literal_mode_raises(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ValueError, match="literal denominator undefined"):
            info_nce(unit(rng), unit(rng), np.zeros((0, 6)), 0.07, include_positive=False)

    def test_non_unit_inputs_rejected(self):
        rng = np.random.default_rng(5)
        with pytest.raises(ValueError, match="unit-norm"):
            info_nce(2.0 * unit(rng), unit(rng), np.zeros((0, 6)), 0.07)

    def test_stable_at_low_temperature(self):
        """tau = 0.01 pushes scores to ~100; must not overflow."""
        q = np.array([1.0, 0.0])
        loss, *_ = info_nce(q, q.copy(), np.array([[0.0, 1.0]]), temperature=0.01)
        assert np.isfinite(loss)


class TestCeConsistency:
    def test_uniform_logits_give_log_c(self):
        loss, _ = ce_consistency(np.zeros(4), 2)
        assert loss == pytest.approx(math.log(4.0), abs=1e-12)

    def test_matches_manual_oracle_randomized(self):
        """Loss and gradient against direct softmax math, 100 instances."""
        rng = np.random.default_rng(6)
        for _ in range(100):
            c = int(rng.integers(2, 9))
            logits = rng.normal(size=c) * 5
            label = int(rng.integers(0, c))
            exp = np.exp(logits - logits.max())
            p = exp / exp.sum()
            loss, grad = ce_consistency(logits, label)
            assert loss == pytest.approx(float(-np.log(p[label])), abs=1e-9)
            onehot = np.eye(c)[label]
            np.testing.assert_allclose(grad, p - onehot, atol=1e-9)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        h = 1e-6
        logits = rng.normal(size=5)
        label = 3
        _, grad = ce_consistency(logits, label)
        for i in range(5):
            up, down = logits.copy(), logits.copy()
            up[i] += h
            down[i] -= h
            fd = (ce_consistency(up, label)[0] - ce_consistency(down, label)[0]) / (2 * h)
            assert grad[i] == pytest.approx(fd, abs=1e-8)

    def test_label_out_of_range_raises(self):
        with pytest.raises(ValueError, match="label out of range"):
            ce_consistency(np.zeros(3), 3)

    def test_confident_correct_prediction_near_zero_loss(self):
        loss, _ = ce_consistency(np.array([20.0, 0.0, 0.0]), 0)
        assert loss == pytest.approx(0.0, abs=1e-6)


class TestFilteredPseudoLabel:
    def make_bank(self, rng, sample_id, snapshots):
        return init_bank(
            16,
            [
                BankEntry(sample_id, Origin.TARGET, unit(rng), np.asarray(s, float))
                for s in snapshots
            ],
        )

    def test_aggregation_matches_mean_argmax_oracle(self):
        rng = np.random.default_rng(8)
        for trial in range(100):
            c = int(rng.integers(2, 6))
            snaps = [rng.normal(size=c) for _ in range(int(rng.integers(0, 5)))]
            current = rng.normal(size=c)
            bank = self.make_bank(rng, 7, snaps)
            label, averaged = filtered_pseudo_label(bank, 7, current)
            oracle = np.mean(np.vstack([*snaps, current]), axis=0) if snaps else current
            np.testing.assert_allclose(averaged, oracle, atol=1e-6)
            assert label == int(np.argmax(oracle))

    def test_tie_breaks_to_smallest_index(self):
        bank = MemoryBank(4)
        label, _ = filtered_pseudo_label(bank, 1, np.array([2.0, 2.0, 1.0]))
        assert label == 0

    def test_averaging_can_flip_a_noisy_label(self):
        """Residents voting class 0 outweigh one noisy current view."""
        rng = np.random.default_rng(9)
        bank = self.make_bank(rng, 3, [[4.0, 0.0], [4.0, 0.0], [4.0, 0.0]])
        label, _ = filtered_pseudo_label(bank, 3, np.array([0.0, 1.0]))
        assert label == 0


class TestTotalLoss:
    def test_weighted_sum(self):
        assert total_loss(1.5, 2.0, 0.5) == pytest.approx(2.5)
        assert total_loss(1.5, 99.0, 0.0) == pytest.approx(1.5)


class _BoobyTrappedTable(NeighborTable):
    def __init__(self):
        super().__init__({})

    def neighbors(self, target_id):
        raise AssertionError("neighbor table consulted")


def set_oracle(bank, table, query_id, query_label, config, seed):
    """Independent reconstruction of the negative set from bank contents."""
    if config.num_retrieved > 0:
        cands = table.neighbors(query_id)
        take = min(config.num_retrieved, len(cands))
        picks = Rng(seed).choice_without_replacement(len(cands), take)
        sampled = {int(cands[p]) for p in picks}
    else:
        sampled = set()
    latest = {}
    for e in bank.entries():  # ascending insertion order
        if e.origin is Origin.TARGET:
            if e.sample_id != query_id and int(np.argmax(e.logits)) != query_label:
                latest[e.sample_id] = e
        elif e.sample_id in sampled:
            latest[e.sample_id] = e
    return latest


class TestBuildNegativeSet:
    def random_bank(self, rng, num_target=20, num_pool=15, c=3):
        entries = []
        for _ in range(num_target):
            sid = int(rng.integers(0, 12))
            entries.append(BankEntry(sid, Origin.TARGET, unit(rng), rng.normal(size=c)))
        for _ in range(num_pool):
            sid = int(rng.integers(1000, 1012))
            if any(e.sample_id == sid for e in entries):
                continue
            entries.append(BankEntry(sid, Origin.POOL, unit(rng)))
        order = rng.permutation(len(entries))
        bank = MemoryBank(64)
        bank.enqueue([entries[i] for i in order])
        return bank

    def test_matches_reconstruction_oracle_randomized(self):
        rng = np.random.default_rng(10)
        for trial in range(100):
            bank = self.random_bank(rng)
            table = NeighborTable(
                {5: np.asarray(rng.choice(np.arange(1000, 1020), size=10, replace=False), dtype=np.uint64)}
            )
            config = LossConfig(num_retrieved=2, candidate_factor=5)
            got = build_negative_set(5, 1, bank, table, config, Rng(trial))
            want = set_oracle(bank, table, 5, 1, config, trial)
            assert set(got.ids.tolist()) == set(want.keys())
            for i, sample_id in enumerate(got.ids.tolist()):
                np.testing.assert_array_equal(got.features[i], want[sample_id].feature)

    def test_zero_retrieved_never_consults_table(self):
        rng = np.random.default_rng(11)
        bank = self.random_bank(rng)
        config = LossConfig(num_retrieved=0)
        out = build_negative_set(5, 0, bank, _BoobyTrappedTable(), config, Rng(0))
        assert np.all(out.provenance == LABEL_FILTERED)
        assert len(out.sampled_pool_ids) == 0

    def test_zero_retrieved_accepts_missing_table(self):
        rng = np.random.default_rng(12)
        bank = self.random_bank(rng)
        out = build_negative_set(5, 0, bank, None, LossConfig(num_retrieved=0), Rng(0))
        assert np.all(out.provenance == LABEL_FILTERED)

    def test_retrieved_part_is_resident_intersection(self):
        """Sampled-but-absent neighbor IDs contribute nothing."""
        rng = np.random.default_rng(13)
        bank = init_bank(
            16,
            [BankEntry(1000, Origin.POOL, unit(rng)), BankEntry(1001, Origin.POOL, unit(rng))],
        )
        table = NeighborTable({7: np.arange(1000, 1010).astype(np.uint64)})
        config = LossConfig(num_retrieved=10, candidate_factor=1)
        out = build_negative_set(7, 0, bank, table, config, Rng(0))
        assert set(out.ids.tolist()) == {1000, 1001}
        assert np.all(out.provenance == RETRIEVED)
        assert set(out.sampled_pool_ids.tolist()) == set(range(1000, 1010))

    def test_duplicate_snapshots_keep_most_recent(self):
        rng = np.random.default_rng(14)
        old = BankEntry(3, Origin.TARGET, unit(rng), np.array([0.0, 1.0]))
        new = BankEntry(3, Origin.TARGET, unit(rng), np.array([0.0, 2.0]))
        bank = init_bank(8, [old, new])
        out = build_negative_set(99, 0, bank, None, LossConfig(num_retrieved=0), Rng(0))
        assert out.ids.tolist() == [3]
        np.testing.assert_array_equal(out.features[0], new.feature)

    def test_deterministic_given_stream(self):
        rng = np.random.default_rng(15)
        bank = self.random_bank(rng)
        table = NeighborTable({5: np.arange(1000, 1010).astype(np.uint64)})
        config = LossConfig(num_retrieved=3, candidate_factor=3)
        a = build_negative_set(5, 1, bank, table, config, Rng(42))
        b = build_negative_set(5, 1, bank, table, config, Rng(42))
        np.testing.assert_array_equal(a.ids, b.ids)
        np.testing.assert_array_equal(a.sampled_pool_ids, b.sampled_pool_ids)

    def test_empty_bank_gives_empty_set(self):
        out = build_negative_set(5, 0, MemoryBank(4), None, LossConfig(num_retrieved=0), Rng(0))
        assert len(out) == 0


class TestLossConfig:
    def test_defaults(self):
        config = LossConfig()
        assert config.temperature == pytest.approx(0.07)
        assert config.candidate_factor == 5
        assert config.include_positive is True
        assert config.mode is Mode.TEST_TIME

    def test_validation(self):
        with pytest.raises(ValueError, match="temperature"):
            LossConfig(temperature=0.0)
        with pytest.raises(ValueError, match="num_retrieved"):
            LossConfig(num_retrieved=-1)
        with pytest.raises(ValueError, match="contrastive_weight"):
            LossConfig(contrastive_weight=-0.5)
