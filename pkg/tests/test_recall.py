"""Confidence distributions, pseudo-label strategies, and forgetting."""

import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mlcil.errors import ContractError, MetricError, StateError
from mlcil.recall import (
    ClassConfidenceStats,
    ConfidenceDistributionTable,
    confidence_forgetting,
    fit_from_matrix,
    pseudo_label_re,
    pseudo_label_static,
    pseudo_label_topk,
    update_queue,
)

probability_vectors = st.lists(st.floats(0.0, 1.0), min_size=1, max_size=10).map(np.array)


# ---------------------------------------------------------------------------
# fitting


class TestFit:
    def test_hand_example(self):
        probs = np.array([[0.8], [0.6], [0.3]])
        positives = np.array([[1], [1], [0]])
        table = fit_from_matrix(probs, positives, [5], session=1)
        assert table.stats[5].mean == pytest.approx(0.7)
        assert table.stats[5].var == pytest.approx(0.01)
        assert table.stats[5].count == 2
        assert table.history[5] == {1: pytest.approx(0.7)}

    def test_constant_confidence_has_zero_variance(self):
        probs = np.full((4, 1), 0.9)
        positives = np.ones((4, 1), dtype=int)
        table = fit_from_matrix(probs, positives, [0], session=1)
        assert table.stats[0].var == 0.0

    def test_moments_match_beta_draws(self):
        """1000 Beta(5, 2) confidences: sample mean within 3 standard errors
        of 5/7 and sample variance near alpha*beta/((a+b)^2 (a+b+1))."""
        rng = np.random.default_rng(123)
        draws = rng.beta(5.0, 2.0, size=1000)
        table = fit_from_matrix(draws.reshape(-1, 1), np.ones((1000, 1), dtype=int),
                                [0], session=1)
        true_mean = 5.0 / 7.0
        true_var = 5.0 * 2.0 / (49.0 * 8.0)
        se = np.sqrt(true_var / 1000.0)
        assert abs(table.stats[0].mean - true_mean) < 3 * se
        assert table.stats[0].var == pytest.approx(true_var, rel=0.2)

    def test_row_order_does_not_matter(self):
        rng = np.random.default_rng(5)
        probs = rng.uniform(size=(30, 2))
        positives = rng.integers(0, 2, size=(30, 2))
        positives[0] = 1  # both classes keep at least one positive
        a = fit_from_matrix(probs, positives, [0, 1], session=1)
        perm = rng.permutation(30)
        b = fit_from_matrix(probs[perm], positives[perm], [0, 1], session=1)
        for cid in (0, 1):
            assert a.stats[cid].mean == pytest.approx(b.stats[cid].mean, abs=1e-12)
            assert a.stats[cid].var == pytest.approx(b.stats[cid].var, abs=1e-12)

    def test_class_without_positives_is_excluded_with_warning(self, caplog):
        probs = np.array([[0.9, 0.1], [0.8, 0.2]])
        positives = np.array([[1, 0], [1, 0]])
        with caplog.at_level(logging.WARNING):
            table = fit_from_matrix(probs, positives, [0, 1], session=2)
        assert 0 in table.stats
        assert 1 not in table.stats
        assert any("no positives" in r.message for r in caplog.records)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            fit_from_matrix(np.ones((3, 2)), np.ones((3, 1)), [0, 1], session=1)


# ---------------------------------------------------------------------------
# thresholds and pseudo-labels


class TestThresholds:
    def make_table(self, means):
        table = ConfidenceDistributionTable()
        for cid, mu in enumerate(means):
            table.stats[cid] = ClassConfidenceStats(mean=mu, var=0.01, count=5)
        return table

    def test_per_class_threshold_is_the_mean(self):
        table = self.make_table([0.9, 0.6])
        labels = pseudo_label_re(np.array([0.7, 0.7]), [0, 1], table)
        np.testing.assert_array_equal(labels, [0, 1])

    def test_boundary_probability_counts_as_positive(self):
        table = self.make_table([0.75])
        assert pseudo_label_re(np.array([0.75]), [0], table)[0] == 1

    def test_sigma_coefficient_lowers_the_bar(self):
        table = self.make_table([0.8])  # sigma = 0.1
        probs = np.array([0.75])
        assert pseudo_label_re(probs, [0], table)[0] == 0
        assert pseudo_label_re(probs, [0], table, sigma_coef=1.0)[0] == 1

    def test_unknown_class_uses_fallback(self):
        table = self.make_table([0.9])
        labels = pseudo_label_re(np.array([0.85, 0.85]), [0, 99], table, fallback=0.8)
        np.testing.assert_array_equal(labels, [0, 1])

    def test_equal_means_reduce_to_static(self):
        table = self.make_table([0.7, 0.7, 0.7])
        rng = np.random.default_rng(0)
        for _ in range(50):
            probs = rng.uniform(size=3)
            np.testing.assert_array_equal(
                pseudo_label_re(probs, [0, 1, 2], table),
                pseudo_label_static(probs, 0.7),
            )

    def test_static_examples(self):
        np.testing.assert_array_equal(
            pseudo_label_static(np.array([0.95, 0.9, 0.1]), 0.9), [1, 1, 0]
        )
        with pytest.raises(ContractError):
            pseudo_label_static(np.array([0.5]), 1.0)

    @given(probability_vectors, st.floats(0.01, 0.99), st.floats(0.01, 0.99))
    def test_static_threshold_monotonicity(self, probs, e1, e2):
        """Raising the threshold never adds a positive."""
        lo, hi = sorted((e1, e2))
        at_hi = pseudo_label_static(probs, hi)
        at_lo = pseudo_label_static(probs, lo)
        assert np.all(at_hi <= at_lo)

    def test_topk_count_and_tie_break(self):
        labels = pseudo_label_topk(np.array([0.9, 0.5, 0.5]), 2)
        np.testing.assert_array_equal(labels, [1, 1, 0])  # tie goes to the lower index
        assert pseudo_label_topk(np.array([0.1, 0.2]), 0).sum() == 0
        assert pseudo_label_topk(np.array([0.1, 0.2]), 5).sum() == 2
        with pytest.raises(ContractError):
            pseudo_label_topk(np.array([0.1]), -1)

    def test_re_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            pseudo_label_re(np.array([0.5, 0.5]), [0], ConfidenceDistributionTable())


# ---------------------------------------------------------------------------
# queue updates


class TestQueue:
    def fitted(self, mean, session, cid=0, var=0.02):
        table = ConfidenceDistributionTable(last_session=session)
        table.stats[cid] = ClassConfidenceStats(mean=mean, var=var, count=3)
        table.history[cid] = {session: mean}
        return table

    def test_replace_keeps_newest(self):
        table = self.fitted(0.9, 1)
        update_queue(table, self.fitted(0.7, 2), session=2, mode="replace")
        assert table.stats[0].mean == 0.7
        assert table.last_session == 2

    def test_ema_blends(self):
        table = self.fitted(0.9, 1)
        update_queue(table, self.fitted(0.7, 2), session=2, mode="ema", rho=0.5)
        assert table.stats[0].mean == pytest.approx(0.8)

    def test_history_records_raw_means_in_both_modes(self):
        for mode in ("replace", "ema"):
            table = self.fitted(0.9, 1)
            update_queue(table, self.fitted(0.7, 2), session=2, mode=mode)
            update_queue(table, self.fitted(0.5, 3), session=3, mode=mode)
            assert table.history[0] == {1: 0.9, 2: 0.7, 3: 0.5}

    def test_new_class_enters_regardless_of_mode(self):
        table = self.fitted(0.9, 1, cid=0)
        update_queue(table, self.fitted(0.6, 2, cid=1), session=2, mode="ema")
        assert table.stats[1].mean == 0.6

    def test_stale_session_rejected(self):
        table = self.fitted(0.9, 2)
        with pytest.raises(StateError, match="stale"):
            update_queue(table, self.fitted(0.7, 2), session=2)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ContractError):
            update_queue(self.fitted(0.9, 1), self.fitted(0.7, 2), session=2, mode="avg")

    def test_serialization_roundtrip(self):
        table = self.fitted(0.9, 1)
        update_queue(table, self.fitted(0.7, 2), session=2)
        back = ConfidenceDistributionTable.from_dict(table.to_dict())
        assert back.stats[0].mean == table.stats[0].mean
        assert back.history[0] == {1: 0.9, 2: 0.7}
        assert back.last_session == 2


# ---------------------------------------------------------------------------
# forgetting


class TestForgetting:
    def with_history(self, history, cid=3):
        table = ConfidenceDistributionTable()
        table.history[cid] = dict(history)
        return table

    def test_drop_from_the_best_earlier_session(self):
        table = self.with_history({1: 0.9, 2: 0.7, 3: 0.5})
        assert confidence_forgetting(table, 3, 3) == pytest.approx(0.4)

    def test_improving_class_scores_non_positive(self):
        table = self.with_history({1: 0.5, 2: 0.6, 3: 0.8})
        assert confidence_forgetting(table, 3, 3) <= 0.0

    def test_catastrophic_drop(self):
        table = self.with_history({1: 0.9, 2: 0.05})
        assert confidence_forgetting(table, 3, 2) == pytest.approx(0.85)

    def test_missing_history_rejected(self):
        table = self.with_history({2: 0.5})
        with pytest.raises(MetricError):
            confidence_forgetting(table, 99, 2)
        with pytest.raises(MetricError, match="before"):
            confidence_forgetting(table, 3, 2)  # no session earlier than 2
