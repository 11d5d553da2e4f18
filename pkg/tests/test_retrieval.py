import math

import numpy as np
import pandas as pd
import pytest

from src.errors import DomainError
from src.retrieval import (
    AVERAGE_SAMPLE,
    AggregationStrategy,
    CandidateRanking,
    aggregate_prediction,
    average_sample_hit_at_k,
    candidate_distribution,
    candidate_scores,
    cosine_similarity,
    hit_at_k,
    rank_candidates,
    rank_positions,
    ranking_loss,
    ranking_order,
    retrieval_summary,
    true_rank,
    validate_bundle,
    validate_instance,
)
from src.synthetic import oracle_ranking


def _ranking(order, m=None):
    order = np.asarray(order)
    m = m or order.shape[0]
    scores = np.zeros(m)
    scores[order] = np.linspace(1.0, 0.0, m)
    return CandidateRanking(scores=scores, probs=np.full(m, 1.0 / m), order=order)


class TestCosineSimilarity:
    def test_identical_direction(self):
        assert cosine_similarity(np.array([1.0, 0, 0]), np.array([1, 0, 0])) == pytest.approx(1.0)

    def test_half_half(self):
        value = cosine_similarity(np.array([0.5, 0.5]), np.array([1, 0]))
        assert value == pytest.approx(0.70710678, abs=1e-8)

    def test_orthogonal(self):
        assert cosine_similarity(np.array([0.0, 1.0]), np.array([1, 0])) == 0.0

    def test_zero_norm_rejected(self):
        with pytest.raises(DomainError):
            cosine_similarity(np.zeros(3), np.array([1, 0, 0]))

    def test_length_mismatch_rejected(self):
        with pytest.raises(DomainError):
            cosine_similarity(np.ones(3), np.ones(2))

    def test_scale_invariant(self, rng):
        theta = rng.random(16)
        c = (rng.random(16) > 0.5).astype(np.uint8)
        c[0] = 1
        assert cosine_similarity(3.7 * theta, c) == pytest.approx(cosine_similarity(theta, c), abs=1e-12)

    def test_batch_matches_single(self, make_instance, rng):
        inst = make_instance([[1, 0, 1, 0], [0, 1, 1, 0], [1, 1, 1, 1]])
        thetas = rng.random((3, 4))
        batch = candidate_scores(thetas, inst)
        for s in range(3):
            for j in range(3):
                assert batch[s, j] == pytest.approx(cosine_similarity(thetas[s], inst.candidates[j]), abs=1e-12)


class TestCandidateDistribution:
    def test_equal_scores_uniform(self):
        np.testing.assert_allclose(candidate_distribution(np.array([0.4, 0.4, 0.4]), 0.7), [1 / 3] * 3)

    def test_logistic(self):
        probs = candidate_distribution(np.array([1.0, 0.0]), 1.0)
        np.testing.assert_allclose(probs, [0.73105858, 0.26894142], atol=1e-8)

    def test_argmax_limit(self):
        probs = candidate_distribution(np.array([0.9, 0.1]), 1e-6)
        np.testing.assert_allclose(probs, [1.0, 0.0], atol=1e-9)

    def test_shift_invariant(self, rng):
        scores = rng.random(10)
        np.testing.assert_allclose(
            candidate_distribution(scores + 5.0, 0.003), candidate_distribution(scores, 0.003), atol=1e-12
        )

    def test_sums_to_one(self, rng):
        probs = candidate_distribution(rng.random((4, 7)), 0.003)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("temperature", [0.0, -1.0])
    def test_bad_temperature(self, temperature):
        with pytest.raises(DomainError):
            candidate_distribution(np.array([1.0]), temperature)

    def test_empty_scores(self):
        with pytest.raises(DomainError):
            candidate_distribution(np.array([]), 1.0)

    def test_order_preserved_by_softmax(self):
        generator = np.random.default_rng(3)
        for _ in range(10_000):
            scores = generator.random(int(generator.integers(1, 12)))
            probs = candidate_distribution(scores, float(generator.uniform(0.01, 2.0)))
            np.testing.assert_array_equal(ranking_order(probs), ranking_order(scores))


class TestRanking:
    def test_sort_descending(self):
        np.testing.assert_array_equal(ranking_order(np.array([0.2, 0.8, 0.5])), [1, 2, 0])

    def test_ties_by_index(self):
        np.testing.assert_array_equal(ranking_order(np.array([0.5, 0.5])), [0, 1])
        np.testing.assert_array_equal(ranking_order(np.array([0.1, 0.5, 0.5, 0.1])), [1, 2, 0, 3])

    def test_rank_positions_inverse(self):
        scores = np.array([0.2, 0.8, 0.5])
        np.testing.assert_array_equal(rank_positions(scores), [2, 0, 1])

    def test_singleton(self, make_instance):
        ranking = rank_candidates(make_instance([[1, 0, 1]]), np.array([0.3, 0.2, 0.9]), 0.003)
        np.testing.assert_array_equal(ranking.order, [0])
        np.testing.assert_allclose(ranking.probs, [1.0])

    def test_matches_exhaustive_sort(self, random_pair):
        generator = np.random.default_rng(11)
        for _ in range(50):
            m, d = int(generator.integers(1, 9)), int(generator.integers(2, 17))
            inst, bundle = random_pair(generator, m, d, 1)
            theta = bundle.samples[0]
            ranking = rank_candidates(inst, theta, 0.003)
            assert ranking.order.tolist() == oracle_ranking(theta, inst.candidates)

    def test_true_rank(self):
        assert true_rank(_ranking([2, 0, 1]), 1) == 2


class TestHitAtK:
    def test_top1(self):
        assert hit_at_k(_ranking([3, 1, 0, 2]), 3, 1) == 1

    def test_rank_six_misses_top5(self):
        order = [1, 2, 3, 4, 5, 0, 6]
        assert hit_at_k(_ranking(order), 0, 5) == 0
        assert hit_at_k(_ranking(order), 0, 6) == 1

    def test_k_above_m(self):
        assert hit_at_k(_ranking([1, 2, 0]), 0, 20) == 1

    def test_true_index_out_of_range(self):
        with pytest.raises(DomainError):
            hit_at_k(_ranking([0, 1]), 2, 1)

    def test_monotone_in_k(self):
        ranking = _ranking([4, 2, 0, 1, 3])
        hits = [hit_at_k(ranking, 1, k) for k in range(1, 7)]
        assert hits == sorted(hits)


class TestAggregation:
    def test_single_sample_strategies_agree(self, random_pair):
        generator = np.random.default_rng(5)
        for _ in range(20):
            inst, bundle = random_pair(generator, 6, 12, 1)
            orders = [
                aggregate_prediction(bundle, inst, strategy, 0.003).order.tolist()
                for strategy in AggregationStrategy
            ]
            assert orders[0] == orders[1] == orders[2]

    def test_score_mean_tie(self, make_instance, make_bundle):
        inst = make_instance([[1, 0], [0, 1]])
        bundle = make_bundle([[0.9, 0.1], [0.1, 0.9]])
        per_sample = np.array([[0.9, 0.1], [0.1, 0.9]])
        ranking = aggregate_prediction(
            bundle, inst, AggregationStrategy.SCORE_MEAN, 1.0, sample_scores=per_sample
        )
        np.testing.assert_allclose(ranking.scores, [0.5, 0.5])
        np.testing.assert_array_equal(ranking.order, [0, 1])

    def test_constant_samples_match_single_ranking(self, random_pair):
        generator = np.random.default_rng(9)
        inst, bundle = random_pair(generator, 5, 10, 1)
        theta = bundle.samples[0]
        bundle.samples = np.repeat(theta[None, :], 4, axis=0)
        expected = rank_candidates(inst, theta, 0.003)
        for strategy in AggregationStrategy:
            got = aggregate_prediction(bundle, inst, strategy, 0.003)
            np.testing.assert_array_equal(got.order, expected.order)
            np.testing.assert_allclose(got.probs, expected.probs, atol=1e-12)

    def test_prob_mean_normalized(self, random_pair):
        inst, bundle = random_pair(np.random.default_rng(2), 7, 10, 4)
        ranking = aggregate_prediction(bundle, inst, AggregationStrategy.PROB_MEAN, 0.05)
        assert ranking.probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_strategy_parse(self):
        assert AggregationStrategy.parse("prob") is AggregationStrategy.PROB_MEAN
        assert AggregationStrategy.parse("score_mean") is AggregationStrategy.SCORE_MEAN
        with pytest.raises(DomainError):
            AggregationStrategy.parse("median")


class TestRankingLoss:
    def test_uniform(self):
        ranking = CandidateRanking(np.zeros(4), np.full(4, 0.25), np.arange(4))
        assert ranking_loss(ranking, 2) == pytest.approx(math.log(4), abs=1e-8)

    def test_certain(self):
        ranking = CandidateRanking(np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.array([0, 1]))
        assert ranking_loss(ranking, 0) == 0.0

    def test_logistic_complement(self):
        probs = candidate_distribution(np.array([1.0, 0.0]), 1.0)
        ranking = CandidateRanking(np.array([1.0, 0.0]), probs, np.array([0, 1]))
        assert ranking_loss(ranking, 1) == pytest.approx(1.31326169, abs=1e-8)

    def test_zero_probability_is_infinite(self):
        ranking = CandidateRanking(np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.array([0, 1]))
        assert ranking_loss(ranking, 1) == math.inf


class TestValidation:
    def test_cap(self, make_instance):
        inst = make_instance(np.eye(4, dtype=np.uint8))
        validate_instance(inst, num_bits=4, cap=4)
        with pytest.raises(DomainError):
            validate_instance(inst, cap=3)

    def test_zero_candidate(self, make_instance):
        with pytest.raises(DomainError):
            validate_instance(make_instance([[1, 0], [0, 0]]))

    def test_bundle_range(self, make_bundle):
        with pytest.raises(DomainError):
            validate_bundle(make_bundle([[0.2, 1.5]]))

    def test_binarized(self, make_bundle):
        bundle = make_bundle([[0.4, 0.6, 0.5], [0.8, 0.6, 0.5]])
        np.testing.assert_array_equal(bundle.binarized(), [1, 1, 0])


def test_retrieval_summary():
    hits = pd.DataFrame(
        {
            "score_mean:hit@1": [1, 0, 0, 1],
            "score_mean:hit@5": [1, 1, 0, 1],
            "score_mean:ranking_loss": [0.1, 0.3, math.inf, 0.2],
        }
    )
    summary = retrieval_summary(hits)
    row = summary.iloc[0]
    assert row["strategy"] == "score_mean"
    assert row["hit@1"] == 0.5
    assert row["hit@5"] == 0.75
    assert row["ranking_loss"] == pytest.approx(0.2)
    assert row["ranking_loss_infinite"] == 1


class TestAverageSampleHit:
    def test_members_disagree(self, make_instance, make_bundle):
        inst = make_instance(np.eye(3, dtype=np.uint8), true_index=0)
        bundle = make_bundle([[0.9, 0.1, 0.1], [0.2, 0.8, 0.1]])
        sample_scores = candidate_scores(bundle.samples, inst)
        assert average_sample_hit_at_k(sample_scores, 0, 1) == 0.5
        assert average_sample_hit_at_k(sample_scores, 0, 2) == 1.0
        ranking = aggregate_prediction(bundle, inst, AggregationStrategy.SCORE_MEAN, 1.0)
        assert hit_at_k(ranking, 0, 1) == 1

    def test_single_sample_matches_ranking(self, random_pair, rng):
        inst, bundle = random_pair(rng, 7, 32, 1)
        ranking = rank_candidates(inst, bundle.samples[0], 1.0)
        sample_scores = candidate_scores(bundle.samples, inst)
        for k in (1, 3, 7):
            assert average_sample_hit_at_k(sample_scores, inst.true_index, k) == hit_at_k(ranking, inst.true_index, k)

    def test_invalid_k(self):
        with pytest.raises(DomainError):
            average_sample_hit_at_k(np.ones((2, 3)), 0, 0)


def test_retrieval_summary_lists_average_sample_last():
    hits = pd.DataFrame(
        {
            "score_mean:hit@1": [1, 1],
            "score_mean:ranking_loss": [0.1, 0.2],
            f"{AVERAGE_SAMPLE}:hit@1": [0.5, 1.0],
        }
    )
    summary = retrieval_summary(hits)
    assert summary["strategy"].tolist() == ["score_mean", AVERAGE_SAMPLE]
    assert summary.iloc[1]["hit@1"] == 0.75
    assert math.isnan(summary.iloc[1]["ranking_loss"])
