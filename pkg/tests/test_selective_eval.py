import math

import numpy as np
import pandas as pd
import pytest

from src.errors import DomainError
from src.retrieval import CandidateRanking
from src.selective_eval import (
    LossSpec,
    PredictionMode,
    SimilarityMeasure,
    acceptance_order,
    aurc_table,
    candidate_statistics,
    candidate_statistics_table,
    coverage_at_risk,
    coverage_at_threshold,
    hamming_distance,
    instance_loss,
    risk_coverage_curve,
    selective_risk,
    spearman_matrix,
    tanimoto_similarity,
)
from src.synthetic import oracle_curve


class TestLossSpec:
    def test_parse_hit(self):
        spec = LossSpec.parse("hit@5")
        assert spec.kind == "hit" and spec.k == 5
        assert spec.is_binary
        assert spec.name == "hit@5"

    def test_parse_similarity(self):
        spec = LossSpec.parse("tanimoto:discrete")
        assert spec.measure is SimilarityMeasure.TANIMOTO
        assert spec.mode is PredictionMode.DISCRETE
        assert spec.name == "tanimoto_disc"
        assert not spec.is_binary

    def test_hamming_continuous_rejected(self):
        with pytest.raises(DomainError):
            LossSpec.parse("hamming:continuous")

    def test_unknown(self):
        with pytest.raises(DomainError):
            LossSpec.parse("dice")


class TestInstanceLoss:
    def test_tanimoto_partial(self, make_instance):
        inst = make_instance([[1, 1, 1]])
        loss = instance_loss(inst, np.array([1.0, 1.0, 0.0]), LossSpec.similarity("tanimoto", "continuous"))
        assert loss == pytest.approx(1.0 / 3.0)

    def test_tanimoto_worked_example(self, make_instance):
        assert tanimoto_similarity(np.array([1, 1, 0]), np.array([1, 0, 1])) == pytest.approx(1.0 / 3.0)
        inst = make_instance([[1, 0, 1]])
        for mode in ("continuous", "discrete"):
            loss = instance_loss(inst, np.array([1.0, 1.0, 0.0]), LossSpec.similarity("tanimoto", mode))
            assert loss == pytest.approx(2.0 / 3.0)

    def test_identical_zero(self, make_instance):
        inst = make_instance([[1, 0, 1, 1]])
        for measure in ("tanimoto", "cosine", "hamming"):
            spec = LossSpec.similarity(measure, "discrete")
            assert instance_loss(inst, np.array([0.9, 0.1, 0.8, 0.7]), spec) == pytest.approx(0.0, abs=1e-12)

    def test_hamming_complement(self):
        y = np.array([1, 0, 1, 0])
        assert hamming_distance(1 - y, y) == 1.0

    def test_both_empty(self):
        assert tanimoto_similarity(np.zeros(4), np.zeros(4)) == 1.0

    def test_cosine_zero_prediction(self, make_instance):
        inst = make_instance([[1, 0]])
        assert instance_loss(inst, np.zeros(2), LossSpec.similarity("cosine", "continuous")) == 1.0

    def test_bundle_uses_mean(self, make_instance, make_bundle):
        inst = make_instance([[1, 1, 0]])
        bundle = make_bundle([[1.0, 0.4, 0.0], [1.0, 0.8, 0.2]])
        assert instance_loss(inst, bundle, LossSpec.similarity("hamming", "discrete")) == 0.0

    def test_discrete_bundle_is_binarized(self, make_instance, make_bundle):
        inst = make_instance([[1, 0, 1]])
        bundle = make_bundle([[0.5, 0.2, 0.9]])
        np.testing.assert_array_equal(bundle.binarized(), [0, 0, 1])
        loss = instance_loss(inst, bundle, LossSpec.similarity("tanimoto", "discrete"))
        assert loss == pytest.approx(1.0 - tanimoto_similarity(bundle.binarized(), inst.candidates[0]))
        assert loss == pytest.approx(0.5)

    def test_hit_needs_ranking(self, make_instance):
        inst = make_instance([[1, 0], [0, 1]], true_index=1)
        with pytest.raises(DomainError):
            instance_loss(inst, np.array([0.5, 0.5]), LossSpec.hit(1))
        ranking = CandidateRanking(np.array([0.9, 0.1]), np.array([0.7, 0.3]), np.array([0, 1]))
        assert instance_loss(inst, ranking, LossSpec.hit(1)) == 1.0
        assert instance_loss(inst, ranking, LossSpec.hit(2)) == 0.0


class TestSelectiveRisk:
    def test_mean_of_accepted(self):
        assert selective_risk(np.array([1.0, 0.0, 1.0]), np.array([True, True, False])) == 0.5

    def test_empty_acceptance(self):
        with pytest.raises(DomainError):
            selective_risk(np.array([1.0, 0.0]), np.array([False, False]))

    def test_coverage_at_threshold(self):
        kappa = np.array([0.1, 0.5, 0.5, 0.9])
        assert coverage_at_threshold(kappa, 0.5) == 0.75
        assert coverage_at_threshold(kappa, math.inf) == 0.0
        assert coverage_at_threshold(kappa, -math.inf) == 1.0


class TestRiskCoverageCurve:
    def test_acceptance_order_ties(self):
        np.testing.assert_array_equal(acceptance_order(np.array([0.5, 0.9, 0.5])), [1, 0, 2])

    def test_all_zero_losses(self):
        curve = risk_coverage_curve(np.zeros(20), np.arange(20.0))
        assert curve.aurc == 0.0
        assert curve.degenerate
        assert curve.rel_aurc == 0.0

    def test_perfect_scorer(self):
        n = 10_000
        losses = np.r_[np.zeros(n // 2), np.ones(n // 2)]
        curve = risk_coverage_curve(losses, -losses)
        assert curve.aurc == pytest.approx(0.5 - 0.5 * math.log(2.0), abs=2e-3)
        assert curve.rel_aurc == pytest.approx(0.0, abs=1e-12)
        assert curve.risk[-1] == pytest.approx(0.5)

    def test_oracle_bounds_scorer(self, rng):
        losses = (rng.random(300) < 0.3).astype(float)
        curve = risk_coverage_curve(losses, rng.random(300))
        assert curve.aurc_oracle <= curve.aurc + 1e-12
        assert curve.aurc_random == pytest.approx(losses.mean())

    def test_oracle_curve_monotone(self, rng):
        losses = rng.random(200)
        oracle = risk_coverage_curve(losses, -losses)
        assert np.all(np.diff(oracle.risk) >= -1e-12)

    def test_random_scorer_rel_aurc_near_one(self):
        generator = np.random.default_rng(2024)
        losses = (generator.random(1000) < 0.4).astype(float)
        rels = [risk_coverage_curve(losses, generator.permutation(1000).astype(float)).rel_aurc for _ in range(100)]
        assert np.mean(rels) == pytest.approx(1.0, abs=0.05)

    def test_matches_exact_rational_curve(self):
        generator = np.random.default_rng(8)
        for _ in range(20):
            n = int(generator.integers(1, 60))
            losses = generator.integers(0, 2, size=n).astype(float)
            kappa = generator.integers(0, 5, size=n).astype(float)
            coverage, risk, aurc = oracle_curve(losses.tolist(), kappa.tolist())
            curve = risk_coverage_curve(losses, kappa)
            np.testing.assert_allclose(curve.coverage, coverage, atol=1e-12)
            np.testing.assert_allclose(curve.risk, risk, atol=1e-12)
            assert curve.aurc == pytest.approx(aurc, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            risk_coverage_curve(np.zeros(3), np.zeros(4))

    def test_coverage_at_risk(self):
        losses = np.array([0.0, 0.0, 1.0, 1.0])
        kappa = np.array([4.0, 3.0, 2.0, 1.0])
        assert coverage_at_risk(losses, kappa, 0.4) == 0.75
        assert coverage_at_risk(losses, kappa, 0.0) == 0.5
        assert coverage_at_risk(np.ones(4), kappa, 0.1) == 0.0

    def test_to_frame(self):
        frame = risk_coverage_curve(np.array([1.0, 0.0, 0.0]), np.array([1.0, 2.0, 3.0])).to_frame()
        assert list(frame.columns) == ["coverage", "risk"]
        np.testing.assert_allclose(frame["risk"], [0.0, 0.0, 1.0 / 3.0])


class TestAurcTable:
    def test_rows(self):
        frame = pd.DataFrame(
            {"id": list("abcd"), "conf": [0.9, 0.1, 0.5, 0.3], "gap": [1, 2, 3, 4], "hit@1": [0, 1, 0, 1]}
        )
        table = aurc_table(frame, ["conf", "gap"], ["hit@1"])
        assert table[["score", "loss"]].values.tolist() == [["conf", "hit@1"], ["gap", "hit@1"]]
        assert (table["n"] == 4).all()
        conf = table.iloc[0]
        assert conf["rel_aurc"] == pytest.approx(0.0, abs=1e-12)

    def test_coverage_at_target_risks(self):
        frame = pd.DataFrame(
            {"id": list("abcd"), "conf": [0.9, 0.1, 0.5, 0.3], "gap": [1, 2, 3, 4], "hit": [0, 1, 0, 1]}
        )
        table = aurc_table(frame, ["conf", "gap"], ["hit"], target_risks=[0.4, 0.5])
        assert list(table.columns[-2:]) == ["coverage@0.4", "coverage@0.5"]
        assert table["coverage@0.4"].tolist() == [0.75, 0.0]
        assert table["coverage@0.5"].tolist() == [1.0, 1.0]

    def test_missing_column(self):
        with pytest.raises(DomainError):
            aurc_table(pd.DataFrame({"conf": [1.0]}), ["conf"], ["hit@1"])


class TestSpearman:
    def test_identical_and_reversed(self):
        frame = pd.DataFrame({"id": list("abcd"), "x": [1, 2, 3, 4], "y": [10, 20, 30, 40], "z": [4, 3, 2, 1]})
        matrix = spearman_matrix(frame)
        assert list(matrix.columns) == ["x", "y", "z"]
        assert matrix.loc["x", "y"] == pytest.approx(1.0)
        assert matrix.loc["x", "z"] == pytest.approx(-1.0)

    def test_worked_value(self):
        matrix = spearman_matrix(pd.DataFrame({"a": [1, 2, 3], "b": [2, 3, 1]}))
        assert matrix.loc["a", "b"] == pytest.approx(-0.5)

    def test_monotone_transform_invariant(self, rng):
        x = rng.normal(size=50)
        y = x + rng.normal(size=50)
        base = spearman_matrix(pd.DataFrame({"x": x, "y": y})).loc["x", "y"]
        moved = spearman_matrix(pd.DataFrame({"x": np.exp(x), "y": 3 * y - 1})).loc["x", "y"]
        assert moved == pytest.approx(base, abs=1e-12)

    def test_constant_column(self):
        matrix = spearman_matrix(pd.DataFrame({"x": [1, 2, 3], "c": [5, 5, 5]}))
        assert math.isnan(matrix.loc["c", "c"])
        assert math.isnan(matrix.loc["x", "c"])
        assert matrix.loc["x", "x"] == 1.0

    def test_symmetric(self, rng):
        matrix = spearman_matrix(pd.DataFrame(rng.normal(size=(30, 4)), columns=list("pqrs")))
        np.testing.assert_array_equal(matrix.to_numpy(), matrix.to_numpy().T)

    def test_too_few_rows(self):
        with pytest.raises(DomainError):
            spearman_matrix(pd.DataFrame({"x": [1.0], "y": [2.0]}))


class TestCandidateStatistics:
    def test_pairwise_similarity(self, make_instance):
        inst = make_instance([[1, 0], [0, 1], [1, 1]], meta={"precursor_mass": 180.06})
        stats = candidate_statistics(inst)
        # pairs: 0, 1/sqrt2, 1/sqrt2
        assert stats["mean_pairwise_similarity"] == pytest.approx(math.sqrt(2.0) / 3.0)
        assert stats["precursor_mass"] == pytest.approx(180.06)
        assert stats["num_candidates"] == 3

    def test_singleton(self, make_instance):
        stats = candidate_statistics(make_instance([[1, 0]]))
        assert math.isnan(stats["mean_pairwise_similarity"])
        assert math.isnan(stats["precursor_mass"])

    def test_table(self, make_instance):
        table = candidate_statistics_table([make_instance([[1]], instance_id=f"i{k}") for k in range(3)])
        assert table["id"].tolist() == ["i0", "i1", "i2"]
