import math

import numpy as np
import pandas as pd
import pytest

from src.data_loader import PredictionReader, load_dataset, load_table
from src.errors import DomainError
from src.retrieval import AggregationStrategy, aggregate_prediction, hit_at_k
from src.synthetic import (
    DifficultyModel,
    SynthConfig,
    generate,
    generate_instance,
    generate_train_embeddings,
    mc_sgr_trials,
    mc_validate_sgr,
    planted_selective_risk,
    random_candidates,
    stream,
    write_synthetic,
)


class TestConfig:
    @pytest.mark.parametrize(
        "changes",
        [
            {"n_instances": 0},
            {"m_min": 5, "m_max": 4},
            {"m_max": 300},
            {"noise_level": -0.1},
            {"num_bits": 3, "m_min": 1, "m_max": 8},
        ],
    )
    def test_invalid(self, changes):
        with pytest.raises(DomainError):
            SynthConfig(**changes).validate()

    def test_model_parse(self):
        assert DifficultyModel.parse("planted-confidence") is DifficultyModel.PLANTED_CONFIDENCE
        assert DifficultyModel.parse("similar") is DifficultyModel.SIMILAR_CANDIDATES
        with pytest.raises(DomainError):
            DifficultyModel.parse("hard")

    def test_to_dict(self):
        assert SynthConfig().to_dict()["difficulty_model"] == "planted"


class TestGeneration:
    def test_deterministic(self, small_synth):
        a_inst, a_bundles, a_truth = generate(small_synth)
        b_inst, b_bundles, b_truth = generate(small_synth)
        for x, y in zip(a_inst, b_inst):
            np.testing.assert_array_equal(x.candidates, y.candidates)
            assert x.true_index == y.true_index
        for x, y in zip(a_bundles, b_bundles):
            np.testing.assert_array_equal(x.samples, y.samples)
        assert a_truth.equals(b_truth)

    def test_instance_regenerates_alone(self, small_synth):
        instances, bundles, _ = generate(small_synth)
        inst, bundle, _ = generate_instance(small_synth, 17)
        np.testing.assert_array_equal(inst.candidates, instances[17].candidates)
        np.testing.assert_array_equal(bundle.samples, bundles[17].samples)

    def test_seed_changes_data(self, small_synth):
        from dataclasses import replace

        a, _, _ = generate(small_synth)
        b, _, _ = generate(replace(small_synth, seed=8))
        assert any(x.num_candidates != y.num_candidates or x.true_index != y.true_index for x, y in zip(a, b))

    def test_shapes_and_ranges(self, small_synth):
        instances, bundles, truth = generate(small_synth)
        assert len(instances) == len(bundles) == len(truth) == 24
        for inst, bundle in zip(instances, bundles):
            assert 1 <= inst.num_candidates <= 8
            assert inst.candidates.shape[1] == 64
            assert inst.candidates.sum(axis=1).min() > 0
            assert len({row.tobytes() for row in inst.candidates}) == inst.num_candidates
            assert bundle.samples.shape == (3, 64)
            assert bundle.samples.min() >= 0.0 and bundle.samples.max() <= 1.0
            assert inst.id == bundle.instance_id
        assert instances[0].id == "syn000000"

    def test_zero_noise_is_always_right(self):
        config = SynthConfig(n_instances=50, num_bits=128, m_min=2, m_max=20, num_samples=4, noise_level=0.0, seed=1)
        instances, bundles, truth = generate(config)
        for inst, bundle in zip(instances, bundles):
            ranking = aggregate_prediction(bundle, inst, AggregationStrategy.SCORE_MEAN, 0.003)
            assert hit_at_k(ranking, inst.true_index, 1) == 1
        assert (truth["realized_error"] == 0).all()
        assert (truth["latent_kappa"] == 1.0).all()

    def test_singleton_sets_have_no_error(self):
        config = SynthConfig(n_instances=20, num_bits=64, m_min=1, m_max=1, noise_level=1.0, seed=2)
        _, _, truth = generate(config)
        assert (truth["error_prob"] == 0.0).all()
        assert (truth["realized_error"] == 0).all()

    def test_realized_errors_follow_planted_rate(self):
        config = SynthConfig(n_instances=2000, num_bits=64, m_min=2, m_max=4, num_samples=1, noise_level=0.8, seed=5)
        _, _, truth = generate(config)
        assert truth["realized_error"].mean() == pytest.approx(truth["error_prob"].mean(), abs=0.03)

    @pytest.mark.slow
    def test_realized_errors_calibrated_per_decile(self):
        config = SynthConfig(
            n_instances=100_000, num_bits=64, m_min=2, m_max=4, num_samples=1, noise_level=1.0, seed=21
        )
        _, _, truth = generate(config)
        deciles = pd.qcut(truth["error_prob"], 10, labels=False)
        grouped = truth.groupby(deciles)[["error_prob", "realized_error"]].mean()
        assert len(grouped) == 10
        gaps = (grouped["realized_error"] - grouped["error_prob"]).abs()
        assert gaps.max() < 0.02

    def test_similar_candidates(self):
        config = SynthConfig(
            n_instances=10,
            num_bits=256,
            m_min=5,
            m_max=12,
            difficulty_model=DifficultyModel.SIMILAR_CANDIDATES,
            seed=4,
        )
        instances, _, truth = generate(config)
        for inst in instances:
            true_fp = inst.true_fingerprint
            for j, row in enumerate(inst.candidates):
                if j != inst.true_index:
                    assert 1 <= int(np.sum(row != true_fp)) <= 2
        assert truth["error_prob"].isna().all()

    def test_tiny_bit_space(self):
        cands = random_candidates(stream(0, 0), 7, 3)
        assert len({row.tobytes() for row in cands}) == 7
        assert cands.sum(axis=1).min() > 0

    def test_embeddings(self):
        config = SynthConfig(n_instances=5, num_bits=64, m_max=4, embedding_dim=6, n_train=40, seed=9)
        _, bundles, _ = generate(config)
        assert all(b.embedding.shape == (6,) for b in bundles)
        assert generate_train_embeddings(config).shape == (40, 6)
        with pytest.raises(DomainError):
            generate_train_embeddings(SynthConfig())


def test_write_synthetic_round_trip(tmp_path, small_synth):
    paths = write_synthetic(small_synth, tmp_path)
    instances, bundles, truth = generate(small_synth)

    loaded = load_dataset(paths["dataset"])
    assert [inst.id for inst in loaded] == [inst.id for inst in instances]
    np.testing.assert_array_equal(loaded[3].candidates, instances[3].candidates)

    with PredictionReader(paths["predictions"]) as reader:
        assert len(reader) == 24
        np.testing.assert_array_equal(reader[bundles[5].instance_id].samples, bundles[5].samples)

    written = load_table(paths["truth"])
    np.testing.assert_allclose(written["error_prob"], truth["error_prob"])
    assert "train_embeddings" not in paths


class TestSgrValidation:
    def test_planted_risk(self):
        assert planted_selective_risk(0.5, 0.5) == pytest.approx(0.25)
        assert planted_selective_risk(0.5, 0.75) == pytest.approx(0.125)
        assert planted_selective_risk(0.5, 1.0) == 0.0
        assert planted_selective_risk(0.5, math.inf) == 0.0
        assert planted_selective_risk(0.0, 0.3) == 0.0

    def test_violation_rate_small(self):
        config = SynthConfig(n_instances=2000, noise_level=0.5, seed=11)
        rate = mc_validate_sgr(config, target_risk=0.1, delta=0.05, trials=50)
        assert rate <= 0.15

    def test_trials_frame(self):
        config = SynthConfig(n_instances=500, noise_level=0.5, seed=12)
        frame = mc_sgr_trials(config, target_risk=0.2, delta=0.05, trials=5)
        assert list(frame.columns) == [
            "trial", "tau_star", "feasible", "coverage_cal", "bound_b_star", "true_risk", "violated",
        ]
        assert frame["trial"].tolist() == [0, 1, 2, 3, 4]

    def test_trivial_target(self):
        config = SynthConfig(n_instances=500, noise_level=0.5, seed=13)
        assert mc_validate_sgr(config, target_risk=1.0, delta=0.05, trials=10) == 0.0

    def test_zero_noise(self):
        config = SynthConfig(n_instances=500, noise_level=0.0, seed=14)
        assert mc_validate_sgr(config, target_risk=0.05, delta=0.05, trials=10) == 0.0

    def test_thread_count_irrelevant(self):
        config = SynthConfig(n_instances=300, noise_level=0.5, seed=15)
        one = mc_sgr_trials(config, 0.2, 0.05, trials=6, threads=1)
        many = mc_sgr_trials(config, 0.2, 0.05, trials=6, threads=3)
        assert one.equals(many)

    def test_needs_planted_model(self):
        config = SynthConfig(difficulty_model=DifficultyModel.SIMILAR_CANDIDATES)
        with pytest.raises(DomainError):
            mc_sgr_trials(config, 0.2, trials=1)

    @pytest.mark.slow
    def test_full_validation(self):
        config = SynthConfig(n_instances=2000, noise_level=0.5, seed=42)
        for target in (0.2, 0.4):
            assert mc_validate_sgr(config, target_risk=target, delta=0.001, trials=1000, threads=4) <= 0.01

    @pytest.mark.slow
    def test_violation_rate_within_delta(self):
        config = SynthConfig(n_instances=2000, noise_level=0.5, seed=42)
        for target in (0.2, 0.4):
            assert mc_validate_sgr(config, target_risk=target, delta=0.1, trials=1000, threads=4) <= 0.1
