"""Shared fixtures: tiny hand-built instances and small synthetic configs."""

import numpy as np
import pytest

from src.retrieval import Instance, PredictionBundle
from src.synthetic import DifficultyModel, SynthConfig


def _instance(candidates, true_index=0, instance_id="inst0", meta=None):
    return Instance(
        id=instance_id,
        candidates=np.asarray(candidates, dtype=np.uint8),
        true_index=true_index,
        meta=meta or {},
    )


def _bundle(samples, instance_id="inst0", embedding=None):
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if embedding is not None:
        embedding = np.asarray(embedding, dtype=np.float64)
    return PredictionBundle(instance_id=instance_id, samples=samples, embedding=embedding)


@pytest.fixture
def make_instance():
    return _instance


@pytest.fixture
def make_bundle():
    return _bundle


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def random_pair():
    """Factory for a random (instance, bundle) with nonzero candidates."""

    def build(generator, m, d, s, instance_id="rand"):
        cands = generator.integers(0, 2, size=(m, d)).astype(np.uint8)
        cands[np.arange(m), generator.integers(0, d, size=m)] = 1
        samples = generator.random((s, d))
        return _instance(cands, int(generator.integers(m)), instance_id), _bundle(samples, instance_id)

    return build


@pytest.fixture
def small_synth():
    return SynthConfig(
        n_instances=24,
        num_bits=64,
        m_min=1,
        m_max=8,
        num_samples=3,
        noise_level=0.5,
        seed=7,
        difficulty_model=DifficultyModel.PLANTED_CONFIDENCE,
    )
