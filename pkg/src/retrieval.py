"""
Domain types and deterministic retrieval mathematics.

A spectrum's prediction is a vector of bit probabilities theta (length D).
Candidates are binary fingerprints; they are scored by cosine similarity,
turned into a candidate distribution by a temperature-scaled softmax and
ranked by descending score (ties: ascending candidate index).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

from .config import BINARIZE_THRESHOLD, DEFAULT_CANDIDATE_CAP, PROBABILITY_SUM_TOL
from .errors import DomainError

logger = logging.getLogger(__name__)


# DOMAIN TYPES


class AggregationStrategy(str, Enum):
    """How S posterior samples are combined into one candidate ranking."""

    FINGERPRINT_MEAN = "fingerprint_mean"
    SCORE_MEAN = "score_mean"
    PROB_MEAN = "prob_mean"

    @classmethod
    def parse(cls, text: str) -> "AggregationStrategy":
        key = str(text).strip().lower().replace("-", "_")
        aliases = {
            "fingerprint": cls.FINGERPRINT_MEAN,
            "fp": cls.FINGERPRINT_MEAN,
            "score": cls.SCORE_MEAN,
            "prob": cls.PROB_MEAN,
            "probability": cls.PROB_MEAN,
        }
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            valid = ", ".join(s.value for s in cls)
            raise DomainError(f"Unknown aggregation strategy '{text}'. Use one of: {valid}.")


# Summary label of the per-sample baseline (each sample ranks on its own)
AVERAGE_SAMPLE = "avg_sample"


@dataclass
class Instance:
    """
    One spectrum's candidate set.

    candidates : (M, D) uint8 matrix of 0/1 fingerprints
    true_index : row of the true molecule in ``candidates``
    """

    id: str
    candidates: np.ndarray
    true_index: int
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def num_candidates(self) -> int:
        return int(self.candidates.shape[0])

    @property
    def num_bits(self) -> int:
        return int(self.candidates.shape[1])

    @property
    def true_fingerprint(self) -> np.ndarray:
        return self.candidates[self.true_index]

    @cached_property
    def candidate_norms(self) -> np.ndarray:
        return np.sqrt(self.candidates.sum(axis=1, dtype=np.float64))


@dataclass
class PredictionBundle:
    """
    S posterior samples of bit probabilities for one instance.

    samples   : (S, D) float64 matrix with entries in [0, 1]
    embedding : optional penultimate-layer representation (d_h,)
    """

    instance_id: str
    samples: np.ndarray
    embedding: Optional[np.ndarray] = None

    @property
    def num_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def num_bits(self) -> int:
        return int(self.samples.shape[1])

    def mean_theta(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def binarized(self) -> np.ndarray:
        """Discrete prediction 1[theta_bar > 0.5]."""
        return (self.mean_theta() > BINARIZE_THRESHOLD).astype(np.uint8)


@dataclass
class CandidateRanking:
    """
    scores : similarity per candidate (ranking key of the strategy)
    probs  : candidate distribution, sums to 1
    order  : candidate indices sorted by descending score, ties by index
    """

    scores: np.ndarray
    probs: np.ndarray
    order: np.ndarray

    @property
    def num_candidates(self) -> int:
        return int(self.scores.shape[0])


# VALIDATION


def validate_instance(
    instance: Instance,
    num_bits: Optional[int] = None,
    cap: Optional[int] = DEFAULT_CANDIDATE_CAP,
) -> None:
    """
    Check the Instance invariants. ``cap=None`` disables the size limit.
    """
    cands = instance.candidates
    if cands.ndim != 2 or cands.shape[0] < 1:
        raise DomainError(f"Instance '{instance.id}' needs at least one candidate.")
    if num_bits is not None and cands.shape[1] != num_bits:
        raise DomainError(
            f"Instance '{instance.id}' has fingerprints of length {cands.shape[1]}, "
            f"expected {num_bits}."
        )
    if cap is not None and cands.shape[0] > cap:
        raise DomainError(
            f"Instance '{instance.id}' has {cands.shape[0]} candidates, above the cap of {cap}."
        )
    if not 0 <= instance.true_index < cands.shape[0]:
        raise DomainError(
            f"Instance '{instance.id}': true_index {instance.true_index} outside "
            f"[0, {cands.shape[0]})."
        )
    empty = np.flatnonzero(cands.sum(axis=1) == 0)
    if empty.size:
        raise DomainError(
            f"Instance '{instance.id}': candidate(s) {empty.tolist()} have no bits set."
        )


def validate_bundle(bundle: PredictionBundle, num_bits: Optional[int] = None) -> None:
    samples = bundle.samples
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise DomainError(f"Bundle '{bundle.instance_id}' has no posterior samples.")
    if num_bits is not None and samples.shape[1] != num_bits:
        raise DomainError(
            f"Bundle '{bundle.instance_id}' has {samples.shape[1]} bits, expected {num_bits}."
        )
    if not np.all(np.isfinite(samples)):
        raise DomainError(f"Bundle '{bundle.instance_id}' has a NaN or infinite probability.")
    if samples.size and (samples.min() < 0.0 or samples.max() > 1.0):
        raise DomainError(
            f"Bundle '{bundle.instance_id}' has a probability outside [0, 1] "
            f"(min {samples.min()!r}, max {samples.max()!r})."
        )
    if bundle.embedding is not None and not np.all(np.isfinite(bundle.embedding)):
        raise DomainError(f"Bundle '{bundle.instance_id}' has a NaN or infinite embedding value.")


# SIMILARITY + CANDIDATE DISTRIBUTION


def cosine_similarity(theta: np.ndarray, c: np.ndarray) -> float:
    """
    Cosine similarity between a probability vector and one fingerprint.

    Raises
    ------
    DomainError
        If the lengths differ or either vector has zero norm.
    """
    theta = np.asarray(theta, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if theta.shape != c.shape:
        raise DomainError(f"Length mismatch: theta has {theta.shape}, fingerprint has {c.shape}.")

    norm_theta = np.linalg.norm(theta)
    norm_c = np.linalg.norm(c)
    if norm_theta == 0.0 or norm_c == 0.0:
        raise DomainError("Cosine similarity is undefined for a zero-norm vector.")

    return float(theta @ c / (norm_theta * norm_c))


def candidate_scores(thetas: np.ndarray, instance: Instance) -> np.ndarray:
    """
    Cosine similarity of one theta (D,) or several (S, D) against all candidates.

    Returns (M,) or (S, M).
    """
    thetas = np.asarray(thetas, dtype=np.float64)
    single = thetas.ndim == 1
    mat = np.atleast_2d(thetas)

    if mat.shape[1] != instance.num_bits:
        raise DomainError(
            f"Instance '{instance.id}': prediction has {mat.shape[1]} bits, "
            f"fingerprints have {instance.num_bits}."
        )

    theta_norms = np.linalg.norm(mat, axis=1)
    if np.any(theta_norms == 0.0):
        raise DomainError(
            f"Instance '{instance.id}': all-zero probability vector, cosine undefined."
        )
    if np.any(instance.candidate_norms == 0.0):
        raise DomainError(f"Instance '{instance.id}': all-zero candidate fingerprint.")

    dots = mat @ instance.candidates.T.astype(np.float64)
    scores = dots / np.outer(theta_norms, instance.candidate_norms)
    return scores[0] if single else scores


def candidate_distribution(scores: np.ndarray, temperature: float) -> np.ndarray:
    """
    Temperature-scaled softmax over candidate scores, row-wise for 2-D input.

    Max-subtraction keeps exp() in range; each row sums to 1.
    """
    if not temperature > 0:
        raise DomainError(f"Temperature must be positive, got {temperature}.")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0 or scores.shape[-1] == 0:
        raise DomainError("Candidate distribution needs at least one score.")

    z = scores / temperature
    z = z - z.max(axis=-1, keepdims=True)
    weights = np.exp(z)
    return weights / weights.sum(axis=-1, keepdims=True)


# RANKING


def ranking_order(scores: np.ndarray) -> np.ndarray:
    """
    Indices by descending score; equal scores keep ascending index.
    Works row-wise on a 2-D array.
    """
    # stable sort of the negated scores preserves index order within ties
    return np.argsort(-np.asarray(scores, dtype=np.float64), axis=-1, kind="stable")


def rank_positions(scores: np.ndarray) -> np.ndarray:
    """
    0-based rank position of every candidate (inverse of ``ranking_order``).
    """
    order = ranking_order(scores)
    positions = np.empty_like(order)
    if order.ndim == 1:
        positions[order] = np.arange(order.shape[0])
    else:
        rows = np.arange(order.shape[0])[:, None]
        positions[rows, order] = np.arange(order.shape[1])[None, :]
    return positions


def _ranking_from_scores(scores: np.ndarray, temperature: float) -> CandidateRanking:
    return CandidateRanking(
        scores=scores,
        probs=candidate_distribution(scores, temperature),
        order=ranking_order(scores),
    )


def rank_candidates(instance: Instance, theta: np.ndarray, temperature: float) -> CandidateRanking:
    """
    Score every candidate against ``theta`` and rank them.
    """
    scores = candidate_scores(theta, instance)
    return _ranking_from_scores(scores, temperature)


def true_rank(ranking: CandidateRanking, true_index: int) -> int:
    """0-based position of the true candidate in ``ranking.order``."""
    if not 0 <= true_index < ranking.num_candidates:
        raise DomainError(
            f"true_index {true_index} outside [0, {ranking.num_candidates})."
        )
    return int(np.flatnonzero(ranking.order == true_index)[0])


def hit_at_k(ranking: CandidateRanking, true_index: int, k: int) -> int:
    """
    1 if the true candidate is among the first min(K, M) ranked candidates.
    """
    if k < 1:
        raise DomainError(f"K must be a positive integer, got {k}.")
    return int(true_rank(ranking, true_index) < k)


def average_sample_hit_at_k(sample_scores: np.ndarray, true_index: int, k: int) -> float:
    """
    Mean Hit@K over the S samples, each ranking the candidates on its own.

    ``sample_scores`` is the (S, M) similarity matrix. This is the
    single-member baseline the aggregation strategies are compared against.
    """
    if k < 1:
        raise DomainError(f"K must be a positive integer, got {k}.")
    sample_scores = np.atleast_2d(np.asarray(sample_scores, dtype=np.float64))
    if not 0 <= true_index < sample_scores.shape[1]:
        raise DomainError(f"true_index {true_index} outside [0, {sample_scores.shape[1]}).")
    positions = rank_positions(sample_scores)[:, true_index]
    return float((positions < k).mean())


def aggregate_prediction(
    bundle: PredictionBundle,
    instance: Instance,
    strategy: AggregationStrategy,
    temperature: float,
    sample_scores: Optional[np.ndarray] = None,
) -> CandidateRanking:
    """
    Combine the posterior samples into one ranking.

    FINGERPRINT_MEAN : rank by sim(theta_bar, c_j)
    SCORE_MEAN       : rank by the mean of per-sample similarities
    PROB_MEAN        : rank by the mean of per-sample candidate distributions;
                       ``scores`` then holds that averaged distribution

    ``sample_scores`` may pass precomputed (S, M) similarities to avoid
    recomputing them.
    """
    if bundle.samples.ndim != 2 or bundle.num_samples < 1:
        raise DomainError(f"Bundle '{bundle.instance_id}' has no posterior samples.")

    strategy = AggregationStrategy(strategy)

    if strategy is AggregationStrategy.FINGERPRINT_MEAN:
        return rank_candidates(instance, bundle.mean_theta(), temperature)

    if sample_scores is None:
        sample_scores = candidate_scores(bundle.samples, instance)

    if strategy is AggregationStrategy.SCORE_MEAN:
        return _ranking_from_scores(sample_scores.mean(axis=0), temperature)

    probs = candidate_distribution(sample_scores, temperature).mean(axis=0)
    probs = probs / probs.sum()
    return CandidateRanking(scores=probs, probs=probs, order=ranking_order(probs))


# DIAGNOSTIC LOSS


def ranking_loss(ranking: CandidateRanking, true_index: int) -> float:
    """
    Negative log-likelihood of the true candidate, -log p_true (nats).

    Returns +inf (and logs a warning) when the true candidate's probability
    underflows to zero.
    """
    if not 0 <= true_index < ranking.num_candidates:
        raise DomainError(
            f"true_index {true_index} outside [0, {ranking.num_candidates})."
        )
    if abs(float(ranking.probs.sum()) - 1.0) > PROBABILITY_SUM_TOL:
        raise DomainError("Ranking probabilities do not sum to 1.")

    p_true = float(ranking.probs[true_index])
    if p_true <= 0.0:
        logger.warning("True candidate has zero probability; ranking loss set to +inf.")
        return math.inf
    return 0.0 - math.log(p_true)


# RETRIEVAL PERFORMANCE SUMMARY


def retrieval_summary(hits: pd.DataFrame) -> pd.DataFrame:
    """
    Aggregate per-instance retrieval columns into one row per strategy.

    ``hits`` has columns named ``<strategy>:hit@<K>`` and
    ``<strategy>:ranking_loss``, plus ``avg_sample:hit@<K>`` for the
    per-sample baseline. Returns columns strategy, hit@K..., ranking_loss.
    """
    rows = []
    for label in [*(s.value for s in AggregationStrategy), AVERAGE_SAMPLE]:
        prefix = f"{label}:"
        cols = [c for c in hits.columns if str(c).startswith(prefix)]
        if not cols:
            continue
        row: Dict[str, Any] = {"strategy": label, "n": int(len(hits))}
        for col in cols:
            name = col[len(prefix):]
            values = hits[col].to_numpy(dtype=np.float64)
            if name == "ranking_loss":
                finite = values[np.isfinite(values)]
                row[name] = float(finite.mean()) if finite.size else math.nan
                row["ranking_loss_infinite"] = int((~np.isfinite(values)).sum())
            else:
                row[name] = float(values.mean()) if values.size else math.nan
        rows.append(row)
    return pd.DataFrame(rows)
