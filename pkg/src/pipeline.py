"""
One streaming pass over (instance, bundle) pairs that produces everything
the command-line tools need: scores, losses and per-strategy retrieval hits.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .config import DEFAULT_KS
from .errors import DomainError
from .retrieval import (
    AVERAGE_SAMPLE,
    AggregationStrategy,
    average_sample_hit_at_k,
    Instance,
    PredictionBundle,
    aggregate_prediction,
    hit_at_k,
    ranking_loss,
    retrieval_summary,
)
from .scoring import (
    MISSING_EMBEDDING,
    ScoreTable,
    ScoringConfig,
    assemble_table,
    check_distance_inputs,
    raise_for_missing_embeddings,
    score_instance,
)
from .selective_eval import LossSpec, instance_loss

logger = logging.getLogger(__name__)


def filter_by_size(
    instances: Iterable[Instance],
    min_candidates: Optional[int] = None,
    max_candidates: Optional[int] = None,
) -> Iterator[Instance]:
    """Keep instances whose candidate count lies in [min, max] (inclusive)."""
    for inst in instances:
        m = inst.num_candidates
        if min_candidates is not None and m < min_candidates:
            continue
        if max_candidates is not None and m > max_candidates:
            continue
        yield inst


@dataclass
class EvaluationConfig:
    scoring: ScoringConfig
    losses: List[LossSpec] = field(default_factory=lambda: [LossSpec.hit(k) for k in DEFAULT_KS])
    ks: Sequence[int] = DEFAULT_KS
    # retrieval hits are also recorded under every strategy for the summary
    summary_strategies: bool = True


@dataclass
class EvaluationResult:
    scores: ScoreTable
    losses: pd.DataFrame
    hits: pd.DataFrame

    @property
    def excluded(self) -> Dict[str, str]:
        return self.scores.excluded

    def frame(self) -> pd.DataFrame:
        """Scores and losses side by side, one row per instance."""
        return self.scores.frame.merge(self.losses, on="id", how="inner")

    def summary(self) -> pd.DataFrame:
        return retrieval_summary(self.hits.drop(columns=["id"]))


def evaluate_instance(instance: Instance, bundle: PredictionBundle, config: EvaluationConfig):
    """
    (scores, losses, hits) dicts for one instance.

    Hit losses use the ranking of ``config.scoring.strategy``; similarity
    losses use the bundle's mean prediction.
    """
    scores, ranking, sample_scores = score_instance(instance, bundle, config.scoring)

    losses = {}
    for spec in config.losses:
        losses[spec.name] = instance_loss(instance, ranking if spec.is_binary else bundle, spec)

    hits = {}
    if config.summary_strategies:
        for strategy in AggregationStrategy:
            r = (
                ranking
                if strategy is config.scoring.strategy
                else aggregate_prediction(
                    bundle, instance, strategy, config.scoring.temperature, sample_scores=sample_scores
                )
            )
            for k in config.ks:
                hits[f"{strategy.value}:hit@{k}"] = hit_at_k(r, instance.true_index, k)
            hits[f"{strategy.value}:ranking_loss"] = ranking_loss(r, instance.true_index)
        for k in config.ks:
            hits[f"{AVERAGE_SAMPLE}:hit@{k}"] = average_sample_hit_at_k(sample_scores, instance.true_index, k)
    return scores, losses, hits


def _evaluate_one(inst: Instance, bundle: Optional[PredictionBundle], config: EvaluationConfig):
    if bundle is None:
        return inst.id, None, "no prediction bundle"
    if config.scoring.needs_embeddings and bundle.embedding is None:
        return inst.id, None, MISSING_EMBEDDING
    try:
        return inst.id, evaluate_instance(inst, bundle, config), None
    except DomainError as e:
        return inst.id, None, str(e)


def evaluate(
    instances: Iterable[Instance],
    bundles: Mapping[str, PredictionBundle],
    config: EvaluationConfig,
) -> EvaluationResult:
    """
    Score every instance and record its losses, in parallel over instances.

    Output order follows ``instances`` whatever the thread count.
    """
    check_distance_inputs(config.scoring)

    results = Parallel(n_jobs=config.scoring.threads, prefer="threads")(
        delayed(_evaluate_one)(inst, bundles.get(inst.id), config) for inst in instances
    )
    raise_for_missing_embeddings([iid for iid, _, reason in results if reason == MISSING_EMBEDDING])

    table = assemble_table(
        [(iid, out[0] if out else None, reason) for iid, out, reason in results],
        config.scoring,
    )
    kept = [(iid, out) for iid, out, _ in results if out is not None]

    loss_columns = ["id", *[spec.name for spec in config.losses]]
    losses = pd.DataFrame([{"id": iid, **out[1]} for iid, out in kept], columns=loss_columns)

    hits = pd.DataFrame([{"id": iid, **out[2]} for iid, out in kept])
    if hits.empty:
        hits = pd.DataFrame(columns=["id"])

    logger.info(f"Evaluated {len(kept)} instance(s), {len(table.excluded)} excluded.")
    return EvaluationResult(scores=table, losses=losses, hits=hits)


def orient_pseudo_scores(frame: pd.DataFrame, loss_name: str, shuffles: int, seed: int) -> Dict[str, np.ndarray]:
    """
    Reference scorers for a loss column: ``oracle`` (negated loss, so the
    lowest loss is accepted first) and ``shuffle<i>`` random orderings.
    """
    losses = frame[loss_name].to_numpy(dtype=np.float64)
    out = {"oracle": -losses}
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    for i in range(shuffles):
        out[f"shuffle{i}"] = rng.permutation(losses.shape[0]).astype(np.float64)
    return out
