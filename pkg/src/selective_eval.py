"""
Selective-risk evaluation: losses, selective risk, risk-coverage curves,
AURC with oracle / random baselines, and score correlation analysis.

All quantities are empirical estimates over the given instances.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from .config import BINARIZE_THRESHOLD
from .errors import DomainError
from .retrieval import CandidateRanking, Instance, PredictionBundle, hit_at_k

logger = logging.getLogger(__name__)



# LOSS SPECIFICATION


class SimilarityMeasure(str, Enum):
    TANIMOTO = "tanimoto"
    COSINE = "cosine"
    HAMMING = "hamming"


class PredictionMode(str, Enum):
    CONTINUOUS = "continuous"
    DISCRETE = "discrete"


@dataclass(frozen=True)
class LossSpec:
    """
    Either a Hit@K miss indicator (``kind="hit"``) or a fingerprint
    similarity loss (``kind="similarity"``).
    """

    kind: str
    k: Optional[int] = None
    measure: Optional[SimilarityMeasure] = None
    mode: Optional[PredictionMode] = None

    def __post_init__(self):
        if self.kind == "hit":
            if self.k is None or int(self.k) < 1:
                raise DomainError(f"Hit loss needs K >= 1, got {self.k}.")
        elif self.kind == "similarity":
            if self.measure is None or self.mode is None:
                raise DomainError("Similarity loss needs a measure and a mode.")
            if self.measure is SimilarityMeasure.HAMMING and self.mode is not PredictionMode.DISCRETE:
                raise DomainError("Hamming loss is only defined for discrete (binarized) predictions.")
        else:
            raise DomainError(f"Unknown loss kind '{self.kind}'.")

    @classmethod
    def hit(cls, k: int) -> "LossSpec":
        return cls(kind="hit", k=int(k))

    @classmethod
    def similarity(cls, measure, mode) -> "LossSpec":
        return cls(
            kind="similarity",
            measure=SimilarityMeasure(measure),
            mode=PredictionMode(mode),
        )

    @classmethod
    def parse(cls, text: str) -> "LossSpec":
        """
        ``hit@5`` | ``tanimoto`` | ``cosine:discrete`` | ``hamming``.
        Similarity measures default to continuous mode (hamming: discrete).
        """
        token = str(text).strip().lower()
        if token.startswith("hit@"):
            try:
                return cls.hit(int(token[4:]))
            except ValueError:
                raise DomainError(f"Bad hit loss '{text}', expected hit@<K>.")

        measure, _, mode = token.partition(":")
        try:
            measure = SimilarityMeasure(measure)
        except ValueError:
            raise DomainError(
                f"Unknown loss '{text}'. Use hit@<K>, tanimoto[:mode], cosine[:mode] or hamming."
            )
        if not mode:
            mode = "discrete" if measure is SimilarityMeasure.HAMMING else "continuous"
        try:
            mode = PredictionMode(mode)
        except ValueError:
            raise DomainError(f"Unknown prediction mode '{mode}' (continuous or discrete).")
        return cls.similarity(measure, mode)

    @property
    def name(self) -> str:
        if self.kind == "hit":
            return f"hit@{self.k}"
        suffix = "cont" if self.mode is PredictionMode.CONTINUOUS else "disc"
        return f"{self.measure.value}_{suffix}"

    @property
    def is_binary(self) -> bool:
        return self.kind == "hit"



# SIMILARITY MEASURES


def tanimoto_similarity(a: np.ndarray, y: np.ndarray) -> float:
    """sum(a*y) / (sum(a) + sum(y) - sum(a*y)); works for continuous a."""
    a = np.asarray(a, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inter = float(a @ y)
    union = float(a.sum() + y.sum() - inter)
    if union <= 0.0:
        # both empty
        return 1.0
    return inter / union


def cosine_fingerprint_similarity(a: np.ndarray, y: np.ndarray) -> float:
    """Cosine similarity; an all-zero prediction has similarity 0."""
    a = np.asarray(a, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    denom = float(np.linalg.norm(a) * np.linalg.norm(y))
    if denom == 0.0:
        return 0.0
    return float(a @ y) / denom


def hamming_distance(a: np.ndarray, y: np.ndarray) -> float:
    """Fraction of differing bits."""
    a = np.asarray(a)
    y = np.asarray(y)
    return float(np.mean(a != y))



# LOSSES + SELECTIVE RISK


def instance_loss(
    instance: Instance,
    prediction: Union[CandidateRanking, PredictionBundle, np.ndarray],
    spec: LossSpec,
) -> float:
    """
    Loss in [0, 1] of one instance.

    Hit losses need a CandidateRanking. Similarity losses need a fingerprint
    prediction: a PredictionBundle (theta_bar is used, binarized for the
    discrete mode) or a raw probability vector.
    """
    if spec.kind == "hit":
        if not isinstance(prediction, CandidateRanking):
            raise DomainError("Hit@K loss needs a CandidateRanking.")
        return float(1 - hit_at_k(prediction, instance.true_index, spec.k))

    discrete = spec.mode is PredictionMode.DISCRETE
    if isinstance(prediction, PredictionBundle):
        theta = prediction.binarized() if discrete else prediction.mean_theta()
    elif isinstance(prediction, CandidateRanking):
        raise DomainError(f"{spec.name} loss needs a fingerprint prediction, not a ranking.")
    else:
        theta = np.asarray(prediction, dtype=np.float64)
        if discrete:
            theta = theta > BINARIZE_THRESHOLD
    theta = np.asarray(theta, dtype=np.float64)

    truth = instance.true_fingerprint
    if theta.shape != truth.shape:
        raise DomainError(
            f"Instance '{instance.id}': prediction has {theta.shape[0]} bits, truth has {truth.shape[0]}."
        )
    if spec.measure is SimilarityMeasure.TANIMOTO:
        return 1.0 - tanimoto_similarity(theta, truth)
    if spec.measure is SimilarityMeasure.COSINE:
        return 1.0 - cosine_fingerprint_similarity(theta, truth)
    return hamming_distance(theta, truth)


def selective_risk(losses: np.ndarray, accepted: np.ndarray) -> float:
    """Mean loss over accepted instances."""
    losses = np.asarray(losses, dtype=np.float64)
    accepted = np.asarray(accepted, dtype=bool)
    if losses.shape != accepted.shape:
        raise DomainError(f"losses {losses.shape} and mask {accepted.shape} differ in shape.")
    if not accepted.any():
        raise DomainError("Selective risk is undefined at coverage 0 (nothing accepted).")
    return float(losses[accepted].mean())


def coverage_at_threshold(kappa: np.ndarray, tau: float) -> float:
    """Fraction of instances with kappa >= tau."""
    kappa = np.asarray(kappa, dtype=np.float64)
    if kappa.size == 0:
        return 0.0
    return float(np.mean(kappa >= tau))



# RISK-COVERAGE CURVE


@dataclass
class RiskCoverageCurve:
    """
    Curve points at every prefix m = 1..n of the acceptance order
    (coverage m/n), plus AURC and its oracle / random references.
    """

    coverage: np.ndarray
    risk: np.ndarray
    aurc: float
    aurc_oracle: float
    aurc_random: float
    rel_aurc: float
    degenerate: bool = False

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"coverage": self.coverage, "risk": self.risk})

    def summary(self) -> Dict[str, float]:
        return {
            "n": int(self.coverage.shape[0]),
            "aurc": self.aurc,
            "aurc_oracle": self.aurc_oracle,
            "aurc_random": self.aurc_random,
            "rel_aurc": self.rel_aurc,
            "degenerate": bool(self.degenerate),
        }


def acceptance_order(kappa: np.ndarray) -> np.ndarray:
    """Indices by descending kappa, ties by ascending original index."""
    kappa = np.asarray(kappa, dtype=np.float64)
    return np.lexsort((np.arange(kappa.shape[0]), -kappa))


def _prefix_risks(sorted_losses: np.ndarray) -> np.ndarray:
    m = np.arange(1, sorted_losses.shape[0] + 1, dtype=np.float64)
    return np.cumsum(sorted_losses) / m


def _area(coverage: np.ndarray, risk: np.ndarray) -> float:
    # the curve is held flat below the first point so a constant risk r
    # integrates to exactly r
    x = np.concatenate(([0.0], coverage))
    y = np.concatenate(([risk[0]], risk))
    return float(trapezoid(y, x))


def risk_coverage_curve(losses: np.ndarray, kappa: np.ndarray) -> RiskCoverageCurve:
    """
    Risk-coverage curve of ``kappa`` and its AURC / relAURC.

    The oracle accepts by ascending loss; the random baseline is the overall
    mean loss. relAURC = (AURC - oracle) / (random - oracle); when all losses
    are equal the denominator vanishes and relAURC is reported as 0 with
    ``degenerate=True``.
    """
    losses = np.asarray(losses, dtype=np.float64)
    kappa = np.asarray(kappa, dtype=np.float64)
    if losses.shape != kappa.shape or losses.ndim != 1:
        raise DomainError(f"losses {losses.shape} and kappa {kappa.shape} must be equal-length vectors.")
    n = losses.shape[0]
    if n < 1:
        raise DomainError("Risk-coverage curve needs at least one instance.")

    coverage = np.arange(1, n + 1, dtype=np.float64) / n
    risk = _prefix_risks(losses[acceptance_order(kappa)])
    aurc = _area(coverage, risk)

    oracle_order = np.lexsort((np.arange(n), losses))
    aurc_oracle = _area(coverage, _prefix_risks(losses[oracle_order]))
    aurc_random = float(losses.mean())

    span = aurc_random - aurc_oracle
    if span <= 0.0:
        logger.warning("All losses are equal; relAURC is undefined and reported as 0.")
        rel, degenerate = 0.0, True
    else:
        rel, degenerate = (aurc - aurc_oracle) / span, False

    return RiskCoverageCurve(
        coverage=coverage,
        risk=risk,
        aurc=aurc,
        aurc_oracle=aurc_oracle,
        aurc_random=aurc_random,
        rel_aurc=rel,
        degenerate=degenerate,
    )


def coverage_at_risk(
    losses: np.ndarray,
    kappa: np.ndarray,
    target_risk: float,
    curve: Optional[RiskCoverageCurve] = None,
) -> float:
    """
    Largest empirical coverage whose selective risk is <= target_risk.

    Uncertified counterpart of SGR; 0 when no prefix qualifies. Pass a
    precomputed ``curve`` to skip rebuilding it.
    """
    if curve is None:
        curve = risk_coverage_curve(losses, kappa)
    ok = curve.risk <= target_risk
    return float(curve.coverage[ok].max()) if ok.any() else 0.0


def coverage_column(target_risk: float) -> str:
    """Summary column name for coverage at a target risk, e.g. ``coverage@0.1``."""
    return f"coverage@{float(target_risk):g}"


def aurc_table(
    frame: pd.DataFrame,
    score_names: Sequence[str],
    loss_names: Sequence[str],
    target_risks: Sequence[float] = (),
) -> pd.DataFrame:
    """
    One row per (score, loss) with AURC, oracle, random and relAURC.

    ``frame`` holds one row per instance with a column for every score and
    every loss. Each target risk adds a ``coverage@r`` column
    (see coverage_at_risk).
    """
    missing = [c for c in [*score_names, *loss_names] if c not in frame.columns]
    if missing:
        raise DomainError(f"Columns not found in the evaluation table: {missing}")

    rows = []
    for loss_name in loss_names:
        loss_values = frame[loss_name].to_numpy(dtype=np.float64)
        for score_name in score_names:
            kappa = frame[score_name].to_numpy(dtype=np.float64)
            curve = risk_coverage_curve(loss_values, kappa)
            row = {"score": score_name, "loss": loss_name, **curve.summary()}
            for r in target_risks:
                row[coverage_column(r)] = coverage_at_risk(loss_values, kappa, r, curve=curve)
            rows.append(row)
    return pd.DataFrame(
        rows,
        columns=[
            "score", "loss", "n", "aurc", "aurc_oracle", "aurc_random", "rel_aurc", "degenerate",
            *[coverage_column(r) for r in target_risks],
        ],
    )



# SCORE CORRELATIONS


def spearman_matrix(table) -> pd.DataFrame:
    """
    Pairwise Spearman rank correlations (average ranks for ties).

    Accepts a ScoreTable or a DataFrame; non-numeric columns (``id``) are
    ignored. A constant column has no defined correlation: its row and column
    are NaN, including the diagonal.
    """
    frame = table.frame if hasattr(table, "frame") else pd.DataFrame(table)
    numeric = frame.drop(columns=[c for c in ("id",) if c in frame.columns])
    numeric = numeric.apply(pd.to_numeric, errors="coerce")
    if len(numeric) < 2:
        raise DomainError("Spearman correlations need at least 2 instances.")

    corr = numeric.corr(method="spearman")

    constant = numeric.nunique(dropna=True) <= 1
    if constant.any():
        logger.warning(
            f"Zero-variance score column(s) {list(constant[constant].index)}; correlations set to NaN."
        )
    values = corr.to_numpy(copy=True)
    values = np.clip((values + values.T) / 2.0, -1.0, 1.0)
    for i, name in enumerate(corr.columns):
        values[i, i] = math.nan if constant[name] else 1.0
        if constant[name]:
            values[i, :] = math.nan
            values[:, i] = math.nan
    return pd.DataFrame(values, index=corr.index, columns=corr.columns)



# CANDIDATE-SET CHARACTERISATION


def mean_pairwise_similarity(instance: Instance) -> float:
    """Mean cosine similarity over distinct candidate pairs (NaN for M = 1)."""
    m = instance.num_candidates
    if m < 2:
        return math.nan
    unit = instance.candidates.astype(np.float64) / instance.candidate_norms[:, None]
    gram = unit @ unit.T
    off_diagonal = gram.sum() - np.trace(gram)
    return float(off_diagonal / (m * (m - 1)))


def candidate_statistics(instance: Instance) -> Dict[str, float]:
    mass = instance.meta.get("precursor_mass") if instance.meta else None
    return {
        "id": instance.id,
        "num_candidates": instance.num_candidates,
        "mean_pairwise_similarity": mean_pairwise_similarity(instance),
        "precursor_mass": float(mass) if mass is not None else math.nan,
    }


def candidate_statistics_table(instances) -> pd.DataFrame:
    rows: List[Dict[str, float]] = [candidate_statistics(inst) for inst in instances]
    return pd.DataFrame(
        rows, columns=["id", "num_candidates", "mean_pairwise_similarity", "precursor_mass"]
    )
