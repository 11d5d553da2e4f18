"""
Scoring functions kappa for selective retrieval.

Every score is oriented so that HIGHER means MORE CONFIDENT:

    conf, gap                     first-order, from one candidate ranking
    bit_tot / bit_al / bit_ep     entropy decomposition over fingerprint bits
    ret_tot / ret_al / ret_ep     entropy decomposition over candidate distributions
    rank_var@K                    negated rank variance of the top-K set
    knn, mah                      negated distances in embedding space
    num_candidates                set size baseline (not negated)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import joblib
import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import entr
from sklearn.covariance import EmpiricalCovariance
from sklearn.neighbors import NearestNeighbors
from sklearn.preprocessing import normalize

from .config import (
    DEFAULT_KNN_NEIGHBORS,
    DEFAULT_KS,
    DEFAULT_TEMPERATURE,
    EMBEDDING_INDEX_FILE,
    MAHALANOBIS_RIDGE,
)
from .errors import DomainError, NumericError
from .retrieval import (
    AggregationStrategy,
    CandidateRanking,
    Instance,
    PredictionBundle,
    aggregate_prediction,
    candidate_distribution,
    candidate_scores,
    rank_positions,
)

logger = logging.getLogger(__name__)



# SCORE REGISTRY


BASE_SCORES = [
    "conf",
    "gap",
    "bit_tot",
    "bit_al",
    "bit_ep",
    "ret_tot",
    "ret_al",
    "ret_ep",
    "rank_var",
    "knn",
    "mah",
]

DISTANCE_SCORES = ("knn", "mah")

SCORE_GROUPS = {
    "retrieval": ("conf", "gap", "ret_tot", "ret_al", "ret_ep", "rank_var"),
    "fingerprint": ("bit_tot", "bit_al", "bit_ep"),
    "other": ("knn", "mah", "num_candidates"),
}


def parse_score_names(text: Optional[str], ks: Sequence[int] = DEFAULT_KS) -> List[str]:
    """
    Turn ``"conf,gap,rank_var"`` into concrete column names.

    ``rank_var`` expands to ``rank_var@K`` for every K in ``ks``;
    ``rank_var@5`` selects one K. ``None``/``"all"`` means every score.
    """
    if text is None or str(text).strip().lower() == "all":
        tokens = list(BASE_SCORES)
    else:
        tokens = [t.strip() for t in str(text).split(",") if t.strip()]

    names: List[str] = []
    for token in tokens:
        if token == "rank_var":
            names.extend(f"rank_var@{k}" for k in ks)
        elif token.startswith("rank_var@"):
            try:
                k = int(token.split("@", 1)[1])
            except ValueError:
                raise DomainError(f"Bad rank-variance score '{token}', expected rank_var@<K>.")
            if k < 1:
                raise DomainError(f"Bad rank-variance score '{token}': K must be >= 1.")
            names.append(token)
        elif token in BASE_SCORES or token == "num_candidates":
            names.append(token)
        else:
            raise DomainError(
                f"Unknown score '{token}'. Available: {', '.join(BASE_SCORES)}, rank_var@<K>."
            )

    # keep first occurrence order
    return list(dict.fromkeys(names))


def score_group(name: str) -> str:
    base = name.split("@", 1)[0]
    for group, members in SCORE_GROUPS.items():
        if base in members:
            return group
    return "other"



# DOMAIN TYPES


class Decomposition(NamedTuple):
    total: float
    aleatoric: float
    epistemic: float


@dataclass
class ScoreTable:
    """
    Per-instance scores. ``frame`` has columns id, num_candidates and one
    column per requested score; ``excluded`` maps instance id -> reason.
    """

    frame: pd.DataFrame
    excluded: Dict[str, str] = field(default_factory=dict)

    @property
    def score_names(self) -> List[str]:
        return [c for c in self.frame.columns if c != "id"]

    def column(self, name: str) -> np.ndarray:
        if name not in self.frame.columns:
            raise DomainError(f"Score '{name}' not in table (have: {self.score_names}).")
        return self.frame[name].to_numpy(dtype=np.float64)

    def __len__(self) -> int:
        return int(len(self.frame))


@dataclass(frozen=True)
class TrainEmbeddingIndex:
    """
    Training representations for the distance scores.

    Rows are l2-normalized (unless built with ``normalize_rows=False``); the
    covariance already includes the ridge ``eps * I``.
    """

    embeddings: np.ndarray
    mean: np.ndarray
    covariance: np.ndarray
    cholesky: Tuple[np.ndarray, bool]
    neighbors: NearestNeighbors
    ridge: float

    @property
    def size(self) -> int:
        return int(self.embeddings.shape[0])

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    @classmethod
    def from_embeddings(
        cls,
        matrix: np.ndarray,
        eps: float = MAHALANOBIS_RIDGE,
        normalize_rows: bool = True,
    ) -> "TrainEmbeddingIndex":
        """
        Build the index from an (N, d_h) matrix of training embeddings.

        Raises
        ------
        DomainError
            Empty matrix or zero-norm rows.
        NumericError
            Covariance still not positive definite after the ridge.
        """
        X = np.asarray(matrix, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DomainError(f"Training embeddings must be a non-empty 2-D matrix, got {X.shape}.")
        if not np.all(np.isfinite(X)):
            raise DomainError("Training embeddings contain NaN or infinite values.")

        if normalize_rows:
            norms = np.linalg.norm(X, axis=1)
            if np.any(norms == 0.0):
                raise DomainError(
                    f"{int((norms == 0.0).sum())} training embedding(s) have zero norm."
                )
            X = normalize(X, norm="l2")

        # population covariance (1/N), as in the Mahalanobis definition
        estimator = EmpiricalCovariance(assume_centered=False).fit(X)
        mean = estimator.location_
        cov = estimator.covariance_ + eps * np.eye(X.shape[1])

        try:
            chol = cho_factor(cov, lower=True)
        except LinAlgError as e:
            raise NumericError(
                f"Cholesky factorization of the training covariance failed after adding "
                f"ridge eps={eps} (N={X.shape[0]}, d_h={X.shape[1]}): {e}. "
                f"Increase the ridge or check the embeddings for degenerate directions."
            )

        neighbors = NearestNeighbors(algorithm="brute", metric="euclidean").fit(X)
        logger.info(f"Embedding index built: N={X.shape[0]}, d_h={X.shape[1]}, ridge={eps}.")
        return cls(
            embeddings=X,
            mean=mean,
            covariance=cov,
            cholesky=chol,
            neighbors=neighbors,
            ridge=eps,
        )

    def save(self, path=EMBEDDING_INDEX_FILE) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        joblib.dump(self, path)

    @staticmethod
    def load(path=EMBEDDING_INDEX_FILE) -> "TrainEmbeddingIndex":
        index = joblib.load(path)
        if not isinstance(index, TrainEmbeddingIndex):
            raise DomainError(f"{path} does not contain a TrainEmbeddingIndex.")
        return index


@dataclass
class ScoringConfig:
    """What compute_score_table computes and how."""

    scores: List[str] = field(default_factory=lambda: parse_score_names(None))
    strategy: AggregationStrategy = AggregationStrategy.SCORE_MEAN
    temperature: float = DEFAULT_TEMPERATURE
    knn_neighbors: int = DEFAULT_KNN_NEIGHBORS
    index: Optional[TrainEmbeddingIndex] = None
    threads: int = 1

    @property
    def needs_embeddings(self) -> bool:
        return any(name in DISTANCE_SCORES for name in self.scores)

    @property
    def rank_variance_ks(self) -> List[int]:
        return [int(n.split("@", 1)[1]) for n in self.scores if n.startswith("rank_var@")]



# FIRST-ORDER SCORES


def score_confidence(ranking: CandidateRanking) -> float:
    """Maximum candidate probability."""
    return float(ranking.probs.max())


def score_gap(ranking: CandidateRanking) -> float:
    """
    s_(1) - s_(2). A singleton candidate set is compared against an absent
    runner-up of score 0.

    The gap is taken on ``ranking.scores``, so under prob_mean aggregation it
    is a difference of averaged candidate probabilities, not of similarities.
    """
    ordered = ranking.scores[ranking.order]
    if ordered.shape[0] == 1:
        return float(ordered[0])
    return float(ordered[0] - ordered[1])



# SECOND-ORDER SCORES


def _binary_entropy(p: np.ndarray) -> np.ndarray:
    # entr(x) = -x log x with entr(0) = 0
    return entr(p) + entr(1.0 - p)


def bitwise_decomposition(bundle: PredictionBundle, clamp: bool = True) -> Decomposition:
    """
    Entropy decomposition applied to each fingerprint bit and summed.

    Per bit d:  u_tot = H(mean_s theta_sd),  u_al = mean_s H(theta_sd),
    u_ep = u_tot - u_al (binary entropy, nats). Returns the negated sums.
    With ``clamp`` a tiny negative epistemic part (round-off) becomes 0.
    """
    samples = np.asarray(bundle.samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 1 or samples.shape[1] < 1:
        raise DomainError(f"Bundle '{bundle.instance_id}' needs S >= 1 samples of D >= 1 bits.")

    u_tot = float(_binary_entropy(samples.mean(axis=0)).sum())
    u_al = float(_binary_entropy(samples).sum(axis=1).mean())
    return _negated(u_tot, u_al, clamp)


def _negated(u_tot: float, u_al: float, clamp: bool) -> Decomposition:
    u_ep = u_tot - u_al
    if clamp and u_ep <= 0.0:
        # keeps total = aleatoric + epistemic exact
        return Decomposition(total=-u_tot, aleatoric=-u_tot, epistemic=0.0)
    return Decomposition(total=-u_tot, aleatoric=-u_al, epistemic=-u_ep)


def retrieval_decomposition(
    bundle: PredictionBundle,
    instance: Instance,
    temperature: float = DEFAULT_TEMPERATURE,
    clamp: bool = True,
    sample_scores: Optional[np.ndarray] = None,
) -> Decomposition:
    """
    Entropy decomposition of the candidate distributions induced by each sample.

    total     = sum_j pbar_j log pbar_j
    aleatoric = mean_s sum_j p_sj log p_sj
    epistemic = total - aleatoric   (minus the mutual information, in [-log S, 0])
    """
    if sample_scores is None:
        sample_scores = candidate_scores(bundle.samples, instance)
    probs = candidate_distribution(sample_scores, temperature)

    u_tot = float(entr(probs.mean(axis=0)).sum())
    u_al = float(entr(probs).sum(axis=1).mean())
    return _negated(u_tot, u_al, clamp)


def rank_variance(
    bundle: PredictionBundle,
    instance: Instance,
    k: int,
    temperature: float = DEFAULT_TEMPERATURE,
    sample_scores: Optional[np.ndarray] = None,
) -> float:
    """
    Negated mean (population) variance of the per-sample rank positions of
    the top-K candidates under the mean prediction. K above M uses all M.
    """
    if k < 1:
        raise DomainError(f"K must be >= 1 for rank variance, got {k}.")

    reference = aggregate_prediction(
        bundle, instance, AggregationStrategy.FINGERPRINT_MEAN, temperature
    )
    top = reference.order[: min(k, instance.num_candidates)]

    if sample_scores is None:
        sample_scores = candidate_scores(bundle.samples, instance)
    positions = rank_positions(np.atleast_2d(sample_scores))[:, top]

    variance = positions.astype(np.float64).var(axis=0, ddof=0)
    # + 0.0 turns -0.0 into 0.0
    return float(-variance.mean()) + 0.0



# DISTANCE-BASED SCORES


def normalize_embedding(embedding: np.ndarray) -> np.ndarray:
    h = np.asarray(embedding, dtype=np.float64).ravel()
    norm = np.linalg.norm(h)
    if norm == 0.0 or not np.isfinite(norm):
        raise DomainError("Embedding has zero or non-finite norm; cannot normalize.")
    return h / norm


def knn_score(embedding: np.ndarray, index: TrainEmbeddingIndex, k: int) -> float:
    """
    Negated mean Euclidean distance to the k nearest training embeddings
    (exact search). The query is used as given; normalize it first.
    """
    if k < 1 or k > index.size:
        raise DomainError(f"k={k} neighbors requested but the index holds {index.size} embeddings.")
    h = np.asarray(embedding, dtype=np.float64).reshape(1, -1)
    if h.shape[1] != index.dim:
        raise DomainError(f"Embedding has {h.shape[1]} dims, index has {index.dim}.")

    distances, _ = index.neighbors.kneighbors(h, n_neighbors=k)
    return float(-distances[0].mean()) + 0.0


def mahalanobis_score(embedding: np.ndarray, index: TrainEmbeddingIndex) -> float:
    """Negated Mahalanobis distance to the training mean."""
    h = np.asarray(embedding, dtype=np.float64).ravel()
    if h.shape[0] != index.dim:
        raise DomainError(f"Embedding has {h.shape[0]} dims, index has {index.dim}.")

    diff = h - index.mean
    solved = cho_solve(index.cholesky, diff)
    squared = float(diff @ solved)
    if not np.isfinite(squared):
        raise NumericError("Mahalanobis distance is not finite; covariance is ill-conditioned.")
    return float(-np.sqrt(max(squared, 0.0))) + 0.0



# PER-INSTANCE + TABLE


def score_instance(
    instance: Instance,
    bundle: PredictionBundle,
    config: ScoringConfig,
) -> Tuple[Dict[str, float], CandidateRanking, np.ndarray]:
    """
    Compute every requested score for one instance.

    Returns (scores, ranking under config.strategy, per-sample similarities).
    """
    if bundle.num_bits != instance.num_bits:
        raise DomainError(
            f"Instance '{instance.id}': prediction has {bundle.num_bits} bits, "
            f"candidates have {instance.num_bits}."
        )

    sample_scores = candidate_scores(bundle.samples, instance)
    ranking = aggregate_prediction(
        bundle, instance, config.strategy, config.temperature, sample_scores=sample_scores
    )

    names = set(config.scores)
    row: Dict[str, float] = {"num_candidates": float(instance.num_candidates)}

    if "conf" in names:
        row["conf"] = score_confidence(ranking)
    if "gap" in names:
        row["gap"] = score_gap(ranking)

    if names & {"bit_tot", "bit_al", "bit_ep"}:
        bit = bitwise_decomposition(bundle)
        row.update(bit_tot=bit.total, bit_al=bit.aleatoric, bit_ep=bit.epistemic)

    if names & {"ret_tot", "ret_al", "ret_ep"}:
        ret = retrieval_decomposition(
            bundle, instance, config.temperature, sample_scores=sample_scores
        )
        row.update(ret_tot=ret.total, ret_al=ret.aleatoric, ret_ep=ret.epistemic)

    for k in config.rank_variance_ks:
        row[f"rank_var@{k}"] = rank_variance(
            bundle, instance, k, config.temperature, sample_scores=sample_scores
        )

    if config.needs_embeddings:
        if bundle.embedding is None:
            raise DomainError(f"Instance '{instance.id}' has no embedding for distance scores.")
        if config.index is None:
            raise DomainError("Distance scores requested but no training embedding index given.")
        h = normalize_embedding(bundle.embedding)
        if "knn" in names:
            row["knn"] = knn_score(h, config.index, min(config.knn_neighbors, config.index.size))
        if "mah" in names:
            row["mah"] = mahalanobis_score(h, config.index)

    scores = {name: row[name] for name in ["num_candidates", *config.scores] if name in row}
    return scores, ranking, sample_scores


def check_distance_inputs(config: ScoringConfig) -> None:
    """
    Fail early when knn/mah are requested without a training index.
    """
    if not config.needs_embeddings:
        return
    if config.index is None:
        raise DomainError(
            "Scores knn/mah need training embeddings (--train-embeddings), none given."
        )
    if config.knn_neighbors > config.index.size and "knn" in config.scores:
        logger.warning(
            f"kNN k={config.knn_neighbors} exceeds the {config.index.size} training "
            f"embeddings; using k={config.index.size}."
        )


def raise_for_missing_embeddings(missing: Sequence[str]) -> None:
    """Structured error naming every instance whose bundle has no embedding."""
    if not missing:
        return
    shown = ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
    raise DomainError(
        f"Distance scores requested but {len(missing)} instance(s) have no embedding: {shown}"
    )


def _score_one(inst: Instance, bundle: Optional[PredictionBundle], config: ScoringConfig):
    if bundle is None:
        return inst.id, None, "no prediction bundle"
    if config.needs_embeddings and bundle.embedding is None:
        return inst.id, None, MISSING_EMBEDDING
    try:
        scores, _, _ = score_instance(inst, bundle, config)
    except DomainError as e:
        return inst.id, None, str(e)
    return inst.id, scores, None


MISSING_EMBEDDING = "no embedding"


def compute_score_table(
    instances: Iterable[Instance],
    bundles: Mapping[str, PredictionBundle],
    config: ScoringConfig,
) -> ScoreTable:
    """
    Score every instance that has a matching bundle.

    Instances without a bundle (or whose bundle does not fit) are excluded
    and listed in ``ScoreTable.excluded``. Bundles are looked up lazily, so
    ``bundles`` may be a streaming PredictionReader.

    Raises
    ------
    DomainError
        Distance scores requested and some bundles carry no embedding.
    """
    check_distance_inputs(config)

    # bundles are fetched while joblib pulls tasks, i.e. under its dispatch lock
    results = Parallel(n_jobs=config.threads, prefer="threads")(
        delayed(_score_one)(inst, bundles.get(inst.id), config) for inst in instances
    )

    raise_for_missing_embeddings(
        [iid for iid, _, reason in results if reason == MISSING_EMBEDDING]
    )
    return assemble_table(results, config)


def assemble_table(results, config: ScoringConfig) -> ScoreTable:
    """Build a ScoreTable from (id, scores | None, reason | None) triples."""
    rows, excluded = [], {}
    for instance_id, scores, reason in results:
        if scores is None:
            excluded[instance_id] = reason
            continue
        rows.append({"id": instance_id, **scores})

    if excluded:
        logger.warning(f"{len(excluded)} instance(s) excluded from scoring.")

    columns = ["id", "num_candidates", *[s for s in config.scores if s != "num_candidates"]]
    frame = pd.DataFrame(rows, columns=columns)
    if len(frame):
        frame["num_candidates"] = frame["num_candidates"].astype(np.int64)
    return ScoreTable(frame=frame, excluded=excluded)
