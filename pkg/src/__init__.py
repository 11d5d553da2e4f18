"""
src package for selective prediction in fingerprint retrieval.

Holds:
- config.py          # paths, defaults, env settings, logging setup
- errors.py          # exception types + exit codes
- retrieval.py       # domain types, similarity, ranking, Hit@K
- scoring.py         # confidence / uncertainty scores
- selective_eval.py  # losses, risk-coverage curves, AURC, correlations
- risk_control.py    # Clopper-Pearson bound + SGR thresholds
- synthetic.py       # planted synthetic data + reference oracles
- data_loader.py     # dataset / prediction / result file formats
- pipeline.py        # one streaming evaluation pass
- charts.py          # SVG figures
- cli.py             # command-line subcommands
"""

from .config import TOOL_VERSION as __version__
from .config import ensure_directories_exist, setup_logging
from .errors import DomainError, FormatError, NumericError, RetrievalSelectError
from .retrieval import (
    AggregationStrategy,
    CandidateRanking,
    Instance,
    PredictionBundle,
    aggregate_prediction,
    hit_at_k,
    rank_candidates,
)
from .risk_control import SgrResult, clopper_pearson_upper, sgr_select
from .scoring import ScoreTable, ScoringConfig, TrainEmbeddingIndex, compute_score_table
from .selective_eval import LossSpec, RiskCoverageCurve, risk_coverage_curve

__all__ = [
    "__version__",
    "ensure_directories_exist",
    "setup_logging",
    "DomainError",
    "FormatError",
    "NumericError",
    "RetrievalSelectError",
    "AggregationStrategy",
    "CandidateRanking",
    "Instance",
    "PredictionBundle",
    "aggregate_prediction",
    "hit_at_k",
    "rank_candidates",
    "SgrResult",
    "clopper_pearson_upper",
    "sgr_select",
    "ScoreTable",
    "ScoringConfig",
    "TrainEmbeddingIndex",
    "compute_score_table",
    "LossSpec",
    "RiskCoverageCurve",
    "risk_coverage_curve",
]
