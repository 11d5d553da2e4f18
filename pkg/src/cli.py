"""
Command-line interface.

    score      per-instance scores + retrieval summary
    curve      risk-coverage curves, AURC / relAURC summary
    sgr        certified thresholds with selection with guaranteed risk
    correlate  Spearman matrix between scores + heatmap
    simulate   synthetic dataset / predictions (+ SGR Monte-Carlo check)
    describe   candidate-set characterisation

Every run writes a manifest.json next to its outputs; a run that fails after
starting writes one with "complete": false.
"""

from __future__ import annotations

import argparse
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from . import charts
from .config import (
    DEFAULT_DELTA,
    DEFAULT_FINGERPRINT_BITS,
    DEFAULT_KNN_NEIGHBORS,
    DEFAULT_KS,
    DEFAULT_TARGET_RISKS,
    DEFAULT_TEMPERATURE,
    MAHALANOBIS_RIDGE,
    OUTPUT_DIR,
    RANDOM_STATE,
    SYNTHETIC_DATA_DIR,
    default_threads,
    ensure_directories_exist,
    setup_logging,
)
from .data_loader import (
    PredictionReader,
    iter_dataset,
    load_dataset,
    load_train_embeddings,
    read_dataset_header,
    write_curve,
    write_manifest,
    write_results,
    write_table,
)
from .errors import EXIT_OK, DomainError, RetrievalSelectError, exit_code_for
from .pipeline import EvaluationConfig, EvaluationResult, evaluate, filter_by_size, orient_pseudo_scores
from .retrieval import AggregationStrategy
from .risk_control import calibration_split, sgr_sweep
from .scoring import (
    DISTANCE_SCORES,
    ScoringConfig,
    TrainEmbeddingIndex,
    parse_score_names,
    score_group,
)
from .selective_eval import (
    LossSpec,
    aurc_table,
    candidate_statistics_table,
    coverage_at_risk,
    coverage_column,
    risk_coverage_curve,
    spearman_matrix,
)
from .synthetic import DifficultyModel, SynthConfig, mc_validate_sgr, write_synthetic

logger = logging.getLogger(__name__)



# RUN CONFIG


@dataclass
class RunConfig:
    """Everything a subcommand needs; serialized into the manifest."""

    command: str
    output_dir: Path = OUTPUT_DIR
    dataset: Optional[Path] = None
    predictions: Optional[Path] = None
    train_embeddings: Optional[Path] = None
    losses: List[str] = field(default_factory=list)
    strategy: str = AggregationStrategy.SCORE_MEAN.value
    temperature: float = DEFAULT_TEMPERATURE
    ks: List[int] = field(default_factory=lambda: list(DEFAULT_KS))
    scores: List[str] = field(default_factory=list)
    delta: float = DEFAULT_DELTA
    target_risks: List[float] = field(default_factory=lambda: list(DEFAULT_TARGET_RISKS))
    seed: int = RANDOM_STATE
    min_candidates: Optional[int] = None
    max_candidates: Optional[int] = None
    allow_uncapped: bool = False
    knn_neighbors: int = DEFAULT_KNN_NEIGHBORS
    threads: int = 1
    shuffles: int = 30
    extra: Dict[str, object] = field(default_factory=dict)

    def validate(self) -> None:
        needs_inputs = self.command in ("score", "curve", "sgr", "correlate")
        if needs_inputs and (self.dataset is None or self.predictions is None):
            raise DomainError(f"'{self.command}' needs --dataset and --predictions.")
        if self.command == "describe" and self.dataset is None:
            raise DomainError("'describe' needs --dataset.")
        if not 0.0 < self.delta < 1.0:
            raise DomainError(f"--delta must lie in (0, 1), got {self.delta}.")
        for r in self.target_risks:
            if not 0.0 < r <= 1.0:
                raise DomainError(f"Target risks must lie in (0, 1], got {r}.")
        if any(k < 1 for k in self.ks):
            raise DomainError(f"--ks must be positive integers, got {self.ks}.")
        if not self.temperature > 0:
            raise DomainError(f"--temperature must be positive, got {self.temperature}.")
        if self.threads < 1:
            raise DomainError(f"--threads must be >= 1, got {self.threads}.")
        if (
            self.min_candidates is not None
            and self.max_candidates is not None
            and self.min_candidates > self.max_candidates
        ):
            raise DomainError("--min-candidates is larger than --max-candidates.")

    def to_dict(self) -> Dict[str, object]:
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, Path):
                out[key] = str(value)
        return out


class RunOutputs:
    """Collects written files for the manifest."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.dir = Path(config.output_dir)
        self.paths: List[Path] = []

    def path(self, name: str) -> Path:
        return self.dir / name

    def add(self, path) -> Path:
        self.paths.append(Path(path))
        return Path(path)

    def manifest(self, complete: bool, error: Optional[str] = None) -> Path:
        inputs = {
            "dataset": self.config.dataset,
            "predictions": self.config.predictions,
            "train_embeddings": self.config.train_embeddings,
        }
        return write_manifest(
            self.path("manifest.json"),
            config=self.config.to_dict(),
            inputs=inputs,
            outputs=self.paths,
            complete=complete,
            error=error,
        )



# ARGUMENT PARSING


def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _float_list(text: str) -> List[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def _trials(text: str) -> int:
    match = re.fullmatch(r"\s*(?:trials=)?(\d+)\s*", text)
    if not match:
        raise argparse.ArgumentTypeError(f"expected trials=N, got '{text}'")
    return int(match.group(1))


def _add_common(p: argparse.ArgumentParser, default_out: Path = OUTPUT_DIR) -> None:
    p.add_argument("--out", dest="output_dir", type=Path, default=default_out, help="Output directory.")
    p.add_argument("--threads", type=int, default=default_threads(), help="Worker threads (default: RG_THREADS or 1).")
    p.add_argument("--seed", type=int, default=RANDOM_STATE)
    p.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default: RG_LOG_LEVEL or INFO).")


def _add_inputs(p: argparse.ArgumentParser, predictions: bool = True) -> None:
    p.add_argument("--dataset", type=Path, required=True, help="Dataset JSON-lines file.")
    if predictions:
        p.add_argument("--predictions", type=Path, required=True, help="Binary prediction file.")
        p.add_argument(
            "--train-embeddings",
            type=Path,
            default=None,
            help="Training embeddings (.npy) or a saved index (.joblib); enables knn/mah.",
        )
    p.add_argument("--allow-uncapped", action="store_true", help="Accept candidate sets above the cap.")
    p.add_argument("--min-candidates", type=int, default=None)
    p.add_argument("--max-candidates", type=int, default=None)


def _add_scoring(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scores", default=None, help="Comma-separated score names (default: all available).")
    p.add_argument("--strategy", default=AggregationStrategy.SCORE_MEAN.value, help="fingerprint_mean, score_mean or prob_mean.")
    p.add_argument("--temperature", type=float, default=DEFAULT_TEMPERATURE)
    p.add_argument("--ks", type=_int_list, default=list(DEFAULT_KS), help="Hit@K cut-offs, e.g. 1,5,20.")
    p.add_argument("--knn-k", dest="knn_neighbors", type=int, default=DEFAULT_KNN_NEIGHBORS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="run_selection",
        description="Selective prediction for ranked fingerprint retrieval.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="Per-instance confidence scores.")
    _add_inputs(p)
    _add_scoring(p)
    _add_common(p)

    p = sub.add_parser("curve", help="Risk-coverage curves and AURC.")
    _add_inputs(p)
    _add_scoring(p)
    p.add_argument("--losses", default=None, help="e.g. hit@1,hit@5,tanimoto,cosine:discrete,hamming.")
    p.add_argument("--shuffles", type=int, default=30, help="Random orderings for the random reference.")
    p.add_argument(
        "--target-risks", type=_float_list, default=list(DEFAULT_TARGET_RISKS), help="Adds coverage@r columns."
    )
    _add_common(p)

    p = sub.add_parser("sgr", help="Certified thresholds (selection with guaranteed risk).")
    _add_inputs(p)
    _add_scoring(p)
    p.add_argument("--losses", default=None, help="Hit losses only, e.g. hit@1,hit@20.")
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA)
    p.add_argument("--target-risks", type=_float_list, default=list(DEFAULT_TARGET_RISKS))
    _add_common(p)

    p = sub.add_parser("correlate", help="Spearman correlations between scores.")
    _add_inputs(p)
    _add_scoring(p)
    _add_common(p)

    p = sub.add_parser("simulate", help="Write a synthetic dataset and predictions.")
    p.add_argument("--n", dest="n_instances", type=int, default=100)
    p.add_argument("--bits", dest="num_bits", type=int, default=DEFAULT_FINGERPRINT_BITS)
    p.add_argument("--m-min", type=int, default=1)
    p.add_argument("--m-max", type=int, default=256)
    p.add_argument("--samples", dest="num_samples", type=int, default=5)
    p.add_argument("--noise", dest="noise_level", type=float, default=0.5)
    p.add_argument("--model", default=DifficultyModel.PLANTED_CONFIDENCE.value, help="planted or similar.")
    p.add_argument("--embedding-dim", type=int, default=0, help="Also write embeddings of this size.")
    p.add_argument("--n-train", type=int, default=1000, help="Training embeddings written with --embedding-dim.")
    p.add_argument("--validate-sgr", type=_trials, default=None, metavar="trials=N")
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA)
    p.add_argument("--target-risks", type=_float_list, default=[0.2, 0.4])
    _add_common(p, default_out=SYNTHETIC_DATA_DIR)

    p = sub.add_parser("describe", help="Candidate-set statistics.")
    _add_inputs(p, predictions=False)
    _add_common(p)

    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    get = lambda name, default=None: getattr(args, name, default)  # noqa: E731
    config = RunConfig(
        command=args.command,
        output_dir=Path(args.output_dir),
        dataset=get("dataset"),
        predictions=get("predictions"),
        train_embeddings=get("train_embeddings"),
        strategy=AggregationStrategy.parse(get("strategy", "score_mean")).value,
        temperature=get("temperature", DEFAULT_TEMPERATURE),
        ks=list(get("ks", list(DEFAULT_KS))),
        delta=get("delta", DEFAULT_DELTA),
        target_risks=list(get("target_risks", list(DEFAULT_TARGET_RISKS))),
        seed=args.seed,
        min_candidates=get("min_candidates"),
        max_candidates=get("max_candidates"),
        allow_uncapped=bool(get("allow_uncapped", False)),
        knn_neighbors=get("knn_neighbors", DEFAULT_KNN_NEIGHBORS),
        threads=args.threads,
        shuffles=get("shuffles", 30),
    )

    if args.command in ("score", "curve", "sgr", "correlate"):
        config.scores = _resolve_scores(get("scores"), config)
        config.losses = [s.name for s in _resolve_losses(get("losses"), config)]

    if args.command == "simulate":
        config.extra = {
            "n_instances": args.n_instances,
            "num_bits": args.num_bits,
            "m_min": args.m_min,
            "m_max": args.m_max,
            "num_samples": args.num_samples,
            "noise_level": args.noise_level,
            "difficulty_model": DifficultyModel.parse(args.model).value,
            "embedding_dim": args.embedding_dim,
            "n_train": args.n_train,
            "validate_sgr_trials": args.validate_sgr,
        }
    return config


def _resolve_scores(text: Optional[str], config: RunConfig) -> List[str]:
    if text is None:
        names = parse_score_names(None, config.ks)
        if config.train_embeddings is None:
            names = [n for n in names if n not in DISTANCE_SCORES]
        return names
    return parse_score_names(text, config.ks)


def _resolve_losses(text: Optional[str], config: RunConfig) -> List[LossSpec]:
    if text is None:
        return [LossSpec.hit(k) for k in config.ks]
    specs = [LossSpec.parse(t) for t in text.split(",") if t.strip()]
    if not specs:
        raise DomainError("--losses is empty.")
    return specs



# SHARED STEPS


def _load_index(config: RunConfig) -> Optional[TrainEmbeddingIndex]:
    if config.train_embeddings is None:
        return None
    path = Path(config.train_embeddings)
    if path.suffix == ".joblib":
        if not path.is_file():
            raise FileNotFoundError(f"Embedding index not found: {path}")
        return TrainEmbeddingIndex.load(path)
    return TrainEmbeddingIndex.from_embeddings(load_train_embeddings(path), eps=MAHALANOBIS_RIDGE)


def _run_evaluation(config: RunConfig, losses: Sequence[LossSpec]) -> EvaluationResult:
    scoring = ScoringConfig(
        scores=config.scores,
        strategy=AggregationStrategy(config.strategy),
        temperature=config.temperature,
        knn_neighbors=config.knn_neighbors,
        index=_load_index(config),
        threads=config.threads,
    )
    read_dataset_header(config.dataset)
    instances = filter_by_size(
        iter_dataset(config.dataset, allow_uncapped=config.allow_uncapped),
        config.min_candidates,
        config.max_candidates,
    )
    with PredictionReader(config.predictions) as reader:
        result = evaluate(instances, reader, EvaluationConfig(scoring=scoring, losses=list(losses), ks=config.ks))
    if len(result.scores) == 0:
        raise DomainError("No instance could be scored (check ids, dimensions and size filters).")
    return result


def _write_excluded(result: EvaluationResult, out: RunOutputs) -> None:
    if not result.excluded:
        return
    frame = pd.DataFrame(sorted(result.excluded.items()), columns=["id", "reason"])
    out.add(write_table(frame, out.path("excluded.csv")))


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)



# SUBCOMMANDS


def cmd_score(config: RunConfig, out: RunOutputs) -> None:
    result = _run_evaluation(config, [LossSpec.hit(k) for k in config.ks])
    out.add(write_results(result.scores, out.path("scores.csv")))
    out.add(write_table(result.summary(), out.path("score_summary.csv")))
    _write_excluded(result, out)


def cmd_curve(config: RunConfig, out: RunOutputs) -> None:
    specs = [LossSpec.parse(name) for name in config.losses] if config.losses else _resolve_losses(None, config)
    result = _run_evaluation(config, specs)
    frame = result.frame()
    score_names = result.scores.score_names
    targets = list(config.target_risks)

    summary = [aurc_table(frame, score_names, [s.name for s in specs], target_risks=targets)]
    for spec in specs:
        losses = frame[spec.name].to_numpy(dtype=np.float64)
        pseudo = orient_pseudo_scores(frame, spec.name, config.shuffles, config.seed)
        oracle_kappa = pseudo.pop("oracle")
        oracle = risk_coverage_curve(losses, oracle_kappa)
        shuffled = [risk_coverage_curve(losses, kappa) for kappa in pseudo.values()]

        oracle_row = {"score": "oracle", "loss": spec.name, **oracle.summary()}
        random_row = {
            "score": "random",
            "loss": spec.name,
            **oracle.summary(),
            "aurc": oracle.aurc_random,
            "rel_aurc": float(np.mean([c.rel_aurc for c in shuffled])) if shuffled else 1.0,
        }
        for r in targets:
            oracle_row[coverage_column(r)] = coverage_at_risk(losses, oracle_kappa, r, curve=oracle)
            random_row[coverage_column(r)] = (
                float(np.mean([coverage_at_risk(losses, None, r, curve=c) for c in shuffled]))
                if shuffled
                else float(losses.mean() <= r)
            )
        summary.append(pd.DataFrame([oracle_row, random_row]))

        for name in score_names:
            curve = risk_coverage_curve(losses, frame[name].to_numpy(dtype=np.float64))
            stem = f"curve_{_safe(name)}__{_safe(spec.name)}"
            out.add(write_curve(curve, out.path(f"{stem}.csv")))
            out.add(
                charts.plot_risk_coverage(
                    {name: curve, "oracle": oracle}, out.path(f"{stem}.svg"), title=name, loss_name=spec.name
                )
            )

    out.add(write_table(pd.concat(summary, ignore_index=True), out.path("aurc_summary.csv")))
    _write_excluded(result, out)


def cmd_sgr(config: RunConfig, out: RunOutputs) -> None:
    specs = [LossSpec.parse(name) for name in config.losses] if config.losses else _resolve_losses(None, config)
    rejected = [s.name for s in specs if not s.is_binary]
    if rejected:
        raise DomainError(
            f"SGR needs 0/1 losses; {rejected} are similarity losses. Use hit@K losses."
        )

    result = _run_evaluation(config, specs)
    frame = result.frame()
    cal_ids, _ = calibration_split(frame["id"].tolist(), config.seed)
    is_cal = frame["id"].isin(set(cal_ids)).to_numpy()
    cal, held_out = frame[is_cal], frame[~is_cal]
    logger.info(f"Calibration split: {len(cal)} calibration / {len(held_out)} evaluation instances.")

    sweeps = []
    for spec in specs:
        for name in result.scores.score_names:
            sweep = sgr_sweep(
                cal[name].to_numpy(dtype=np.float64),
                cal[spec.name].to_numpy(dtype=np.float64),
                held_out[name].to_numpy(dtype=np.float64),
                held_out[spec.name].to_numpy(dtype=np.float64),
                config.target_risks,
                config.delta,
            )
            sweep.insert(0, "loss", spec.name)
            sweep.insert(0, "score", name)
            sweeps.append(sweep)

    table = pd.concat(sweeps, ignore_index=True)
    out.add(write_table(table, out.path("sgr.csv")))
    for spec in specs:
        out.add(
            charts.plot_sgr(table[table["loss"] == spec.name], out.path(f"sgr_{_safe(spec.name)}.svg"), title=spec.name)
        )
    _write_excluded(result, out)


def cmd_correlate(config: RunConfig, out: RunOutputs) -> None:
    if len(config.scores) < 2:
        raise DomainError("'correlate' needs at least 2 scores.")
    result = _run_evaluation(config, [])
    group_order = {"retrieval": 0, "fingerprint": 1, "other": 2}
    names = sorted(config.scores, key=lambda n: group_order[score_group(n)])
    matrix = spearman_matrix(result.scores.frame[["id", *names]])

    out.add(write_table(matrix.reset_index().rename(columns={"index": "score"}), out.path("spearman.csv")))
    out.add(
        charts.plot_correlation_heatmap(matrix, {n: score_group(n) for n in names}, out.path("spearman.svg"))
    )
    _write_excluded(result, out)


def cmd_simulate(config: RunConfig, out: RunOutputs) -> None:
    extra = dict(config.extra)
    trials = extra.pop("validate_sgr_trials", None)
    synth = SynthConfig(
        seed=config.seed,
        difficulty_model=DifficultyModel(extra.pop("difficulty_model")),
        **extra,
    )
    for path in write_synthetic(synth, config.output_dir).values():
        out.add(path)

    if trials:
        rows = []
        for r in config.target_risks:
            rate = mc_validate_sgr(synth, r, config.delta, trials, threads=config.threads)
            rows.append({"target_risk": r, "delta": config.delta, "trials": trials, "violation_rate": rate})
        out.add(write_table(pd.DataFrame(rows), out.path("sgr_validation.csv")))


def cmd_describe(config: RunConfig, out: RunOutputs) -> None:
    instances = list(
        filter_by_size(
            load_dataset(config.dataset, allow_uncapped=config.allow_uncapped),
            config.min_candidates,
            config.max_candidates,
        )
    )
    stats = candidate_statistics_table(instances)
    out.add(write_table(stats, out.path("candidate_stats.csv")))
    if len(stats) >= 2:
        matrix = spearman_matrix(stats)
        out.add(write_table(matrix.reset_index().rename(columns={"index": "column"}), out.path("candidate_spearman.csv")))
    out.add(charts.plot_candidate_statistics(stats, out.path("candidate_stats.svg")))


COMMANDS: Dict[str, Callable[[RunConfig, RunOutputs], None]] = {
    "score": cmd_score,
    "curve": cmd_curve,
    "sgr": cmd_sgr,
    "correlate": cmd_correlate,
    "simulate": cmd_simulate,
    "describe": cmd_describe,
}



# ENTRY POINT


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns the process exit code."""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)

    try:
        config = config_from_args(args)
        config.validate()
    except (RetrievalSelectError, FileNotFoundError) as e:
        logger.error(str(e))
        return exit_code_for(e)

    out = RunOutputs(config)
    try:
        ensure_directories_exist(out.dir)
        COMMANDS[config.command](config, out)
    except (RetrievalSelectError, FileNotFoundError) as e:
        logger.error(str(e))
        _try_manifest(out, complete=False, error=str(e))
        return exit_code_for(e)
    except Exception as e:
        _try_manifest(out, complete=False, error=f"{type(e).__name__}: {e}")
        raise

    out.manifest(complete=True)
    logger.info(f"Finished '{config.command}'; outputs in {out.dir}")
    return EXIT_OK


def _try_manifest(out: RunOutputs, complete: bool, error: str) -> None:
    try:
        out.manifest(complete=complete, error=error)
    except (RetrievalSelectError, OSError) as e:
        logger.warning(f"Could not write the manifest: {e}")
