"""
Synthetic retrieval data with planted ground truth, plus slow brute-force
reference implementations ("oracles") used to cross-check the main code.

Randomness comes from numpy's counter-based Philox generator. Instance i of
a run with seed s draws from the stream keyed by (s, i), so any instance can
be regenerated on its own and generation order does not matter.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .config import DEFAULT_CANDIDATE_CAP, DEFAULT_DELTA, DEFAULT_FINGERPRINT_BITS, MAHALANOBIS_RIDGE, RANDOM_STATE
from .errors import DomainError
from .retrieval import Instance, PredictionBundle
from .risk_control import sgr_select

logger = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1

# Counter high words separating the stream families of one seed
_INSTANCE_STREAMS = 0
_TRAIN_STREAMS = 1
_TRIAL_STREAMS = 2



# CONFIG


class DifficultyModel(str, Enum):
    PLANTED_CONFIDENCE = "planted"
    SIMILAR_CANDIDATES = "similar"

    @classmethod
    def parse(cls, text: str) -> "DifficultyModel":
        key = str(text).strip().lower().replace("-", "_")
        aliases = {
            "planted": cls.PLANTED_CONFIDENCE,
            "planted_confidence": cls.PLANTED_CONFIDENCE,
            "plantedconfidence": cls.PLANTED_CONFIDENCE,
            "similar": cls.SIMILAR_CANDIDATES,
            "similar_candidates": cls.SIMILAR_CANDIDATES,
            "similarcandidates": cls.SIMILAR_CANDIDATES,
        }
        if key not in aliases:
            raise DomainError(f"Unknown difficulty model '{text}' (planted or similar).")
        return aliases[key]


@dataclass(frozen=True)
class SynthConfig:
    """
    n_instances      : number of instances
    num_bits         : fingerprint length D
    m_min, m_max     : candidate set sizes are uniform on [m_min, m_max]
    num_samples      : posterior samples S per instance
    noise_level      : scales the planted error probability and sample noise
    embedding_dim    : d_h of the synthetic embeddings (0 = none)
    n_train          : number of training embeddings written alongside
    """

    n_instances: int = 100
    num_bits: int = DEFAULT_FINGERPRINT_BITS
    m_min: int = 1
    m_max: int = DEFAULT_CANDIDATE_CAP
    num_samples: int = 5
    noise_level: float = 0.5
    seed: int = RANDOM_STATE
    difficulty_model: DifficultyModel = DifficultyModel.PLANTED_CONFIDENCE
    embedding_dim: int = 0
    n_train: int = 1000
    cap: int = DEFAULT_CANDIDATE_CAP

    def validate(self) -> None:
        for name in ("n_instances", "num_bits", "m_min", "m_max", "num_samples"):
            if getattr(self, name) < 1:
                raise DomainError(f"SynthConfig.{name} must be >= 1, got {getattr(self, name)}.")
        if self.m_min > self.m_max:
            raise DomainError(f"Empty candidate range [{self.m_min}, {self.m_max}].")
        if self.m_max > self.cap:
            raise DomainError(f"m_max={self.m_max} exceeds the candidate cap {self.cap}.")
        if not self.noise_level >= 0.0:
            raise DomainError(f"noise_level must be >= 0, got {self.noise_level}.")
        if self.embedding_dim < 0 or self.n_train < 1:
            raise DomainError("embedding_dim must be >= 0 and n_train >= 1.")
        if self.num_bits < 64 and (1 << self.num_bits) - 1 < self.m_max:
            raise DomainError(
                f"D={self.num_bits} allows only {(1 << self.num_bits) - 1} distinct nonzero "
                f"fingerprints, fewer than m_max={self.m_max}."
            )

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["difficulty_model"] = self.difficulty_model.value
        return out


def stream(seed: int, index: int, family: int = _INSTANCE_STREAMS) -> np.random.Generator:
    """Independent Philox stream keyed by (seed, index)."""
    key = (int(seed) & _MASK64) | ((int(index) & _MASK64) << 64)
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, 0, family]))



# CANDIDATES


def _sparse_rows(rng: np.random.Generator, rows: int, num_bits: int) -> np.ndarray:
    # AND of three uniform bytes sets each bit with probability 1/8
    n_bytes = (num_bits + 7) // 8
    raw = rng.integers(0, 256, size=(3, rows, n_bytes), dtype=np.uint8)
    packed = raw[0] & raw[1] & raw[2]
    return np.unpackbits(packed, axis=1, count=num_bits, bitorder="little")


def _small_space_rows(rng: np.random.Generator, rows: int, num_bits: int) -> np.ndarray:
    codes = rng.choice(np.arange(1, 1 << num_bits, dtype=np.int64), size=rows, replace=False)
    bits = (codes[:, None] >> np.arange(num_bits)[None, :]) & 1
    return bits.astype(np.uint8)


def random_candidates(rng: np.random.Generator, m: int, num_bits: int) -> np.ndarray:
    """
    m distinct nonzero fingerprints of density about 1/8.

    Tiny bit spaces (D <= 16) draw uniformly among the nonzero patterns.
    """
    if num_bits < 64 and (1 << num_bits) - 1 < m:
        raise DomainError(f"Cannot draw {m} distinct nonzero fingerprints of {num_bits} bits.")
    if num_bits <= 16:
        return _small_space_rows(rng, m, num_bits)

    cands = _sparse_rows(rng, m, num_bits)
    while True:
        _, first = np.unique(cands, axis=0, return_index=True)
        bad = np.ones(m, dtype=bool)
        bad[first] = False
        bad |= cands.sum(axis=1) == 0
        if not bad.any():
            return cands
        cands[bad] = _sparse_rows(rng, int(bad.sum()), num_bits)


def _near_duplicates(rng: np.random.Generator, base: np.ndarray, m: int) -> np.ndarray:
    """base plus m-1 distinct nonzero variants with 1-2 bits flipped."""
    num_bits = base.shape[0]
    rows = [base]
    seen = {base.tobytes()}
    attempts = 0
    while len(rows) < m:
        attempts += 1
        variant = base.copy()
        flips = rng.choice(num_bits, size=min(int(rng.integers(1, 3)), num_bits), replace=False)
        variant[flips] ^= 1
        if attempts > 50 * m:
            # base's neighbourhood is exhausted; fall back to unrelated fingerprints
            variant = random_candidates(rng, 1, num_bits)[0]
        key = variant.tobytes()
        if variant.any() and key not in seen:
            seen.add(key)
            rows.append(variant)
    return np.stack(rows)



# GENERATION


def _draw_samples(
    rng: np.random.Generator,
    center: np.ndarray,
    sigma: float,
    num_samples: int,
) -> np.ndarray:
    theta = 0.9 * center[None, :] + rng.normal(0.0, 1.0, size=(num_samples, center.shape[0])) * sigma
    theta = np.clip(theta, 0.0, 1.0)
    empty = theta.sum(axis=1) == 0.0
    if empty.any():
        theta[empty] = 0.9 * center
    # the binary container stores single precision
    return theta.astype(np.float32).astype(np.float64)


def _embedding(
    rng: np.random.Generator,
    base: np.ndarray,
    shift: float,
) -> np.ndarray:
    direction = rng.normal(size=base.shape[0])
    direction /= np.linalg.norm(direction)
    h = base + 0.5 * rng.normal(size=base.shape[0]) + 4.0 * shift * direction
    return h.astype(np.float32).astype(np.float64)


def _embedding_base(config: SynthConfig) -> np.ndarray:
    return stream(config.seed, 0, _TRAIN_STREAMS).normal(size=config.embedding_dim) * 2.0


def generate_instance(config: SynthConfig, i: int) -> Tuple[Instance, PredictionBundle, Dict]:
    """Instance i of the run, regenerated from its own stream."""
    rng = stream(config.seed, i)
    D = config.num_bits
    m = int(rng.integers(config.m_min, config.m_max + 1))
    instance_id = f"syn{i:06d}"

    u = float(rng.random())
    q = 0.0 if m == 1 else min(config.noise_level * u, 1.0)

    if config.difficulty_model is DifficultyModel.PLANTED_CONFIDENCE:
        cands = random_candidates(rng, m, D)
        true_index = int(rng.integers(m))
        error = bool(rng.random() < q)
        target = true_index
        if error:
            target = int((true_index + rng.integers(1, m)) % m)
        other = target if m == 1 else int((target + rng.integers(1, m)) % m)
        w = 0.4 * q
        center = (1.0 - w) * cands[target] + w * cands[other]
        error_prob = q
    else:
        base = random_candidates(rng, 1, D)[0]
        cands = _near_duplicates(rng, base, m)
        perm = rng.permutation(m)
        cands = cands[perm]
        true_index = int(np.flatnonzero(perm == 0)[0])
        center = cands[true_index].astype(np.float64)
        error = False
        error_prob = math.nan

    sigma = 0.3 * q + 0.02 * config.noise_level
    samples = _draw_samples(rng, center.astype(np.float64), sigma, config.num_samples)

    embedding = None
    if config.embedding_dim > 0:
        embedding = _embedding(rng, _embedding_base(config), q)

    mass = 50.0 + 2.5 * float(cands[true_index].sum()) + float(rng.normal())
    instance = Instance(
        id=instance_id,
        candidates=cands.astype(np.uint8),
        true_index=true_index,
        meta={"precursor_mass": round(mass, 4)},
    )
    bundle = PredictionBundle(instance_id=instance_id, samples=samples, embedding=embedding)
    truth = {
        "id": instance_id,
        "error_prob": error_prob,
        "latent_kappa": 1.0 - q,
        "realized_error": int(error),
    }
    return instance, bundle, truth


def iter_generate(config: SynthConfig) -> Iterator[Tuple[Instance, PredictionBundle, Dict]]:
    """Stream (instance, bundle, truth row) triples; one instance in memory at a time."""
    config.validate()
    for i in range(config.n_instances):
        yield generate_instance(config, i)


def generate(config: SynthConfig) -> Tuple[List[Instance], List[PredictionBundle], pd.DataFrame]:
    """
    Materialize a whole synthetic dataset.

    Returns (instances, bundles, planted_truth) where planted_truth has
    columns id, error_prob, latent_kappa, realized_error.
    """
    instances, bundles, truth = [], [], []
    for inst, bundle, row in iter_generate(config):
        instances.append(inst)
        bundles.append(bundle)
        truth.append(row)
    frame = pd.DataFrame(truth, columns=["id", "error_prob", "latent_kappa", "realized_error"])
    return instances, bundles, frame


def generate_train_embeddings(config: SynthConfig) -> np.ndarray:
    """(n_train, d_h) training embeddings around the same base as the instances."""
    if config.embedding_dim < 1:
        raise DomainError("embedding_dim must be >= 1 to generate training embeddings.")
    base = _embedding_base(config)
    rng = stream(config.seed, 1, _TRAIN_STREAMS)
    train = base[None, :] + 0.5 * rng.normal(size=(config.n_train, config.embedding_dim))
    return train.astype(np.float32).astype(np.float64)


def write_synthetic(config: SynthConfig, out_dir) -> Dict[str, Path]:
    """
    Write dataset.jsonl, predictions.rgp, truth.csv and, with embeddings,
    train_embeddings.npy into ``out_dir``. Returns the written paths.
    """
    from .data_loader import PredictionWriter, write_dataset, write_table

    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "dataset": out_dir / "dataset.jsonl",
        "predictions": out_dir / "predictions.rgp",
        "truth": out_dir / "truth.csv",
    }

    truth_rows = []
    with PredictionWriter(
        paths["predictions"],
        num_bits=config.num_bits,
        num_samples=config.num_samples,
        embedding_dim=config.embedding_dim,
    ) as writer:

        def instances():
            for inst, bundle, row in iter_generate(config):
                writer.write(bundle)
                truth_rows.append(row)
                yield inst

        write_dataset(paths["dataset"], instances(), num_bits=config.num_bits, cap=config.cap)

    write_table(
        pd.DataFrame(truth_rows, columns=["id", "error_prob", "latent_kappa", "realized_error"]),
        paths["truth"],
    )

    if config.embedding_dim > 0:
        paths["train_embeddings"] = out_dir / "train_embeddings.npy"
        np.save(paths["train_embeddings"], generate_train_embeddings(config))

    logger.info(f"Synthetic data written to {out_dir} ({config.n_instances} instances).")
    return paths



# MONTE-CARLO VALIDATION OF SGR


def planted_selective_risk(noise_level: float, tau: float) -> float:
    """
    True selective risk of threshold tau under the latent model
    kappa = 1 - q, q = noise_level * u, u ~ U(0, 1), loss ~ Bernoulli(q).

    Accepting kappa >= tau keeps u <= a = clip((1 - tau) / noise, 0, 1),
    whose mean error is noise * a / 2. An empty acceptance set has risk 0.
    """
    if noise_level == 0.0 or not math.isfinite(tau):
        return 0.0
    a = min(max((1.0 - tau) / noise_level, 0.0), 1.0)
    return noise_level * a / 2.0


def _sgr_trial(config: SynthConfig, target_risk: float, delta: float, trial: int) -> Dict:
    rng = stream(config.seed, trial, _TRIAL_STREAMS)
    n = config.n_instances
    q = config.noise_level * rng.random(n)
    losses = (rng.random(n) < q).astype(np.float64)
    kappa = 1.0 - q

    result = sgr_select(kappa, losses, target_risk, delta)
    true_risk = planted_selective_risk(config.noise_level, result.tau_star)
    return {
        "trial": trial,
        "tau_star": result.tau_star,
        "feasible": result.feasible,
        "coverage_cal": result.coverage_cal,
        "bound_b_star": result.bound_b_star,
        "true_risk": true_risk,
        "violated": bool(result.feasible and true_risk > target_risk),
    }


def mc_sgr_trials(
    config: SynthConfig,
    target_risk: float,
    delta: float = DEFAULT_DELTA,
    trials: int = 1000,
    threads: int = 1,
) -> pd.DataFrame:
    """
    One row per Monte-Carlo trial: a fresh calibration set of
    ``config.n_instances`` latent draws, SGR on it, and the true risk of the
    chosen threshold.
    """
    if config.difficulty_model is not DifficultyModel.PLANTED_CONFIDENCE:
        raise DomainError("SGR validation needs the planted-confidence model (known error rates).")
    if not 0.0 <= config.noise_level <= 1.0:
        raise DomainError(f"SGR validation needs noise_level in [0, 1], got {config.noise_level}.")
    if trials < 1:
        raise DomainError(f"trials must be >= 1, got {trials}.")

    rows = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_sgr_trial)(config, target_risk, delta, t) for t in range(trials)
    )
    return pd.DataFrame(rows)


def mc_validate_sgr(
    config: SynthConfig,
    target_risk: float,
    delta: float = DEFAULT_DELTA,
    trials: int = 1000,
    threads: int = 1,
) -> float:
    """Fraction of trials whose true selective risk at tau* exceeds r*."""
    frame = mc_sgr_trials(config, target_risk, delta, trials, threads)
    rate = float(frame["violated"].mean())
    logger.info(
        f"SGR validation: r*={target_risk}, delta={delta}, {trials} trials, "
        f"violation rate {rate:.4f}."
    )
    return rate



# ORACLES (slow reference implementations)


_L = np.longdouble


def _oracle_cosine(theta, c) -> np.longdouble:
    dot = _L(0)
    nt = _L(0)
    nc = _L(0)
    for a, b in zip(theta, c):
        dot += _L(a) * _L(b)
        nt += _L(a) * _L(a)
        nc += _L(b) * _L(b)
    return dot / (np.sqrt(nt) * np.sqrt(nc))


def _oracle_softmax(scores, temperature) -> List[np.longdouble]:
    top = max(scores)
    weights = [np.exp((s - top) / _L(temperature)) for s in scores]
    total = sum(weights, _L(0))
    return [w / total for w in weights]


def _oracle_entropy(probs) -> np.longdouble:
    h = _L(0)
    for p in probs:
        if p > 0:
            h -= p * np.log(p)
    return h


def oracle_ranking(theta: np.ndarray, candidates: np.ndarray) -> List[int]:
    """Full similarity list sorted by (-score, index)."""
    scored = [(-_oracle_cosine(theta, c), j) for j, c in enumerate(candidates)]
    return [j for _, j in sorted(scored)]


def oracle_decomposition(
    bundle: PredictionBundle,
    instance: Instance,
    temperature: float,
) -> Tuple[float, float, float]:
    """
    Retrieval-level (total, aleatoric, epistemic), negated, unclamped,
    computed with explicit loops in extended precision.
    """
    S, M = bundle.num_samples, instance.num_candidates
    if M > 64 or S > 16:
        raise DomainError(f"Oracle decomposition is limited to M <= 64 and S <= 16 (got M={M}, S={S}).")

    per_sample = []
    for theta in bundle.samples:
        scores = [_oracle_cosine(theta, c) for c in instance.candidates]
        per_sample.append(_oracle_softmax(scores, temperature))

    mean_probs = [sum((p[j] for p in per_sample), _L(0)) / _L(S) for j in range(M)]
    u_tot = _oracle_entropy(mean_probs)
    u_al = sum((_oracle_entropy(p) for p in per_sample), _L(0)) / _L(S)
    return float(-u_tot), float(-u_al), float(-(u_tot - u_al))


def oracle_bitwise_decomposition(bundle: PredictionBundle) -> Tuple[float, float, float]:
    """Bitwise (total, aleatoric, epistemic), negated, unclamped."""
    S = bundle.num_samples

    def h(p):
        return _oracle_entropy([p, _L(1) - p])

    u_tot = _L(0)
    u_al = _L(0)
    for d in range(bundle.num_bits):
        column = [_L(x) for x in bundle.samples[:, d]]
        u_tot += h(sum(column, _L(0)) / _L(S))
        u_al += sum((h(x) for x in column), _L(0)) / _L(S)
    return float(-u_tot), float(-u_al), float(-(u_tot - u_al))


def _unit(v) -> List[np.longdouble]:
    norm = np.sqrt(sum((_L(x) * _L(x) for x in v), _L(0)))
    return [_L(x) / norm for x in v]


def oracle_knn(embedding: np.ndarray, train: np.ndarray, k: int) -> float:
    """Negated mean distance to the k closest l2-normalized training rows."""
    h = _unit(embedding)
    distances = []
    for row in train:
        r = _unit(row)
        distances.append(np.sqrt(sum(((a - b) ** 2 for a, b in zip(h, r)), _L(0))))
    distances.sort()
    return float(-sum(distances[:k], _L(0)) / _L(k)) + 0.0


def oracle_mahalanobis(embedding: np.ndarray, train: np.ndarray, eps: float = MAHALANOBIS_RIDGE) -> float:
    """Negated Mahalanobis distance with population covariance + eps * I."""
    rows = [_unit(r) for r in train]
    n, d = len(rows), len(rows[0])
    mean = [sum((r[j] for r in rows), _L(0)) / _L(n) for j in range(d)]
    cov = np.zeros((d, d), dtype=np.float64)
    for a in range(d):
        for b in range(d):
            cov[a, b] = float(sum(((r[a] - mean[a]) * (r[b] - mean[b]) for r in rows), _L(0)) / _L(n))
    cov += eps * np.eye(d)

    h = _unit(embedding)
    diff = np.array([float(h[j] - mean[j]) for j in range(d)])
    return float(-math.sqrt(max(float(diff @ np.linalg.solve(cov, diff)), 0.0))) + 0.0


def _exact_tail(k: int, n: int, b: float) -> float:
    return math.fsum(math.comb(n, j) * b**j * (1.0 - b) ** (n - j) for j in range(k + 1))


def oracle_clopper_pearson(errors: int, n: int, delta_prime: float, iterations: int = 200) -> float:
    """Plain bisection on the directly summed binomial tail (moderate n only)."""
    if errors >= n:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(iterations):
        mid = (lo + hi) / 2.0
        if _exact_tail(errors, n, mid) > delta_prime:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2.0


def oracle_curve(losses: Sequence[float], kappa: Sequence[float]) -> Tuple[List[float], List[float], float]:
    """
    (coverage, risk, aurc) with exact rational prefix means and a
    hand-written trapezoid that starts flat at coverage 0.
    """
    n = len(losses)
    order = sorted(range(n), key=lambda i: (-kappa[i], i))
    total = Fraction(0)
    coverage, risk = [], []
    for m, i in enumerate(order, start=1):
        total += Fraction(losses[i])
        coverage.append(Fraction(m, n))
        risk.append(total / m)

    area = risk[0] * coverage[0]
    for j in range(1, n):
        area += (risk[j] + risk[j - 1]) / 2 * (coverage[j] - coverage[j - 1])
    return [float(c) for c in coverage], [float(r) for r in risk], float(area)


def oracle_sgr_coverages(
    kappa: Sequence[float],
    losses: Sequence[int],
    target_risk: float,
    delta_prime: float,
) -> Dict[float, float]:
    """
    Every candidate threshold (each distinct kappa) mapped to its coverage if
    its Clopper-Pearson bound at delta_prime is below r*, else 0.
    """
    n = len(kappa)
    out = {}
    for tau in sorted(set(kappa)):
        acc = [l for k, l in zip(kappa, losses) if k >= tau]
        bound = oracle_clopper_pearson(int(sum(acc)), len(acc), delta_prime)
        out[tau] = len(acc) / n if bound < target_risk else 0.0
    return out
