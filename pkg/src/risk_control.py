"""
Distribution-free risk control.

Clopper-Pearson upper bound on a Bernoulli error rate and the SGR
threshold search (selection with guaranteed risk): a binary search over
sorted calibration scores, each step tested at significance delta / k
where k = ceil(log2 n) is the fixed search budget.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import bisect
from scipy.stats import binom

from .config import CALIBRATION_FRACTION, CLOPPER_PEARSON_XTOL, DEFAULT_DELTA, RANDOM_STATE
from .errors import DomainError

logger = logging.getLogger(__name__)



# CLOPPER-PEARSON


def binomial_tail(k: int, n: int, b: float) -> float:
    """P(Bin(n, b) <= k), evaluated through the log-CDF."""
    return float(np.exp(binom.logcdf(k, n, b)))


def clopper_pearson_upper(errors: int, n: int, delta_prime: float) -> float:
    """
    Upper confidence bound b on the error rate given ``errors`` out of ``n``.

    Solves sum_{j<=k} C(n,j) b^j (1-b)^(n-j) = delta_prime for b by bisection
    on the log tail. For k = n the tail is identically 1 and the bound is 1.

    Examples
    --------
    k = 0 gives the closed form 1 - delta_prime ** (1 / n).
    """
    if not 0.0 < delta_prime < 1.0:
        raise DomainError(f"delta' must lie in (0, 1), got {delta_prime}.")
    k, n = int(errors), int(n)
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}.")
    if not 0 <= k <= n:
        raise DomainError(f"Error count {k} outside [0, {n}].")
    if k == n:
        return 1.0

    log_target = math.log(delta_prime)

    def excess(b: float) -> float:
        return float(binom.logcdf(k, n, b)) - log_target

    # The tail decreases from 1 at b=0 to 0 at b=1, so the root is bracketed.
    lo, hi = k / n, 1.0
    if excess(lo) <= 0.0:
        lo = 0.0
    # logcdf(k, n, 1) is -inf for k < n; step just inside the bracket
    hi_value = excess(hi)
    if not math.isfinite(hi_value):
        hi = math.nextafter(1.0, 0.0)
        if excess(hi) > 0.0:
            return hi
    return float(bisect(excess, lo, hi, xtol=CLOPPER_PEARSON_XTOL, maxiter=500))



# SGR


@dataclass(frozen=True)
class SgrStep:
    z: int
    tau: float
    accepted: int
    errors: int
    bound: float
    feasible: bool


@dataclass(frozen=True)
class SgrResult:
    """
    Outcome of the SGR search on one calibration set.

    ``feasible=False`` means no examined threshold certified r*; the
    threshold is then +inf (accept nothing) with coverage 0.
    """

    tau_star: float
    bound_b_star: float
    target_risk: float
    delta: float
    coverage_cal: float
    empirical_risk_cal: float
    iterations: int
    feasible: bool
    n_cal: int
    steps: Tuple[SgrStep, ...] = field(default=(), repr=False)

    def as_row(self) -> dict:
        return {
            "target_risk": self.target_risk,
            "delta": self.delta,
            "tau_star": self.tau_star,
            "bound_b_star": self.bound_b_star,
            "coverage_cal": self.coverage_cal,
            "empirical_risk_cal": self.empirical_risk_cal,
            "iterations": self.iterations,
            "feasible": self.feasible,
            "n_cal": self.n_cal,
        }


def search_budget(n: int) -> int:
    """k = ceil(log2 n), at least 1."""
    return max(1, math.ceil(math.log2(n))) if n > 1 else 1


def _check_binary(losses: np.ndarray) -> np.ndarray:
    losses = np.asarray(losses, dtype=np.float64)
    if not np.all((losses == 0.0) | (losses == 1.0)):
        raise DomainError(
            "SGR requires 0/1 losses (e.g. hit@K misses); similarity losses are not admissible."
        )
    return losses


def sgr_select(
    kappa_cal: np.ndarray,
    losses_cal: np.ndarray,
    target_risk: float,
    delta: float = DEFAULT_DELTA,
) -> SgrResult:
    """
    Pick the acceptance threshold tau* with a certified selective-risk bound.

    Calibration instances are sorted by ascending kappa; threshold index z
    accepts every instance with kappa >= kappa_(z). Each of at most
    k = ceil(log2 n) steps computes the Clopper-Pearson bound at delta / k.
    A feasible step (bound < r*) moves the search toward lower z (more
    coverage), an infeasible one toward higher z. The feasible step with the
    largest coverage is returned.
    """
    kappa = np.asarray(kappa_cal, dtype=np.float64)
    losses = _check_binary(losses_cal)
    if kappa.shape != losses.shape or kappa.ndim != 1:
        raise DomainError(f"kappa {kappa.shape} and losses {losses.shape} must be equal-length vectors.")
    n = kappa.shape[0]
    if n < 1:
        raise DomainError("SGR needs at least one calibration instance.")
    if not target_risk > 0.0:
        raise DomainError(f"Target risk must be > 0, got {target_risk}.")
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta must lie in (0, 1), got {delta}.")

    order = np.lexsort((np.arange(n), kappa))
    sorted_kappa = kappa[order]
    # suffix error counts: errors among sorted positions >= z
    suffix_errors = np.concatenate((np.cumsum(losses[order][::-1])[::-1], [0.0]))

    budget = search_budget(n)
    delta_prime = delta / budget

    steps: List[SgrStep] = []
    best = None
    lo, hi = 0, n - 1
    for _ in range(budget):
        if lo > hi:
            break
        z = (lo + hi) // 2
        tau = float(sorted_kappa[z])
        # ties with tau are accepted too
        first = int(np.searchsorted(sorted_kappa, tau, side="left"))
        accepted = n - first
        errors = int(suffix_errors[first])
        bound = clopper_pearson_upper(errors, accepted, delta_prime) if accepted > 0 else 1.0
        feasible = bound < target_risk
        step = SgrStep(z=z, tau=tau, accepted=accepted, errors=errors, bound=bound, feasible=feasible)
        steps.append(step)
        logger.debug(
            f"SGR step z={z} tau={tau!r} accepted={accepted} errors={errors} bound={bound:.6g}"
        )

        if feasible:
            if best is None or step.accepted > best.accepted:
                best = step
            hi = z - 1
        else:
            lo = z + 1

    if best is None:
        return SgrResult(
            tau_star=math.inf,
            bound_b_star=1.0,
            target_risk=float(target_risk),
            delta=float(delta),
            coverage_cal=0.0,
            empirical_risk_cal=math.nan,
            iterations=budget,
            feasible=False,
            n_cal=n,
            steps=tuple(steps),
        )

    return SgrResult(
        tau_star=best.tau,
        bound_b_star=best.bound,
        target_risk=float(target_risk),
        delta=float(delta),
        coverage_cal=best.accepted / n,
        empirical_risk_cal=best.errors / best.accepted,
        iterations=budget,
        feasible=True,
        n_cal=n,
        steps=tuple(steps),
    )


def evaluate_threshold(kappa_eval: np.ndarray, losses_eval: np.ndarray, tau: float) -> Tuple[float, float]:
    """
    (coverage, empirical risk) of threshold tau on held-out data.
    Risk is NaN when nothing is accepted.
    """
    kappa = np.asarray(kappa_eval, dtype=np.float64)
    losses = np.asarray(losses_eval, dtype=np.float64)
    if kappa.shape != losses.shape:
        raise DomainError(f"kappa {kappa.shape} and losses {losses.shape} differ in shape.")
    if kappa.size == 0:
        return 0.0, math.nan
    accepted = kappa >= tau
    if not accepted.any():
        return 0.0, math.nan
    return float(accepted.mean()), float(losses[accepted].mean())


SWEEP_COLUMNS = [
    "target_risk",
    "delta",
    "tau_star",
    "bound_b_star",
    "coverage_cal",
    "empirical_risk_cal",
    "coverage_eval",
    "empirical_risk_eval",
    "iterations",
    "feasible",
    "n_cal",
    "n_eval",
]


def sgr_sweep(
    kappa_cal: np.ndarray,
    losses_cal: np.ndarray,
    kappa_eval: np.ndarray,
    losses_eval: np.ndarray,
    targets: Sequence[float],
    delta: float = DEFAULT_DELTA,
) -> pd.DataFrame:
    """Run SGR for every target risk and check each threshold on the evaluation half."""
    rows = []
    for r in targets:
        result = sgr_select(kappa_cal, losses_cal, r, delta)
        coverage_eval, risk_eval = evaluate_threshold(kappa_eval, losses_eval, result.tau_star)
        rows.append(
            {
                **result.as_row(),
                "coverage_eval": coverage_eval,
                "empirical_risk_eval": risk_eval,
                "n_eval": int(np.asarray(kappa_eval).shape[0]),
            }
        )
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)



# CALIBRATION SPLIT


def calibration_split(dataset_ids: Sequence[str], seed: int = RANDOM_STATE) -> Tuple[List[str], List[str]]:
    """
    Deterministic 50/50 split; the calibration half gets the extra element
    when n is odd. Both halves keep the input order.
    """
    ids = list(dataset_ids)
    n = len(ids)
    if n < 2:
        raise DomainError(f"Calibration split needs at least 2 instances, got {n}.")

    rng = np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))
    permutation = rng.permutation(n)
    n_cal = math.ceil(n * CALIBRATION_FRACTION)
    cal_mask = np.zeros(n, dtype=bool)
    cal_mask[permutation[:n_cal]] = True

    cal_ids = [i for i, keep in zip(ids, cal_mask) if keep]
    eval_ids = [i for i, keep in zip(ids, cal_mask) if not keep]
    return cal_ids, eval_ids
