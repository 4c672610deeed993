"""Window-length theory for the majority-vote detector.

Given a single-frame detector with per-frame accuracy p_hat > 0.5 and
independent errors, a Hoeffding argument yields a window length above which
the voted detector is strictly more accurate. This module evaluates that
bound, the misclassification upper bound behind it, the exact binomial
accuracy of the voted detector, and a seeded Monte-Carlo cross-check.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np


class TheoryError(ValueError):
    pass


@dataclass(frozen=True)
class BoundReport:
    p_hat: float
    raw_bound: float  # right-hand side of the window-length inequality
    min_l: int  # smallest integer strictly above it
    misclassification_at_min_l: float


def _check_p_hat(p_hat: float):
    if not 0.0 < p_hat <= 1.0:
        raise TheoryError(f"p_hat must lie in (0, 1], got {p_hat}")
    if p_hat <= 0.5:
        raise TheoryError(
            f"the window-length bound requires p_hat > 0.5, got {p_hat}"
        )


def min_window_length(p_hat: float) -> BoundReport:
    """Smallest history length guaranteeing the voted detector beats p_hat.

    Evaluates L > 2[ln 2 - ln(1 - p_hat)] / (2 p_hat - 1)^2. A perfect
    single-frame detector (p_hat = 1) needs no history at all.
    """
    _check_p_hat(p_hat)
    if p_hat == 1.0:
        return BoundReport(p_hat=1.0, raw_bound=0.0, min_l=0,
                           misclassification_at_min_l=0.0)
    raw = 2.0 * (math.log(2.0) - math.log(1.0 - p_hat)) / (2.0 * p_hat - 1.0) ** 2
    min_l = math.floor(raw) + 1
    return BoundReport(
        p_hat=p_hat,
        raw_bound=raw,
        min_l=min_l,
        misclassification_at_min_l=misclassification_bound(p_hat, min_l),
    )


def misclassification_bound(p_hat: float, window: int) -> float:
    """Hoeffding upper bound 2 exp(-L (2 p_hat - 1)^2 / 2), capped at 1."""
    _check_p_hat(p_hat)
    return min(1.0, 2.0 * math.exp(-window * (2.0 * p_hat - 1.0) ** 2 / 2.0))


def _log_binom_pmf(n: int, k: np.ndarray, p: float) -> np.ndarray:
    logc = (
        math.lgamma(n + 1)
        - np.array([math.lgamma(x + 1) + math.lgamma(n - x + 1) for x in k])
    )
    return logc + k * math.log(p) + (n - k) * math.log1p(-p)


def exact_majority_accuracy(p_hat: float, window: int, side: str = "adversarial") -> float:
    """Probability the vote over window+1 i.i.d. verdicts labels the frame right.

    Ties (possible only when the vote count window+1 is even) resolve to an
    alarm, so they count as correct on adversarial ground truth and incorrect
    on clean ground truth. Accumulated in log space; safe to window = 10^4.
    """
    if not 0.0 < p_hat < 1.0:
        raise TheoryError(f"p_hat must lie in (0, 1), got {p_hat}")
    if window < 0:
        raise TheoryError("window must be non-negative")
    if side not in ("adversarial", "clean"):
        raise TheoryError(f"side must be adversarial or clean, got {side!r}")
    n = window + 1  # votes: current frame plus `window` past frames
    ks = np.arange(0, n + 1)
    # Y = number of correct votes; strict majority is always correct.
    strict = ks * 2 > n
    correct = strict.copy()
    if n % 2 == 0:
        tie = ks * 2 == n
        if side == "adversarial":
            correct |= tie
    logs = _log_binom_pmf(n, ks[correct], p_hat)
    if logs.size == 0:
        return 0.0
    peak = logs.max()
    return float(math.exp(peak) * np.exp(logs - peak).sum())


@dataclass(frozen=True)
class SimulationResult:
    estimate: float
    half_width: float  # 95% binomial CI half-width
    trials: int
    exact: float

    @property
    def within_ci(self) -> bool:
        return abs(self.estimate - self.exact) <= max(self.half_width, 1e-12)


def simulate_majority(
    p_hat: float, window: int, trials: int, seed: int, side: str = "adversarial"
) -> SimulationResult:
    """Seeded Monte-Carlo estimate of the voted accuracy, with a 95% CI."""
    if trials < 1:
        raise TheoryError("trials must be >= 1")
    # unanimous votes are a valid degenerate case even though the exact
    # binomial oracle is defined on the open interval
    exact = 1.0 if p_hat == 1.0 else exact_majority_accuracy(p_hat, window, side)
    n = window + 1
    rng = np.random.default_rng(seed)
    hits = 0
    chunk = max(1, min(trials, 10_000_000 // max(n, 1)))
    done = 0
    while done < trials:
        b = min(chunk, trials - done)
        correct = rng.random((b, n)) < p_hat
        y = correct.sum(axis=1)
        ok = y * 2 > n
        if n % 2 == 0 and side == "adversarial":
            ok |= y * 2 == n
        hits += int(ok.sum())
        done += b
    est = hits / trials
    half = 1.96 * math.sqrt(max(est * (1.0 - est), 1e-12) / trials)
    return SimulationResult(estimate=est, half_width=half, trials=trials, exact=exact)


def bound_curve(p_hat_grid) -> str:
    """CSV rows (p_hat, raw bound, min L, exact voted accuracy at min L)."""
    out = io.StringIO()
    out.write("p_hat,raw_bound,min_L,exact_p\n")
    for p in p_hat_grid:
        if not 0.5 < p < 1.0:
            raise TheoryError(f"grid value {p} outside (0.5, 1)")
        rep = min_window_length(p)
        exact = exact_majority_accuracy(p, rep.min_l)
        out.write(f"{p:.6g},{rep.raw_bound:.6g},{rep.min_l},{exact:.6g}\n")
    return out.getvalue()
