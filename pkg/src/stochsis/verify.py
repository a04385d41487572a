"""Finite-ensemble, finite-horizon checks of the extinction-rate and time-average bounds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ensemble import EnsembleReport
from .model import ModelParams, TheoremCase, classify

DEFAULT_TOL_CASE_I = 0.25
DEFAULT_TOL_CASE_II = 0.1
DEFAULT_TOL_LEMMA = 0.05
DEFAULT_TOL_IDENTITY = 1e-8
DEFAULT_TOL_DECOMPOSITION = 1e-6
HOELDER_SLACK = 1e-9


@dataclass(frozen=True)
class Verdict:
    check_name: str
    predicted: float
    measured: float
    tolerance: float
    passed: bool
    detail: str = ""

    def to_dict(self) -> dict:
        return dict(
            check_name=self.check_name,
            predicted=self.predicted,
            measured=self.measured,
            tolerance=self.tolerance,
            passed=self.passed,
            detail=self.detail,
        )


def check_theorem(p: ModelParams, report: EnsembleReport, tol_rel: float | None = None) -> Verdict:
    """Compare measured log-slopes with the predicted exponential rate.

    Case I bounds coincide with the small-I Lyapunov exponent, so the mean
    slope is checked two-sided: |mean − bound| ≤ tol·|bound| + 3·stderr.
    Case II bounds are one-sided: the 95% slope quantile must not exceed
    bound·(1 − tol).
    """
    regime = classify(p)
    if not regime.r0s < 1.0:
        raise ValueError(f"extinction-rate check needs R0s < 1, got {regime.r0s!r}")
    bound = regime.rate_bound
    if regime.theorem_case is TheoremCase.CASE_I:
        tol = DEFAULT_TOL_CASE_I if tol_rel is None else tol_rel
        allowed = tol * abs(bound) + 3.0 * report.slope_stderr
        measured = report.slope_mean
        gap = abs(measured - bound)
        return Verdict(
            check_name="theorem_case_i_rate",
            predicted=bound,
            measured=measured,
            tolerance=allowed,
            passed=bool(gap <= allowed),
            detail=f"|mean slope - bound| = {gap:.6g} (stderr {report.slope_stderr:.3g}, n={report.n_paths})",
        )
    tol = DEFAULT_TOL_CASE_II if tol_rel is None else tol_rel
    threshold = bound * (1.0 - tol)
    q95 = report.slope_quantiles[-1]
    return Verdict(
        check_name="theorem_case_ii_bound",
        predicted=bound,
        measured=q95,
        tolerance=tol,
        passed=bool(q95 <= threshold),
        detail=f"95% slope quantile must be <= {threshold:.6g}",
    )


def check_lemma(p: ModelParams, report: EnsembleReport, tol_rel: float = DEFAULT_TOL_LEMMA) -> Verdict:
    """95% quantile of the horizon time-average ⟨I(T)⟩ against the average bound."""
    regime = classify(p)
    q95 = float(np.quantile([s.avg_i_horizon for s in report.per_path], 0.95))
    if p.capacity <= p.threshold_population:
        limit = tol_rel * p.capacity
        name = "lemma_average_vanishes"
    else:
        limit = regime.average_bound * (1.0 + tol_rel)
        name = "lemma_average_bound"
    return Verdict(
        check_name=name,
        predicted=regime.average_bound,
        measured=q95,
        tolerance=tol_rel,
        passed=bool(q95 <= limit),
        detail=f"95% quantile of <I(T)> must be <= {limit:.6g}",
    )


def check_identity(report: EnsembleReport, tol: float = DEFAULT_TOL_IDENTITY) -> Verdict:
    if report.scheme != "em_state":
        raise ValueError(
            f"the integral identity is exact only for em_state paths (got {report.scheme!r}); "
            f"its residual there ({report.max_identity_residual:.3g}) is discretisation error"
        )
    return Verdict(
        check_name="integral_identity",
        predicted=0.0,
        measured=report.max_identity_residual,
        tolerance=tol,
        passed=bool(report.max_identity_residual <= tol),
        detail="max relative residual over all recorded samples",
    )


def check_decomposition(report: EnsembleReport, tol: float = DEFAULT_TOL_DECOMPOSITION) -> Verdict:
    if report.scheme != "em_log":
        raise ValueError(f"the slope decomposition is exact only for em_log paths (got {report.scheme!r})")
    return Verdict(
        check_name="slope_decomposition",
        predicted=0.0,
        measured=report.max_decomposition_residual,
        tolerance=tol,
        passed=bool(report.max_decomposition_residual <= tol),
        detail=f"{report.clamped_paths} of {report.n_paths} paths carry a nonzero clamp term",
    )


def check_martingale(report: EnsembleReport) -> Verdict:
    allowed = 3.0 * report.mart_stderr
    return Verdict(
        check_name="martingale_mean",
        predicted=0.0,
        measured=report.mart_mean,
        tolerance=allowed,
        passed=bool(abs(report.mart_mean) <= allowed),
        detail="ensemble mean of (sigma/t) sum (N - I) dB within 3 standard errors of 0",
    )


def check_hoelder(p: ModelParams, report: EnsembleReport, slack: float = HOELDER_SLACK) -> Verdict:
    allowed = -slack * p.capacity**2
    return Verdict(
        check_name="hoelder_margin",
        predicted=0.0,
        measured=report.min_hoelder_margin,
        tolerance=slack * p.capacity**2,
        passed=bool(report.min_hoelder_margin >= allowed),
        detail="min over recorded samples of <I^2> - <I>^2",
    )


def verify_report(p: ModelParams, report: EnsembleReport) -> list[Verdict]:
    """Every check that applies to this parameter set and scheme.

    The martingale check is skipped when any path stopped at extinction:
    M(τ)/τ at a random stopping time is not centred.
    """
    regime = classify(p)
    verdicts = []
    if regime.r0s < 1.0:
        verdicts.append(check_theorem(p, report))
    verdicts.append(check_lemma(p, report))
    if report.scheme == "em_state":
        verdicts.append(check_identity(report))
    if report.scheme == "em_log":
        verdicts.append(check_decomposition(report))
    verdicts.append(check_hoelder(p, report))
    if report.extinct_fraction == 0.0:
        verdicts.append(check_martingale(report))
    return verdicts


def logistic_reference(p: ModelParams, t):
    """Closed-form noise-free solution I(t) = r·I₀·e^{rt} / (r + β·I₀·(e^{rt} − 1)), r = βN − μ − γ."""
    if p.sigma != 0.0:
        raise ValueError(f"logistic reference requires sigma = 0, got {p.sigma!r}")
    t = np.asarray(t, dtype=np.float64)
    r = p.beta * p.capacity - p.mu - p.gamma
    b, i0 = p.beta, p.i0
    if r > 0:
        # divide through by e^{rt} so large t cannot overflow
        out = r * i0 / (r * np.exp(-r * t) - b * i0 * np.expm1(-r * t))
    elif r < 0:
        out = r * i0 * np.exp(r * t) / (r + b * i0 * np.expm1(r * t))
    else:
        out = i0 / (1.0 + b * i0 * t)
    return float(out) if out.ndim == 0 else out

