"""Path functionals: time averages, integral-identity residuals and log-slopes.

Time averages use ⟨x(t)⟩ = (1/t)·Σ x_k Δt over left endpoints, the same
quadrature the integrators use for their running sums. With that choice the
integrated SDE holds to rounding for the state-space Euler scheme and the
integrated log equation holds to rounding for the log-space scheme.

Most functions accept scalars or NumPy arrays (one entry per path).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .model import ModelParams, small_i_exponent, theorem_coefficient

SAMPLE_DTYPE = np.dtype(
    [
        ("t", "f8"),
        ("i", "f8"),
        ("log_i", "f8"),
        ("sum_i", "f8"),
        ("sum_i2", "f8"),
        ("mart_state", "f8"),
        ("mart_log", "f8"),
        ("clamp_shift", "f8"),
    ]
)

MIN_REGRESSION_SAMPLES = 10


class InsufficientSamplesError(ValueError):
    pass


def running_average(sum_x, t):
    """⟨x(t)⟩ from an accumulated Σ x_k Δt."""
    if np.any(np.asarray(t) <= 0):
        raise ValueError(f"time average needs t > 0, got t={t!r}")
    return sum_x / t


def _safe_div(num, den):
    den = np.asarray(den, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def horizon_average(sum_x, x_stop, t_stop, t_end):
    """⟨x(t_end)⟩ for a path frozen at x_stop from its stopping time onward."""
    return (sum_x + x_stop * (t_end - t_stop)) / t_end


def hoelder_margin(sum_i, sum_i2, t):
    """⟨I²⟩ − ⟨I⟩², nonnegative by Cauchy–Schwarz; zero at t = 0."""
    avg = _safe_div(sum_i, t)
    return _safe_div(sum_i2, t) - avg * avg


def psi_value(p: ModelParams, i0, i_t, mart_state, t):
    """(I(0) − I(t))/(βt) + Σσ(N−I)I ΔB/(βt)."""
    return (i0 - i_t) / (p.beta * t) + mart_state / (p.beta * t)


def psi_from_averages(p: ModelParams, sum_i, sum_i2, t):
    """The remainder ⟨I²⟩ − (N − (μ+γ)/β)·⟨I⟩ read off the running sums.

    Equals :func:`psi_value` exactly for state-space Euler paths; for other
    schemes the two differ by the discretisation error.
    """
    return sum_i2 / t - (p.capacity - p.threshold_population) * (sum_i / t)


def identity_residual(p: ModelParams, i0, i_t, sum_i, sum_i2, mart_state, t, clamp_shift=0.0):
    """Relative residual of ⟨I²⟩ = (N − (μ+γ)/β)⟨I⟩ + ψ(t).

    ``clamp_shift`` is the state-space displacement added by boundary
    clamping, which enters ψ as clamp_shift/(βt); pass 0 to test the bare
    identity. Normalised by the largest term; defined as 0 at t = 0.
    """
    t = np.asarray(t, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        avg_i2 = sum_i2 / t
        linear = (p.capacity - p.threshold_population) * (sum_i / t)
        ps = psi_value(p, i0, i_t, mart_state, t) + clamp_shift / (p.beta * t)
        scale = np.maximum(np.maximum(np.abs(avg_i2), np.abs(linear)), np.abs(ps))
        rel = np.abs(avg_i2 - linear - ps) / np.where(scale > 0, scale, 1.0)
    return np.where(t > 0, rel, 0.0)


def endpoint_slope(i0, log_i_t, t_stop, extinct, extinction_eps):
    """log(I(t)/I(0))/t, or log(eps/I(0))/τ for a path stopped at extinction time τ."""
    log_i0 = np.log(i0)
    with np.errstate(divide="ignore"):
        log_eps = np.log(extinction_eps) if extinction_eps > 0 else -np.inf
    top = np.where(extinct, log_eps, log_i_t) - log_i0
    return top / t_stop


def ols_slope(t, y) -> float:
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    tc = t - t.mean()
    denom = float(tc @ tc)
    if denom == 0.0:
        raise InsufficientSamplesError("regression needs at least two distinct times")
    return float(tc @ (y - y.mean())) / denom


def regression_slope(t, log_i, t_stop) -> float:
    """OLS slope of log I over the samples with t in [t_stop/2, t_stop]."""
    t = np.asarray(t)
    window = (t >= 0.5 * t_stop) & (t <= t_stop)
    n = int(window.sum())
    if n < MIN_REGRESSION_SAMPLES:
        raise InsufficientSamplesError(
            f"{n} samples in [t_stop/2, t_stop]; need {MIN_REGRESSION_SAMPLES}"
        )
    return ols_slope(t[window], np.asarray(log_i)[window])


@dataclass(frozen=True)
class Decomposition:
    """log I(t)/t split into constant + coefficient·⟨I⟩ + Ψ(t).

    ``boundary_term`` is the log-space clamp displacement divided by t. It is
    exactly 0 on a path that never clamped, in which case the three classical
    terms alone add up to ``log_i_over_t``. ``psi`` is the remainder read from
    the running sums (see :func:`psi_from_averages`); ``psi_explicit`` is the
    boundary-plus-martingale formula. ``residual`` is the relative mismatch
    between ``total`` and ``log_i_over_t``.
    """

    constant: float
    coefficient_term: float
    big_psi: float
    boundary_term: float
    log_i_over_t: float
    psi: float
    psi_explicit: float
    residual: float

    @property
    def total(self):
        return self.constant + self.coefficient_term + self.big_psi + self.boundary_term


def decompose(
    p: ModelParams, i0, i_t, log_i_t, sum_i, sum_i2, mart_state, mart_log, t, clamp_shift_log=0.0
) -> Decomposition:
    constant = small_i_exponent(p)
    avg_i = sum_i / t
    coefficient_term = theorem_coefficient(p) * avg_i
    ps = psi_from_averages(p, sum_i, sum_i2, t)
    big_psi = math.log(i0) / t + mart_log / t - 0.5 * p.sigma2 * ps
    boundary_term = clamp_shift_log / t
    target = log_i_t / t
    total = constant + coefficient_term + big_psi + boundary_term
    scale = functools.reduce(
        np.maximum, [np.abs(x) for x in (target, constant, coefficient_term, big_psi, boundary_term)]
    )
    residual = np.abs(total - target) / np.where(scale > 0, scale, 1.0)
    return Decomposition(
        constant=constant,
        coefficient_term=coefficient_term,
        big_psi=big_psi,
        boundary_term=boundary_term,
        log_i_over_t=target,
        psi=ps,
        psi_explicit=psi_value(p, i0, i_t, mart_state, t),
        residual=residual,
    )


@dataclass(frozen=True)
class PathRecord:
    """One simulated trajectory.

    ``samples`` is a structured array (see ``SAMPLE_DTYPE``) recorded every
    ``record_stride`` steps plus the stopping step; the initial state is not
    included. Immutable once built.
    """

    params_hash: str
    params: ModelParams
    scheme: str
    dt: float
    extinction_eps: float
    samples: np.ndarray
    extinct: bool
    t_stop: float
    t_end: float
    n_steps: int
    clamp_count: int
    hoelder_min_margin: float
    identity_residual_max: float

    def __post_init__(self) -> None:
        self.samples.flags.writeable = False

    @property
    def i0(self) -> float:
        return self.params.i0

    @property
    def final(self):
        return self.samples[-1]

    @property
    def avg_i_final(self) -> float:
        return float(running_average(self.final["sum_i"], self.t_stop))

    @property
    def avg_i_horizon(self) -> float:
        f = self.final
        return float(horizon_average(f["sum_i"], f["i"], self.t_stop, self.t_end))

    @property
    def avg_i2_final(self) -> float:
        return float(running_average(self.final["sum_i2"], self.t_stop))

    @property
    def psi_final(self) -> float:
        return psi(self, self.params, self.t_stop)

    @property
    def hoelder_margin(self) -> float:
        f = self.final
        return float(hoelder_margin(f["sum_i"], f["sum_i2"], self.t_stop))

    @property
    def slope_endpoint(self) -> float:
        return slope_endpoint(self)

    @property
    def slope_regression(self) -> float:
        return slope_regression(self)


def sample_at(path: PathRecord, at_t: float):
    ts = path.samples["t"]
    k = int(np.searchsorted(ts, at_t))
    for j in (k - 1, k):
        if 0 <= j < len(ts) and abs(ts[j] - at_t) <= 1e-9 * max(path.dt, abs(at_t)):
            return path.samples[j]
    raise ValueError(f"no recorded sample at t={at_t!r}")


def psi(path: PathRecord, p: ModelParams, at_t: float) -> float:
    if not 0 < at_t <= path.t_stop * (1 + 1e-12):
        raise ValueError(f"at_t must lie in (0, t_stop], got {at_t!r}")
    s = sample_at(path, at_t)
    return float(psi_value(p, path.i0, s["i"], s["mart_state"], s["t"]))


def slope_endpoint(path: PathRecord) -> float:
    f = path.final
    return float(endpoint_slope(path.i0, f["log_i"], path.t_stop, path.extinct, path.extinction_eps))


def slope_regression(path: PathRecord) -> float:
    return regression_slope(path.samples["t"], path.samples["log_i"], path.t_stop)


def slope_decomposition(path: PathRecord, p: ModelParams) -> Decomposition:
    f = path.final
    shift = f["clamp_shift"] if path.scheme == "em_log" else 0.0
    d = decompose(
        p, path.i0, f["i"], f["log_i"], f["sum_i"], f["sum_i2"], f["mart_state"], f["mart_log"], path.t_stop, shift
    )
    return Decomposition(**{k: float(v) for k, v in d.__dict__.items()})


def detect_extinction(samples: np.ndarray, eps: float) -> float | None:
    """Time of the first sample with i ≤ eps, or None."""
    if not eps > 0:
        raise ValueError(f"eps > 0 required, got {eps!r}")
    hits = np.flatnonzero(samples["i"] <= eps)
    return float(samples["t"][hits[0]]) if hits.size else None
