"""Stochastic SIS model: parameters, SDE coefficients and regime classification.

The infected count obeys the scalar Itô equation

    dI = [(βN − μ − γ) I − β I²] dt + σ (N − I) I dB

on the open interval (0, N), with S = N − I eliminated. All quantities are in
absolute individuals; N is the total population, not a fraction.
"""

from __future__ import annotations

import dataclasses
import enum
import math
import numbers
from dataclasses import dataclass


class InvalidParameterError(ValueError):
    """Raised when a parameter set violates one of its invariants."""


@dataclass(frozen=True)
class ModelParams:
    """Constants of the SDE plus the initial infected count.

    Parameters
    ----------
    beta : float
        Transmission coefficient, 1/(individual·time).
    gamma : float
        Cure rate, 1/time.
    mu : float
        Per-capita death rate, 1/time.
    sigma : float
        Noise intensity; ``sigma**2`` is the variance rate.
    capacity : float
        Total population N.
    i0 : float
        Initial infected count, strictly inside (0, N).
    """

    beta: float
    gamma: float
    mu: float
    sigma: float
    capacity: float
    i0: float

    def __post_init__(self) -> None:
        for name in ("beta", "gamma", "mu", "sigma", "capacity", "i0"):
            value = getattr(self, name)
            if not isinstance(value, numbers.Real) or not math.isfinite(value):
                raise InvalidParameterError(f"{name} must be a finite number, got {value!r}")
            object.__setattr__(self, name, float(value))
        for name in ("beta", "gamma", "mu", "capacity"):
            if getattr(self, name) <= 0:
                raise InvalidParameterError(f"{name} > 0 violated ({name}={getattr(self, name)!r})")
        if self.sigma < 0:
            raise InvalidParameterError(f"sigma >= 0 violated (sigma={self.sigma!r})")
        if not 0 < self.i0 < self.capacity:
            raise InvalidParameterError(
                f"0 < i0 < capacity violated (i0={self.i0!r}, capacity={self.capacity!r})"
            )

    @classmethod
    def from_sigma2(cls, *, beta, gamma, mu, sigma2, capacity, i0) -> "ModelParams":
        if sigma2 < 0:
            raise InvalidParameterError(f"sigma2 >= 0 violated (sigma2={sigma2!r})")
        return cls(beta=beta, gamma=gamma, mu=mu, sigma=math.sqrt(sigma2), capacity=capacity, i0=i0)

    @property
    def sigma2(self) -> float:
        return self.sigma * self.sigma

    @property
    def removal_rate(self) -> float:
        """μ + γ, the total outflow rate from the infected class."""
        return self.mu + self.gamma

    @property
    def threshold_population(self) -> float:
        """(μ + γ)/β; the disease-free state is deterministically stable below it."""
        return self.removal_rate / self.beta

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def drift(i, p: ModelParams):
    """(βN − μ − γ)·i − β·i²."""
    return (p.beta * p.capacity - p.mu - p.gamma) * i - p.beta * i * i


def diffusion(i, p: ModelParams):
    """σ·(N − i)·i."""
    return p.sigma * (p.capacity - i) * i


def log_drift(i, p: ModelParams):
    """Drift of log I after the Itô correction: βN − μ − γ − β·i − (σ²/2)(N − i)²."""
    gap = p.capacity - i
    return p.beta * p.capacity - p.mu - p.gamma - p.beta * i - 0.5 * p.sigma2 * gap * gap


def log_drift_expanded(i, p: ModelParams):
    """Same quantity as :func:`log_drift`, written as a polynomial in i."""
    return small_i_exponent(p) + (p.sigma2 * p.capacity - p.beta) * i - 0.5 * p.sigma2 * i * i


def small_i_exponent(p: ModelParams) -> float:
    """βN − μ − γ − σ²N²/2, the growth rate of log I as I → 0."""
    return p.beta * p.capacity - p.mu - p.gamma - 0.5 * p.sigma2 * p.capacity**2


def r0s(p: ModelParams) -> float:
    """Stochastic basic reproduction number βN/(μ+γ) − σ²N²/(2(μ+γ))."""
    return p.beta * p.capacity / p.removal_rate - p.sigma2 * p.capacity**2 / (2.0 * p.removal_rate)


def theorem_coefficient(p: ModelParams) -> float:
    """(σ²/2)(N + (μ+γ)/β) − β, the weight of ⟨I⟩ in the log-slope decomposition."""
    return 0.5 * p.sigma2 * (p.capacity + p.threshold_population) - p.beta


class TheoremCase(str, enum.Enum):
    CASE_I = "CaseI"
    CASE_II = "CaseII"


@dataclass(frozen=True)
class RegimeReport:
    """Threshold algebra for one parameter set.

    ``extinct_low_noise`` is R₀ˢ < 1 with σ² ≤ β/N; ``extinct_high_noise`` is
    σ² > max(β/N, β²/(2(μ+γ))). Both were the previously known sufficient
    conditions for extinction. ``conjecture_region`` is the gap between them
    that the extinction result closes.
    """

    r0s: float
    extinct_low_noise: bool
    extinct_high_noise: bool
    conjecture_region: bool
    persistence: bool
    theorem_case: TheoremCase
    rate_bound: float
    average_bound: float
    deterministic: bool
    critical: bool

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["theorem_case"] = self.theorem_case.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RegimeReport":
        d = dict(d)
        d["theorem_case"] = TheoremCase(d["theorem_case"])
        return cls(**d)


def theorem_case(p: ModelParams) -> TheoremCase:
    k = p.threshold_population
    if 0.5 * p.sigma2 * (p.capacity + k) <= p.beta or p.capacity <= k:
        return TheoremCase.CASE_I
    return TheoremCase.CASE_II


def classify(p: ModelParams) -> RegimeReport:
    if not isinstance(p, ModelParams):
        raise InvalidParameterError(f"expected ModelParams, got {type(p).__name__}")
    r = r0s(p)
    s2 = p.sigma2
    low = p.beta / p.capacity
    high = p.beta**2 / (2.0 * p.removal_rate)
    critical = r == 1.0

    case = theorem_case(p)
    if case is TheoremCase.CASE_I:
        rate_bound = p.removal_rate * (r - 1.0)
    else:
        rate_bound = -0.5 * s2 * p.threshold_population**2

    k = p.threshold_population
    average_bound = 0.0 if p.capacity <= k else p.capacity - k

    return RegimeReport(
        r0s=r,
        extinct_low_noise=bool(r < 1.0 and s2 <= low),
        extinct_high_noise=bool(not critical and s2 > max(low, high)),
        conjecture_region=bool(r < 1.0 and low < s2 <= high),
        persistence=bool(r > 1.0),
        theorem_case=case,
        rate_bound=rate_bound,
        average_bound=average_bound,
        deterministic=p.sigma == 0.0,
        critical=critical,
    )

