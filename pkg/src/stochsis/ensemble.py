"""Monte Carlo ensembles of independent paths with order-independent aggregation."""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import InvalidParameterError, ModelParams, RegimeReport, classify
from .pathstats import SAMPLE_DTYPE, InsufficientSamplesError, PathRecord, decompose, endpoint_slope, horizon_average, psi_value, regression_slope
from .sde import BatchResult, BrownianStream, Scheme, SchemeConfig, integrate, record_from_batch

QUANTILE_LEVELS = (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass(frozen=True)
class EnsembleConfig:
    n_paths: int = 100
    base_seed: int = 0
    max_workers: int = 1

    def __post_init__(self) -> None:
        if int(self.n_paths) != self.n_paths or self.n_paths < 1:
            raise InvalidParameterError(f"n_paths >= 1 violated (n_paths={self.n_paths!r})")
        if int(self.max_workers) != self.max_workers or self.max_workers < 1:
            raise InvalidParameterError(f"max_workers >= 1 violated (max_workers={self.max_workers!r})")
        if not 0 <= int(self.base_seed) < 2**64:
            raise InvalidParameterError(f"base_seed must fit in 64 bits (base_seed={self.base_seed!r})")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class PathSummary:
    path_index: int
    seed: int
    extinct: bool
    t_stop: float
    slope_endpoint: float
    slope_regression: float
    avg_i: float
    avg_i_horizon: float
    avg_i2: float
    psi: float
    mart_state_over_t: float
    mart_log_over_t: float
    clamp_count: int
    unreliable: bool
    log_i_final: float
    hoelder_min_margin: float
    identity_residual_max: float
    decomposition_residual: float
    boundary_term: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PathSummary":
        return cls(**{k: (math.nan if d[k] is None else d[k]) for k in d})


@dataclass(frozen=True)
class EnsembleReport:
    regime: RegimeReport
    n_paths: int
    extinct_fraction: float
    slope_mean: float
    slope_stderr: float
    slope_quantiles: tuple[float, ...]
    avg_i_mean: float
    mart_mean: float
    mart_stderr: float
    max_identity_residual: float
    per_path: tuple[PathSummary, ...]
    scheme: str = ""
    model: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    base_seed: int = 0
    avg_i_quantiles: tuple[float, ...] = ()
    avg_i_horizon_quantiles: tuple[float, ...] = ()
    min_hoelder_margin: float = math.nan
    max_decomposition_residual: float = math.nan
    unreliable_paths: int = 0
    clamped_paths: int = 0

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["regime"] = self.regime.to_dict()
        d["slope_quantiles"] = list(self.slope_quantiles)
        d["avg_i_quantiles"] = list(self.avg_i_quantiles)
        d["avg_i_horizon_quantiles"] = list(self.avg_i_horizon_quantiles)
        d["per_path"] = [s.to_dict() for s in self.per_path]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleReport":
        d = {k: (math.nan if v is None else v) for k, v in d.items()}
        d["regime"] = RegimeReport.from_dict(d["regime"])
        d["slope_quantiles"] = tuple(d["slope_quantiles"])
        d["avg_i_quantiles"] = tuple(d.get("avg_i_quantiles", ()))
        d["avg_i_horizon_quantiles"] = tuple(d.get("avg_i_horizon_quantiles", ()))
        d["per_path"] = tuple(PathSummary.from_dict(s) for s in d["per_path"])
        return cls(**d)


def _mean_stderr(x: np.ndarray) -> tuple[float, float]:
    mean = float(np.mean(x))
    if len(x) < 2:
        return mean, 0.0
    return mean, float(np.std(x, ddof=1) / math.sqrt(len(x)))


def aggregate(summaries) -> dict:
    """Fold path summaries, in path-index order, into the report statistics.

    Quantiles interpolate linearly on the sorted sample; standard errors are
    sample standard deviation over √n.
    """
    items = sorted(summaries, key=lambda s: s.path_index)
    if not items:
        raise ValueError("cannot aggregate an empty ensemble")
    slopes = np.array([s.slope_endpoint for s in items])
    avg_i = np.array([s.avg_i for s in items])
    mart = np.array([s.mart_log_over_t for s in items])
    slope_mean, slope_stderr = _mean_stderr(slopes)
    mart_mean, mart_stderr = _mean_stderr(mart)
    return dict(
        n_paths=len(items),
        extinct_fraction=float(np.mean([s.extinct for s in items])),
        slope_mean=slope_mean,
        slope_stderr=slope_stderr,
        slope_quantiles=tuple(float(q) for q in np.quantile(slopes, QUANTILE_LEVELS)),
        avg_i_mean=float(np.mean(avg_i)),
        mart_mean=mart_mean,
        mart_stderr=mart_stderr,
        max_identity_residual=float(max(s.identity_residual_max for s in items)),
        per_path=tuple(items),
        avg_i_quantiles=tuple(float(q) for q in np.quantile(avg_i, QUANTILE_LEVELS)),
        avg_i_horizon_quantiles=tuple(
            float(q) for q in np.quantile([s.avg_i_horizon for s in items], QUANTILE_LEVELS)
        ),
        min_hoelder_margin=float(min(s.hoelder_min_margin for s in items)),
        max_decomposition_residual=float(max(s.decomposition_residual for s in items)),
        unreliable_paths=int(sum(s.unreliable for s in items)),
        clamped_paths=int(sum(s.clamp_count > 0 for s in items)),
    )


def summarize_batch(batch: BatchResult, base_seed: int, indices) -> list[PathSummary]:
    p, cfg = batch.params, batch.config
    fin = batch.final
    t = batch.t_stop
    slopes = endpoint_slope(p.i0, fin.log_i, t, batch.extinct, cfg.extinction_eps)
    psis = psi_value(p, p.i0, fin.i, fin.mart_state, t)
    log_shift = fin.clamp_shift if cfg.scheme is Scheme.EM_LOG else 0.0
    dec = decompose(p, p.i0, fin.i, fin.log_i, fin.sum_i, fin.sum_i2, fin.mart_state, fin.mart_log, t, log_shift)
    boundary = np.broadcast_to(dec.boundary_term, t.shape)
    unreliable = batch.unreliable
    horizon = horizon_average(fin.sum_i, fin.i, t, cfg.n_steps * cfg.dt)

    out = []
    for j, idx in enumerate(indices):
        n = int(batch.n_samples[j])
        try:
            reg = regression_slope(batch.samples["t"][:n, j], batch.samples["log_i"][:n, j], t[j])
        except InsufficientSamplesError:
            reg = math.nan
        out.append(
            PathSummary(
                path_index=int(idx),
                seed=int(base_seed),
                extinct=bool(batch.extinct[j]),
                t_stop=float(t[j]),
                slope_endpoint=float(slopes[j]),
                slope_regression=float(reg),
                avg_i=float(fin.sum_i[j] / t[j]),
                avg_i_horizon=float(horizon[j]),
                avg_i2=float(fin.sum_i2[j] / t[j]),
                psi=float(psis[j]),
                mart_state_over_t=float(fin.mart_state[j] / t[j]),
                mart_log_over_t=float(fin.mart_log[j] / t[j]),
                clamp_count=int(fin.clamp_count[j]),
                unreliable=bool(unreliable[j]),
                log_i_final=float(fin.log_i[j]),
                hoelder_min_margin=float(batch.hoelder_min[j]),
                identity_residual_max=float(batch.identity_max[j]),
                decomposition_residual=float(dec.residual[j]),
                boundary_term=float(boundary[j]),
            )
        )
    return out


def _run_chunk(p: ModelParams, cfg: SchemeConfig, base_seed: int, indices: list[int], keep_paths: bool):
    streams = [BrownianStream(base_seed, k) for k in indices]
    fields = SAMPLE_DTYPE.names if keep_paths else ("t", "log_i")
    batch = integrate(p, cfg, streams, fields=fields)
    summaries = summarize_batch(batch, base_seed, indices)
    records = [record_from_batch(batch, j, base_seed, k) for j, k in enumerate(indices)] if keep_paths else []
    return summaries, records


def _chunks(n: int, parts: int) -> list[list[int]]:
    parts = max(1, min(parts, n))
    bounds = np.linspace(0, n, parts + 1).astype(int)
    return [list(range(a, b)) for a, b in zip(bounds[:-1], bounds[1:])]


def run_ensemble(
    p: ModelParams, cfg: SchemeConfig, ec: EnsembleConfig, *, keep_paths: bool = False
) -> EnsembleReport | tuple[EnsembleReport, list[PathRecord]]:
    """Simulate ``ec.n_paths`` paths, path k driven by the stream (base_seed, k).

    Paths are split into ``max_workers`` contiguous chunks, each integrated
    as one vectorised batch (in worker processes when ``max_workers > 1``).
    The report depends only on (p, cfg, ec.n_paths, ec.base_seed). With
    ``keep_paths`` the full PathRecords are returned alongside the report.
    """
    cfg = cfg.resolve(p)
    chunks = _chunks(ec.n_paths, ec.max_workers)
    if len(chunks) == 1:
        results = [_run_chunk(p, cfg, ec.base_seed, chunks[0], keep_paths)]
    else:
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            futures = [pool.submit(_run_chunk, p, cfg, ec.base_seed, c, keep_paths) for c in chunks]
            results = [f.result() for f in futures]

    summaries = [s for res in results for s in res[0]]
    records = [r for res in results for r in res[1]]
    report = EnsembleReport(
        regime=classify(p),
        scheme=cfg.scheme.value,
        model=p.to_dict(),
        config=cfg.to_dict(),
        base_seed=int(ec.base_seed),
        **aggregate(summaries),
    )
    if keep_paths:
        return report, records
    return report
