"""Euler–Maruyama (state and log space) and Milstein integration of the SIS SDE.

Every step function works elementwise, so a :class:`StepState` may hold
scalars (one path) or 1-D arrays (a batch of independent paths advanced in
lockstep). Running sums use the left-endpoint value of each step, which makes
the integrated form of the SDE hold exactly for the discrete state scheme.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .model import InvalidParameterError, ModelParams, diffusion, drift, log_drift
from .pathstats import SAMPLE_DTYPE, PathRecord, hoelder_margin, identity_residual

MAX_RECORDED_SAMPLES = 10_000
CLAMP_FAILURE_FRACTION = 0.01
_BLOCK_STEPS = 4096
_UINT64 = (1 << 64) - 1


class Scheme(str, enum.Enum):
    EM_STATE = "em_state"
    EM_LOG = "em_log"
    MILSTEIN = "milstein"

    @classmethod
    def parse(cls, value) -> "Scheme":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {
            "eulermaruyamastate": cls.EM_STATE,
            "eulermaruyamalog": cls.EM_LOG,
            "em": cls.EM_STATE,
            "log": cls.EM_LOG,
        }
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise InvalidParameterError(
                f"unknown scheme {value!r}; expected one of {[s.value for s in cls]}"
            ) from None


class SchemeUnreliableError(RuntimeError):
    """Clamping fired on more than 1% of steps; the step size is too coarse."""

    def __init__(self, record: PathRecord):
        self.record = record
        super().__init__(
            f"clamped {record.clamp_count} of {record.n_steps} steps "
            f"(> {CLAMP_FAILURE_FRACTION:.0%}); reduce dt"
        )


@dataclass(frozen=True)
class SchemeConfig:
    """Integrator settings.

    ``extinction_eps=None`` means 1e-10·N, resolved against the model by
    :meth:`resolve`. ``extinction_eps=0`` disables the extinction stop.
    ``record_stride=None`` picks the smallest stride keeping at most
    10⁴ recorded samples.
    """

    scheme: Scheme = Scheme.EM_LOG
    dt: float = 1e-3
    t_end: float = 100.0
    clamp_eps: float = 1e-12
    extinction_eps: float | None = None
    record_stride: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "scheme", Scheme.parse(self.scheme))
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise InvalidParameterError(f"dt > 0 violated (dt={self.dt!r})")
        if not (self.t_end > 0 and math.isfinite(self.t_end)):
            raise InvalidParameterError(f"t_end > 0 violated (t_end={self.t_end!r})")
        if not self.dt < self.t_end:
            raise InvalidParameterError(f"dt < t_end violated (dt={self.dt!r}, t_end={self.t_end!r})")
        if not 0 < self.clamp_eps < 1e-3:
            raise InvalidParameterError(f"0 < clamp_eps < 1e-3 violated (clamp_eps={self.clamp_eps!r})")
        if self.extinction_eps is not None and not self.extinction_eps >= 0:
            raise InvalidParameterError(
                f"extinction_eps >= 0 violated (extinction_eps={self.extinction_eps!r})"
            )
        if self.record_stride is not None and (
            int(self.record_stride) != self.record_stride or self.record_stride < 1
        ):
            raise InvalidParameterError(
                f"record_stride >= 1 violated (record_stride={self.record_stride!r})"
            )

    @property
    def n_steps(self) -> int:
        ratio = self.t_end / self.dt
        nearest = round(ratio)
        if abs(ratio - nearest) <= 1e-9 * max(1.0, ratio):
            return int(nearest)
        return int(math.ceil(ratio))

    def resolve(self, p: ModelParams) -> "SchemeConfig":
        """Fill defaults that depend on the model and check cross-invariants."""
        eps = 1e-10 * p.capacity if self.extinction_eps is None else float(self.extinction_eps)
        if not eps < p.i0:
            raise InvalidParameterError(f"extinction_eps < i0 violated ({eps!r} >= {p.i0!r})")
        stride = self.record_stride
        if stride is None:
            stride = max(1, math.ceil(self.n_steps / MAX_RECORDED_SAMPLES))
        return dataclasses.replace(self, extinction_eps=eps, record_stride=int(stride))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scheme"] = self.scheme.value
        return d


# --- Brownian increments -------------------------------------------------------


class BrownianStream:
    """Independent N(0, dt) increments for one path.

    Backed by the Philox counter-based generator keyed with the pair
    ``(base_seed, path_index)``, so distinct indices can never share a
    stream and a path's draws do not depend on how many other paths exist or
    in what order they are simulated.
    """

    def __init__(self, base_seed: int, path_index: int = 0):
        self.base_seed = int(base_seed) & _UINT64
        self.path_index = int(path_index) & _UINT64
        bitgen = np.random.Philox(key=np.array([self.base_seed, self.path_index], dtype=np.uint64))
        self._gen = np.random.Generator(bitgen)

    def increment(self, dt: float) -> float:
        return math.sqrt(dt) * float(self._gen.standard_normal())

    def increments(self, dt: float, n: int) -> np.ndarray:
        return math.sqrt(dt) * self._gen.standard_normal(n)


def brownian_increment(stream: BrownianStream, dt: float) -> float:
    if not dt > 0:
        raise ValueError(f"dt > 0 required, got {dt!r}")
    return stream.increment(dt)


# --- step state and schemes ----------------------------------------------------


@dataclass(frozen=True)
class StepState:
    """Integrator state after ``step`` steps.

    ``mart_state`` accumulates Σ σ(N−I_k)I_k ΔB_k and ``mart_log`` accumulates
    Σ σ(N−I_k) ΔB_k. ``log_i`` is carried alongside ``i`` so the log-space
    scheme keeps full resolution after ``exp`` underflows. ``clamp_shift`` is
    the total displacement added by clamping, in the variable the scheme
    integrates (I for the state schemes, log I for the log scheme); it is
    exactly zero on a path that never clamped.
    """

    step: int | np.ndarray
    t: float | np.ndarray
    i: float | np.ndarray
    log_i: float | np.ndarray
    sum_i: float | np.ndarray
    sum_i2: float | np.ndarray
    mart_state: float | np.ndarray
    mart_log: float | np.ndarray
    clamp_count: int | np.ndarray
    clamp_shift: float | np.ndarray

    @classmethod
    def initial(cls, p: ModelParams, n_paths: int | None = None) -> "StepState":
        if n_paths is None:
            return cls(0, 0.0, p.i0, math.log(p.i0), 0.0, 0.0, 0.0, 0.0, 0, 0.0)
        z = np.zeros(n_paths)
        return cls(
            step=0,
            t=0.0,
            i=np.full(n_paths, p.i0),
            log_i=np.full(n_paths, math.log(p.i0)),
            sum_i=z.copy(),
            sum_i2=z.copy(),
            mart_state=z.copy(),
            mart_log=z.copy(),
            clamp_count=np.zeros(n_paths, dtype=np.int64),
            clamp_shift=z.copy(),
        )

    def take(self, index) -> "StepState":
        """Select a subset of paths from a batched state."""
        return StepState(
            step=self.step,
            t=self.t,
            i=self.i[index],
            log_i=self.log_i[index],
            sum_i=self.sum_i[index],
            sum_i2=self.sum_i2[index],
            mart_state=self.mart_state[index],
            mart_log=self.mart_log[index],
            clamp_count=self.clamp_count[index],
            clamp_shift=self.clamp_shift[index],
        )


def _advance(s: StepState, p: ModelParams, dt, dW, i_new, log_new, clamped, shift) -> StepState:
    step = s.step + 1
    return StepState(
        step=step,
        t=step * dt,
        i=i_new,
        log_i=log_new,
        sum_i=s.sum_i + s.i * dt,
        sum_i2=s.sum_i2 + s.i * s.i * dt,
        mart_state=s.mart_state + diffusion(s.i, p) * dW,
        mart_log=s.mart_log + p.sigma * (p.capacity - s.i) * dW,
        clamp_count=s.clamp_count + clamped,
        clamp_shift=s.clamp_shift + shift,
    )


def _clamp_both(i_new, p: ModelParams, clamp_eps: float):
    lo = clamp_eps * p.capacity
    hi = (1.0 - clamp_eps) * p.capacity
    clamped = (i_new < lo) | (i_new > hi)
    return np.clip(i_new, lo, hi), clamped


def step_em_state(s: StepState, p: ModelParams, dt, dW, clamp_eps: float = 1e-12) -> StepState:
    """Explicit Euler–Maruyama on I itself, clamped into [εN, (1−ε)N]."""
    raw = s.i + drift(s.i, p) * dt + diffusion(s.i, p) * dW
    i_new, clamped = _clamp_both(raw, p, clamp_eps)
    return _advance(s, p, dt, dW, i_new, np.log(i_new), clamped, i_new - raw)


def step_milstein(s: StepState, p: ModelParams, dt, dW, clamp_eps: float = 1e-12) -> StepState:
    """Euler–Maruyama plus ½·b·b′·(ΔB² − Δt) with b′(I) = σ(N − 2I)."""
    b = diffusion(s.i, p)
    b_prime = p.sigma * (p.capacity - 2.0 * s.i)
    raw = s.i + drift(s.i, p) * dt + b * dW + 0.5 * b * b_prime * (dW * dW - dt)
    i_new, clamped = _clamp_both(raw, p, clamp_eps)
    return _advance(s, p, dt, dW, i_new, np.log(i_new), clamped, i_new - raw)


def step_em_log(s: StepState, p: ModelParams, dt, dW, clamp_eps: float = 1e-12) -> StepState:
    """Euler–Maruyama on log I. Positivity is structural; only I ≥ N is clamped."""
    log_new = s.log_i + log_drift(s.i, p) * dt + p.sigma * (p.capacity - s.i) * dW
    i_new = np.exp(log_new)
    clamped = i_new >= p.capacity
    shift = 0.0
    if np.any(clamped):
        top = (1.0 - clamp_eps) * p.capacity
        i_new = np.where(clamped, top, i_new)
        kept = np.where(clamped, math.log(top), log_new)
        shift = kept - log_new
        log_new = kept
    return _advance(s, p, dt, dW, i_new, log_new, clamped, shift)


STEP_FUNCTIONS = {
    Scheme.EM_STATE: step_em_state,
    Scheme.EM_LOG: step_em_log,
    Scheme.MILSTEIN: step_milstein,
}


# --- batched integration -------------------------------------------------------


@dataclass
class BatchResult:
    """Raw output of :func:`integrate` for ``n`` paths.

    ``final`` holds each path's state at its stopping step. ``samples`` maps
    field name to an array of shape (max_samples, n); column j is valid for
    its first ``n_samples[j]`` rows.
    """

    params: ModelParams
    config: SchemeConfig
    final: StepState
    stop_step: np.ndarray
    extinct: np.ndarray
    samples: dict[str, np.ndarray]
    n_samples: np.ndarray
    hoelder_min: np.ndarray
    identity_max: np.ndarray

    @property
    def n_paths(self) -> int:
        return len(self.stop_step)

    @property
    def t_stop(self) -> np.ndarray:
        return self.stop_step * self.config.dt

    @property
    def unreliable(self) -> np.ndarray:
        return self.final.clamp_count > CLAMP_FAILURE_FRACTION * np.maximum(self.stop_step, 1)

    def path_samples(self, j: int) -> np.ndarray:
        n = int(self.n_samples[j])
        out = np.empty(n, dtype=SAMPLE_DTYPE)
        for name in SAMPLE_DTYPE.names:
            out[name] = self.samples[name][:n, j]
        return out


def _rows_from_streams(streams: Sequence[BrownianStream], dt: float, n_steps: int) -> Iterator[np.ndarray]:
    done = 0
    while done < n_steps:
        m = min(_BLOCK_STEPS, n_steps - done)
        block = np.stack([s.increments(dt, m) for s in streams], axis=1)
        yield from block
        done += m


def integrate(
    p: ModelParams,
    cfg: SchemeConfig,
    increments,
    *,
    fields: Sequence[str] = SAMPLE_DTYPE.names,
) -> BatchResult:
    """Advance a batch of paths through a common grid of ``cfg.n_steps`` steps.

    Parameters
    ----------
    increments
        Either a sequence of :class:`BrownianStream` (one per path) or an
        array of Brownian increments with shape (n_steps, n_paths).
    fields
        Sample fields to retain at record points. Streaming diagnostics
        (Hölder margin, integral-identity residual) are always computed.
    """
    cfg = cfg.resolve(p)
    n_steps = cfg.n_steps
    dt = cfg.dt
    stride = cfg.record_stride

    if isinstance(increments, np.ndarray):
        dw = np.asarray(increments, dtype=np.float64)
        if dw.ndim == 1:
            dw = dw[:, None]
        if dw.shape[0] < n_steps:
            raise ValueError(f"need {n_steps} increment rows, got {dw.shape[0]}")
        n_paths = dw.shape[1]
        rows: Iterator[np.ndarray] = iter(dw[:n_steps])
    else:
        streams = list(increments)
        n_paths = len(streams)
        rows = _rows_from_streams(streams, dt, n_steps)
    if n_paths < 1:
        raise ValueError("at least one path is required")

    step_fn = STEP_FUNCTIONS[cfg.scheme]
    state_space = cfg.scheme is not Scheme.EM_LOG
    log_eps = math.log(cfg.extinction_eps) if cfg.extinction_eps > 0 else -math.inf

    max_samples = n_steps // stride + 1
    keep = [f for f in SAMPLE_DTYPE.names if f in fields]
    samples = {f: np.full((max_samples, n_paths), np.nan) for f in keep}
    n_samples = np.zeros(n_paths, dtype=np.int64)
    hoelder_min = np.full(n_paths, np.inf)
    identity_max = np.zeros(n_paths)

    final = StepState.initial(p, n_paths)
    stop_step = np.full(n_paths, n_steps, dtype=np.int64)
    extinct = np.zeros(n_paths, dtype=bool)

    state = StepState.initial(p, n_paths)
    active = np.arange(n_paths)
    full_batch = True

    def record(st: StepState, idx: np.ndarray) -> None:
        slot = n_samples[idx]
        values = {
            "t": np.full(len(idx), st.t),
            "i": st.i,
            "log_i": st.log_i,
            "sum_i": st.sum_i,
            "sum_i2": st.sum_i2,
            "mart_state": st.mart_state,
            "mart_log": st.mart_log,
            "clamp_shift": st.clamp_shift,
        }
        for f in keep:
            samples[f][slot, idx] = values[f]
        n_samples[idx] = slot + 1
        margin = hoelder_margin(st.sum_i, st.sum_i2, st.t)
        hoelder_min[idx] = np.minimum(hoelder_min[idx], margin)
        shift = st.clamp_shift if state_space else 0.0
        resid = identity_residual(p, p.i0, st.i, st.sum_i, st.sum_i2, st.mart_state, st.t, shift)
        identity_max[idx] = np.maximum(identity_max[idx], resid)

    def retire(st: StepState, idx: np.ndarray, step: int) -> None:
        for f in ("i", "log_i", "sum_i", "sum_i2", "mart_state", "mart_log", "clamp_count", "clamp_shift"):
            getattr(final, f)[idx] = getattr(st, f)
        stop_step[idx] = step

    for k, row in enumerate(rows, start=1):
        dW = row if full_batch else row[active]
        state = step_fn(state, p, dt, dW, cfg.clamp_eps)
        dead = state.log_i <= log_eps
        at_stride = k % stride == 0
        if k == n_steps:
            record(state, active)
            retire(state, active, k)
            extinct[active[dead]] = True
            break
        if at_stride:
            record(state, active)
        if dead.any():
            gone = active[dead]
            sub = state.take(dead)
            if not at_stride:
                record(sub, gone)
            retire(sub, gone, k)
            extinct[gone] = True
            alive = ~dead
            active = active[alive]
            state = state.take(alive)
            full_batch = False
            if len(active) == 0:
                break

    return BatchResult(
        params=p,
        config=cfg,
        final=StepState(
            step=stop_step,
            t=stop_step * dt,
            i=final.i,
            log_i=final.log_i,
            sum_i=final.sum_i,
            sum_i2=final.sum_i2,
            mart_state=final.mart_state,
            mart_log=final.mart_log,
            clamp_count=final.clamp_count,
            clamp_shift=final.clamp_shift,
        ),
        stop_step=stop_step,
        extinct=extinct,
        samples=samples,
        n_samples=n_samples,
        hoelder_min=hoelder_min,
        identity_max=identity_max,
    )


def params_hash(p: ModelParams, cfg: SchemeConfig, seed: int, path_index: int = 0) -> str:
    payload = json.dumps(
        {"model": p.to_dict(), "scheme": cfg.to_dict(), "seed": int(seed), "path_index": int(path_index)},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def record_from_batch(batch: BatchResult, j: int, seed: int, path_index: int) -> PathRecord:
    cfg = batch.config
    return PathRecord(
        params_hash=params_hash(batch.params, cfg, seed, path_index),
        params=batch.params,
        scheme=cfg.scheme.value,
        dt=cfg.dt,
        extinction_eps=cfg.extinction_eps,
        samples=batch.path_samples(j),
        extinct=bool(batch.extinct[j]),
        t_stop=float(batch.t_stop[j]),
        t_end=float(cfg.n_steps * cfg.dt),
        n_steps=int(batch.stop_step[j]),
        clamp_count=int(batch.final.clamp_count[j]),
        hoelder_min_margin=float(batch.hoelder_min[j]),
        identity_residual_max=float(batch.identity_max[j]),
    )


def simulate_path(p: ModelParams, cfg: SchemeConfig, seed: int, path_index: int = 0) -> PathRecord:
    """Integrate one path driven by the stream keyed ``(seed, path_index)``.

    Raises :class:`SchemeUnreliableError` (carrying the finished record) if
    more than 1% of steps needed clamping.
    """
    batch = integrate(p, cfg, [BrownianStream(seed, path_index)])
    rec = record_from_batch(batch, 0, seed, path_index)
    if batch.unreliable[0]:
        raise SchemeUnreliableError(rec)
    return rec
