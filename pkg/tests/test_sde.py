import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochsis.ensemble import EnsembleConfig, run_ensemble
from stochsis.model import InvalidParameterError, ModelParams
from stochsis.sde import (
    BrownianStream,
    Scheme,
    SchemeConfig,
    SchemeUnreliableError,
    StepState,
    brownian_increment,
    integrate,
    simulate_path,
    step_em_log,
    step_em_state,
    step_milstein,
)
from stochsis.verify import logistic_reference

from conftest import make

# noise-dominated parameters (N = 1) where the strong orders show up early
NOISY = ModelParams(beta=1.0, gamma=0.25, mu=0.25, sigma=2.0, capacity=1.0, i0=0.5)


# --- Brownian increments -----------------------------------------------------------


def test_unit_variance_statistics():
    x = BrownianStream(12345, 0).increments(1.0, 1_000_000)
    assert abs(x.mean()) <= 0.004
    assert 0.995 <= x.var() <= 1.005


def test_variance_scales_with_dt():
    x = BrownianStream(12345, 1).increments(0.01, 1_000_000)
    assert x.var() == pytest.approx(0.01, rel=0.01)


def test_stream_determinism():
    a, b = BrownianStream(9, 4), BrownianStream(9, 4)
    assert [brownian_increment(a, 0.1) for _ in range(5)] == [brownian_increment(b, 0.1) for _ in range(5)]


def test_streams_differ_by_index_and_seed():
    base = BrownianStream(9, 4).increments(1.0, 8)
    assert not np.array_equal(base, BrownianStream(9, 5).increments(1.0, 8))
    assert not np.array_equal(base, BrownianStream(10, 4).increments(1.0, 8))


def test_block_size_does_not_change_draws():
    a = BrownianStream(3, 2).increments(0.5, 100)
    s = BrownianStream(3, 2)
    b = np.concatenate([s.increments(0.5, 37), s.increments(0.5, 63)])
    np.testing.assert_array_equal(a, b)


def test_increment_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        brownian_increment(BrownianStream(0), 0.0)


# --- single steps --------------------------------------------------------------------


def test_em_state_steps(p1):
    s = StepState.initial(p1.replace(sigma=0.11))
    p = p1.replace(sigma=0.11)
    assert step_em_state(s, p, 0.01, 0.0).i == pytest.approx(55.0, rel=1e-15)
    nxt = step_em_state(s, p, 0.01, 0.02)
    assert nxt.i == pytest.approx(60.5, rel=1e-14)
    # sums use the pre-step value
    assert nxt.sum_i == pytest.approx(0.5)
    assert nxt.sum_i2 == pytest.approx(25.0)
    assert nxt.mart_state == pytest.approx(275.0 * 0.02)
    assert nxt.mart_log == pytest.approx(0.11 * 50 * 0.02)
    assert nxt.step == 1 and nxt.t == 0.01


def test_em_log_steps(p1):
    s = StepState.initial(p1)
    assert step_em_log(s, p1, 0.01, 0.0).i == pytest.approx(50.0 * math.exp(-0.05125), rel=1e-14)
    assert step_em_log(s, p1, 0.01, 0.0).i == pytest.approx(47.50206, abs=1e-5)
    det = make(sigma2=0.0)
    assert step_em_log(StepState.initial(det), det, 0.01, 0.0).i == pytest.approx(50.0 * math.exp(0.1), rel=1e-14)


@pytest.mark.parametrize("step", [step_em_state, step_em_log, step_milstein])
def test_zero_step_is_identity(p1, step):
    s = StepState.initial(p1)
    nxt = step(s, p1, 0.0, 0.0)
    assert nxt.i == pytest.approx(50.0, rel=1e-15)
    assert (nxt.sum_i, nxt.sum_i2, nxt.mart_state, nxt.mart_log) == (0.0, 0.0, 0.0, 0.0)


def test_milstein_correction():
    p = make(i0=25.0).replace(sigma=0.11)
    s = StepState.initial(p)
    diff = step_milstein(s, p, 0.01, 0.2).i - step_em_state(s, p, 0.01, 0.2).i
    assert diff == pytest.approx(17.015625, rel=1e-12)
    # dW² = dt cancels the correction
    dw = math.sqrt(0.01)
    assert step_milstein(s, p, 0.01, dw).i == pytest.approx(step_em_state(s, p, 0.01, dw).i, rel=1e-14)


@given(st.floats(min_value=-0.5, max_value=0.5))
def test_milstein_matches_em_at_half_capacity(dw):
    p = make().replace(sigma=0.11)
    s = StepState.initial(p)
    assert step_milstein(s, p, 0.01, dw).i == step_em_state(s, p, 0.01, dw).i


def test_state_clamp_counts_and_shifts(p1):
    s = StepState.initial(p1)
    low = step_em_state(s, p1, 0.01, -10.0)
    assert low.i == pytest.approx(1e-12 * 100.0)
    assert low.clamp_count == 1 and low.clamp_shift > 0
    high = step_em_state(s, p1, 0.01, 10.0)
    assert high.i == pytest.approx((1 - 1e-12) * 100.0)
    assert high.clamp_count == 1 and high.clamp_shift < 0


def test_log_clamp_only_at_top(p1):
    s = StepState.initial(p1)
    low = step_em_log(s, p1, 0.01, -10.0)
    assert 0 < low.i < 1e-3 and low.clamp_count == 0
    high = step_em_log(s, p1, 0.01, 10.0)
    assert high.i < 100.0 and high.clamp_count == 1


# --- configuration -------------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [dict(dt=0.0), dict(dt=2.0, t_end=1.0), dict(clamp_eps=1e-3), dict(extinction_eps=-1.0), dict(record_stride=0)],
)
def test_scheme_config_invariants(kwargs):
    with pytest.raises(InvalidParameterError):
        SchemeConfig(**{"t_end": 1.0, **kwargs})


def test_extinction_eps_must_be_below_i0(p1):
    with pytest.raises(InvalidParameterError, match="extinction_eps < i0"):
        SchemeConfig(extinction_eps=60.0).resolve(p1)


def test_resolve_defaults(p1):
    cfg = SchemeConfig(t_end=1000.0).resolve(p1)
    assert cfg.extinction_eps == pytest.approx(1e-8)
    assert cfg.record_stride == 100
    assert cfg.n_steps == 1_000_000


def test_scheme_aliases():
    assert Scheme.parse("EulerMaruyamaLog") is Scheme.EM_LOG
    assert Scheme.parse("em-state") is Scheme.EM_STATE
    with pytest.raises(InvalidParameterError):
        Scheme.parse("rk4")


# --- whole paths ---------------------------------------------------------------------


def test_deterministic_logistic_oracle():
    p = make(sigma2=0.0, i0=10.0)
    rec = simulate_path(p, SchemeConfig(scheme=Scheme.EM_STATE, dt=1e-4, t_end=1.0), seed=0)
    exact = logistic_reference(p, 1.0)
    assert rec.final["i"] == pytest.approx(exact, rel=1e-3)
    assert rec.t_stop == 1.0 and not rec.extinct


def test_simulate_path_is_deterministic(p1):
    cfg = SchemeConfig(t_end=2.0)
    a, b = simulate_path(p1, cfg, 77), simulate_path(p1, cfg, 77)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert a.params_hash == b.params_hash
    assert simulate_path(p1, cfg, 78).samples.tobytes() != a.samples.tobytes()


def test_extinction_stops_path(p2):
    p = p2.replace(i0=1.0)
    cfg = SchemeConfig(t_end=10.0, extinction_eps=0.5)
    rec = simulate_path(p, cfg, seed=3)
    assert rec.extinct
    assert rec.t_stop < 10.0
    assert rec.final["i"] <= 0.5
    assert rec.samples["t"][-1] == rec.t_stop


def test_time_is_step_times_dt():
    p = make(sigma2=0.0, i0=10.0)
    rec = simulate_path(p, SchemeConfig(dt=0.01, t_end=3.0, record_stride=1), 0)
    np.testing.assert_array_equal(rec.samples["t"], np.arange(1, 301) * 0.01)


def test_recorded_samples_capped(p1):
    rec = simulate_path(p1, SchemeConfig(dt=1e-3, t_end=25.0, extinction_eps=0.0), 0)
    assert len(rec.samples) <= 10_001
    assert rec.samples["t"][-1] == 25.0
    assert np.all(np.diff(rec.samples["t"]) > 0)


def test_clamp_failure_is_reported(p2):
    cfg = SchemeConfig(scheme=Scheme.EM_STATE, dt=0.05, t_end=5.0, extinction_eps=0.0)
    with pytest.raises(SchemeUnreliableError) as info:
        simulate_path(p2.replace(i0=50.0), cfg, 0)
    assert info.value.record.clamp_count > 0.01 * info.value.record.n_steps


def test_path_matches_ensemble_member(p1):
    cfg = SchemeConfig(t_end=3.0)
    _, records = run_ensemble(p1, cfg, EnsembleConfig(n_paths=5, base_seed=11), keep_paths=True)
    for k in (0, 3):
        alone = simulate_path(p1, cfg, 11, k)
        assert alone.samples.tobytes() == records[k].samples.tobytes()
        assert alone.params_hash == records[k].params_hash


@settings(max_examples=30, deadline=None)
@given(
    scheme=st.sampled_from(list(Scheme)),
    sigma2=st.sampled_from([0.0, 0.0009, 0.0121, 0.02, 0.05]),
    i0=st.floats(min_value=0.5, max_value=99.5),
    seed=st.integers(min_value=0, max_value=2**32),
)
def test_domain_preserved(scheme, sigma2, i0, seed):
    p = make(sigma2=sigma2, i0=i0)
    batch = integrate(
        p,
        SchemeConfig(scheme=scheme, dt=1e-3, t_end=2.0, record_stride=1),
        [BrownianStream(seed, k) for k in range(4)],
    )
    for j in range(4):
        i = batch.path_samples(j)["i"]
        assert np.all((i > 0) & (i < p.capacity))


def _largest(*terms):
    return max(np.max(np.abs(t)) for t in terms)


@pytest.mark.parametrize("sigma2", [0.0009, 0.0121, 0.02])
def test_state_identity_exact(sigma2):
    p = make(sigma2=sigma2, i0=10.0)
    rec = simulate_path(p, SchemeConfig(scheme=Scheme.EM_STATE, dt=1e-3, t_end=20.0, record_stride=10), 5)
    s = rec.samples
    drift_sum = (p.beta * p.capacity - p.removal_rate) * s["sum_i"] - p.beta * s["sum_i2"]
    lhs = s["i"] - p.i0
    rhs = drift_sum + s["mart_state"] + s["clamp_shift"]
    scale = _largest(lhs, drift_sum, s["mart_state"])
    assert np.max(np.abs(lhs - rhs)) <= 1e-8 * scale
    assert rec.identity_residual_max <= 1e-8


@pytest.mark.parametrize("sigma2", [0.0009, 0.0121, 0.02])
def test_log_identity_exact(sigma2):
    p = make(sigma2=sigma2, i0=10.0)
    rec = simulate_path(p, SchemeConfig(scheme=Scheme.EM_LOG, dt=1e-3, t_end=20.0, record_stride=10), 5)
    s = rec.samples
    n, k = p.capacity, p.beta * p.capacity - p.removal_rate
    drift_sum = (k - 0.5 * p.sigma2 * n * n) * s["t"] + (p.sigma2 * n - p.beta) * s["sum_i"] - 0.5 * p.sigma2 * s["sum_i2"]
    lhs = s["log_i"] - math.log(p.i0)
    rhs = drift_sum + s["mart_log"] + s["clamp_shift"]
    scale = _largest(lhs, drift_sum, s["mart_log"])
    assert np.max(np.abs(lhs - rhs)) <= 1e-8 * scale


def _coupled_errors(scheme, levels, ref_level=14, paths=200, t_end=1.0):
    rng = np.random.default_rng(2024)
    n_ref = 2**ref_level
    dw = rng.standard_normal((n_ref, paths)) * math.sqrt(t_end / n_ref)

    def final(n):
        coarse = dw.reshape(n, n_ref // n, paths).sum(axis=1)
        cfg = SchemeConfig(scheme=scheme, dt=t_end / n, t_end=t_end, record_stride=n, extinction_eps=0.0)
        return integrate(NOISY, cfg, coarse, fields=("t",)).final.i

    ref = final(n_ref)
    dts = np.array([t_end / 2**k for k in levels])
    errs = np.array([np.mean(np.abs(final(2**k) - ref)) for k in levels])
    return dts, errs


@pytest.mark.parametrize(
    "scheme, lo, hi",
    [(Scheme.EM_STATE, 0.35, 0.7), (Scheme.EM_LOG, 0.35, 0.7), (Scheme.MILSTEIN, 0.8, 1.3)],
)
def test_strong_order(scheme, lo, hi):
    dts, errs = _coupled_errors(scheme, levels=(6, 7, 8, 9))
    order = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert lo <= order <= hi


def test_schemes_agree_as_dt_shrinks():
    rng = np.random.default_rng(99)
    paths, t_end = 100, 1.0
    dw = rng.standard_normal((10_000, paths)) * math.sqrt(1e-4)
    gaps = []
    for factor, dt in ((100, 1e-2), (10, 1e-3), (1, 1e-4)):
        coarse = dw.reshape(-1, factor, paths).sum(axis=1)
        finals = [
            integrate(NOISY, SchemeConfig(scheme=s, dt=dt, t_end=t_end, extinction_eps=0.0), coarse, fields=("t",)).final.i
            for s in Scheme
        ]
        gap = max(np.mean(np.abs(a - b)) for a in finals for b in finals)
        gaps.append(gap)
        assert gap <= 2.0 * math.sqrt(dt)
    assert gaps[0] > gaps[1] > gaps[2]
