import math

import numpy as np
import pytest

from cpdyn import integrators as itg
from cpdyn.harness import (DRIFT_QUANTITIES, MAX_STORED_SAMPLES, FieldSpec, Scenario,
                           ScenarioError, compare_methods, convergence_study, endpoint_samples,
                           fit_order, benchmark_scenario, quick_verify, run_scenario)
from cpdyn.integrators import MethodId
from cpdyn.observables import MidpointState, compute_sample
from cpdyn.solvers import NonConvergence, SolverSettings

ALL_METHODS = ["tsm1", "tsm1-avf", "tsm2", "boris", "varm", "rk4ref"]


def test_single_step_run_has_one_sample_and_zero_drift():
    out = run_scenario(benchmark_scenario("tsm2", h=0.1, t_end=0.1))
    assert len(out.samples) == 1
    assert out.samples.t[0] == pytest.approx(0.05)
    for q in DRIFT_QUANTITIES:
        d = out.drift[q]
        assert d.max_abs_dev == 0 and d.final_dev == 0


@pytest.mark.parametrize("method", ALL_METHODS)
def test_free_field_energy_drift(method):
    sc = Scenario(field=FieldSpec.of("free"), method=method, h=0.1, t_end=1000.0,
                  x0=(0.3, -0.2, 0.1), v0=(0.7, 0.2, -0.4))
    out = run_scenario(sc)
    assert out.drift["E"].max_abs_dev <= 1e-12
    assert math.isnan(out.drift["I"].initial)


def test_run_is_deterministic():
    sc = benchmark_scenario("tsm2", h=0.1, t_end=200.0)
    a, b = run_scenario(sc), run_scenario(sc)
    assert np.array_equal(a.samples.data, b.samples.data)
    assert a.drift == b.drift


def test_time_bookkeeping_from_step_indices():
    sc = benchmark_scenario("tsm1", h=0.1, t_end=300.0, sample_every=7)
    out = run_scenario(sc)
    k = np.arange(len(out.samples))
    np.testing.assert_array_equal(out.samples.t, (k * 7 + 0.5) * 0.1)
    assert np.all(np.diff(out.samples.t) > 0)


def test_samples_are_midpoint_observables(experiment):
    sc = benchmark_scenario("tsm1", h=0.1, t_end=5.0)
    out = run_scenario(sc)
    tr = itg.integrate("tsm1", experiment, 0.1, 50, sc.x0, sc.v0)
    for k in (0, 17, 49):
        ms = MidpointState(out.samples.t[k], 0.5 * (tr.x[k] + tr.x[k + 1]), 0.5 * (tr.v[k] + tr.v[k + 1]))
        ref = compute_sample(ms, experiment, 0.1)
        np.testing.assert_allclose(out.samples.data[k, 1:4], ms.x_mid, rtol=0, atol=1e-15)
        got = out.samples[k]
        for name in ("E", "M", "I", "xi", "H_h", "I_h"):
            assert getattr(got, name) == pytest.approx(getattr(ref, name), rel=1e-13, abs=1e-16)


def test_drift_ignores_decimation():
    full = run_scenario(benchmark_scenario("tsm2", h=0.1, t_end=500.0, sample_every=1))
    thin = run_scenario(benchmark_scenario("tsm2", h=0.1, t_end=500.0, sample_every=13))
    assert full.drift == thin.drift
    np.testing.assert_array_equal(full.samples.data[::13], thin.samples.data)
    direct = np.abs(full.samples.column("E") - full.samples.column("E")[0]).max()
    assert full.drift["E"].max_abs_dev == direct


def test_default_decimation_caps_rows():
    sc = benchmark_scenario("tsm2", h=0.05, t_end=10_000.0)
    assert sc.nsteps == 200_000
    assert sc.resolved_sample_every() == 2
    assert (sc.nsteps - 1) // sc.resolved_sample_every() + 1 <= MAX_STORED_SAMPLES


def test_drift_metric_invariants():
    out = run_scenario(benchmark_scenario("boris", h=0.1, t_end=300.0))
    for q in DRIFT_QUANTITIES:
        d = out.drift[q]
        assert d.max_abs_dev >= abs(d.final_dev) >= 0
        assert d.max_abs_dev >= max(d.first_window_dev, d.last_window_dev)


def test_endpoint_samples_start_at_initial_state():
    sc = benchmark_scenario("tsm2", h=0.1, t_end=10.0, sample_every=10)
    tab = endpoint_samples(sc)
    assert len(tab) == 11
    np.testing.assert_array_equal(tab.t, 0.1 * np.arange(0, 101, 10))
    first = tab[0]
    assert first.E == pytest.approx(0.0353, abs=1e-15)
    assert first.M == pytest.approx(0.09 - 1 / 3, abs=1e-15)


# ------------------------------------------------------------- errors


@pytest.mark.parametrize("kw", [
    {"h": -0.1}, {"h": 0.0}, {"t_end": 0.0}, {"eps": 0.0},
    {"t_end": 1.05, "h": 0.1}, {"sample_every": 0},
    {"method": "tsm1", "starter": "reference"},
])
def test_invalid_scenarios(kw):
    with pytest.raises(ScenarioError):
        run_scenario(benchmark_scenario(**kw) if "method" not in kw else Scenario(**kw))


def test_bad_initial_vector():
    with pytest.raises(ScenarioError):
        Scenario(x0=(0.0, 1.0))


def test_nonconvergence_propagates_with_step():
    sc = benchmark_scenario("tsm2", h=0.1, t_end=1.0, settings=SolverSettings(max_iter=1))
    with pytest.raises(NonConvergence) as info:
        run_scenario(sc)
    assert info.value.step is not None and info.value.step >= 1


# --------------------------------------------------------- convergence


def test_fit_order_exact_power():
    h = np.array([0.1, 0.05, 0.025])
    assert fit_order(h, 3 * h**2) == pytest.approx(2.0, abs=1e-12)
    assert math.isnan(fit_order(h, [1e-3, 0.0, 1e-4]))


def test_rk4_self_convergence():
    sc = benchmark_scenario("rk4ref")
    tab = convergence_study(sc, [0.1, 0.05, 0.025, 0.0125], t_short=10.0)
    assert 3.7 <= tab.slope <= 4.3
    assert len(tab.rows()) == 4


def test_broken_zeroth_order_stepper_is_flagged():
    sc = benchmark_scenario("tsm1")
    stuck = lambda h: np.array(sc.x0)  # noqa: E731
    tab = convergence_study(sc, [0.1, 0.05, 0.025, 0.0125], integrate=stuck)
    assert abs(tab.slope) < 0.05
    assert not tab.order_within(1.8, 2.2)


def test_convergence_rejects_unordered_steps():
    with pytest.raises(ScenarioError):
        convergence_study(benchmark_scenario("tsm1"), [0.05, 0.1])
    with pytest.raises(ScenarioError):
        convergence_study(benchmark_scenario("tsm1"), [0.3, 0.07], t_short=1.0)


# ---------------------------------------------------------- comparison


def test_compare_four_methods_normal_field():
    scs = [benchmark_scenario(m, h=0.1, t_end=1000.0) for m in ("tsm1", "tsm2", "boris", "varm")]
    cmp_ = compare_methods(scs)
    assert list(cmp_.runs) == [MethodId.TSM1, MethodId.TSM2, MethodId.BORIS, MethodId.VARM]
    rows = [r for r in cmp_.drift_rows() if r[1] == "E"]
    assert len(rows) == 4
    assert all(d.max_abs_dev < 0.01 and d.trend_ratio < 2 for _, _, d in rows)


def test_compare_single_scenario():
    cmp_ = compare_methods([benchmark_scenario("tsm2", t_end=10.0)])
    assert len(cmp_.runs) == 1
    assert len(cmp_.drift_rows()) == len(DRIFT_QUANTITIES)


@pytest.mark.parametrize("other", [
    {"h": 0.05}, {"eps": 0.5}, {"t_end": 20.0}, {"x0": (0.0, 1.1, 0.1)}, {"method": "tsm1"},
])
def test_compare_rejects_mismatched_sets(other):
    base = dict(method="tsm1", h=0.1, t_end=10.0)
    scs = [benchmark_scenario(**base), benchmark_scenario(**{**base, "method": "boris", **other})]
    with pytest.raises(ScenarioError):
        compare_methods(scs)
    with pytest.raises(ScenarioError):
        compare_methods([])


def test_strong_field_modified_energy_drift_is_order_eps():
    eps = 0.01
    cmp_ = compare_methods([benchmark_scenario(m, h=0.01, eps=eps, t_end=20.0) for m in ("tsm2", "varm")])
    for out in cmp_.runs.values():
        assert out.drift["Hh"].max_abs_dev <= eps
        assert out.drift["Ih"].max_abs_dev <= eps


def test_starter_choice_keeps_drift_bounded():
    runs = {s: run_scenario(benchmark_scenario("tsm2", h=0.1, t_end=2000.0, starter=s))
            for s in ("tsm1", "reference")}
    e = {s: out.drift["E"] for s, out in runs.items()}
    for d in e.values():
        assert d.max_abs_dev < 1e-4 and d.trend_ratio < 2
    assert abs(e["tsm1"].max_abs_dev - e["reference"].max_abs_dev) < 1e-4


def test_quick_verify_passes():
    results = quick_verify()
    assert results and all(r.passed for r in results), [r for r in results if not r.passed]
