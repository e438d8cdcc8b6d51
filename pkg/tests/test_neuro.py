import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from escape_lab.exit_stats import class_mean_times
from escape_lab.neuro import (
    REFERENCE_INIT,
    Classification,
    DegenerateRegime,
    NeuroParams,
    NeuroState,
    _drift_about,
    critical_points,
    demo_params,
    finite_difference_jacobian,
    jacobian,
    limit_cycle,
    mu_excursions,
    neuro_drift,
    rate_R,
    simulate_upstate_ensemble,
    write_neuro_json,
)
from escape_lab.sde import ExitStatus, InitOutsideDomain

SIMPLE = NeuroParams(tau=0.02, J=4.0, U=0.5, t_r=0.8, T=2.0)


@pytest.fixture(scope="module")
def demo():
    p = demo_params()
    crit = critical_points(p)
    return p, crit, limit_cycle(p, crit)


@pytest.fixture(scope="module")
def small_ensemble(demo):
    p, _, cycle = demo
    return simulate_upstate_ensemble(p, NeuroState(*REFERENCE_INIT), 2000, 7, cycle=cycle)


def test_param_validation():
    with pytest.raises(ValueError):
        NeuroParams(tau=0.0, J=1.0, U=0.5, t_r=1.0, T=1.0)
    with pytest.raises(ValueError):
        NeuroParams(tau=1.0, J=1.0, U=1.5, t_r=1.0, T=1.0)
    with pytest.raises(ValueError):
        NeuroParams(tau=1.0, J=1.0, U=0.5, t_r=1.0, T=1.0, sigma=-1.0)
    assert demo_params().not_from_paper
    assert SIMPLE.voltage_noise == pytest.approx(0.0015 / np.sqrt(0.02))


def test_rate_function():
    assert rate_R(2.0, SIMPLE) == 0.0
    assert rate_R(3.0, SIMPLE) == 1.0
    assert rate_R(-5.0, SIMPLE) == 0.0
    assert rate_R(2.0 + 1e-12, SIMPLE) == pytest.approx(1e-12)
    assert np.array_equal(rate_R(np.array([1.0, 4.0]), SIMPLE), [0.0, 2.0])


def test_quiescent_point_is_critical():
    d = neuro_drift(NeuroState(0.0, 1.0), SIMPLE)
    assert (d.V, d.mu) == (0.0, 0.0)


@given(st.floats(-50.0, 1.999), st.floats(0.0, 1.0))
def test_subthreshold_relaxation(V, mu):
    d = neuro_drift(NeuroState(V, mu), SIMPLE)
    assert d.V == pytest.approx(-V / SIMPLE.tau)
    assert d.mu == pytest.approx((1 - mu) / SIMPLE.t_r)


@given(st.floats(0.0, 1.0), st.booleans())
def test_drift_continuous_at_threshold(mu, scaled):
    p = replace(SIMPLE, depression_scales_with_mu=scaled)
    lo = neuro_drift(NeuroState(p.T - 1e-12, mu), p)
    hi = neuro_drift(NeuroState(p.T + 1e-12, mu), p)
    assert abs(lo.V - hi.V) < 1e-8 and abs(lo.mu - hi.mu) < 1e-8


@given(st.floats(2.0, 100.0, exclude_min=True), st.booleans())
def test_mu_drift_inward_at_one(V, scaled):
    p = replace(SIMPLE, depression_scales_with_mu=scaled)
    assert neuro_drift(NeuroState(V, 1.0), p).mu <= 0.0


def test_depression_variants():
    s = NeuroState(3.0, 0.4)
    plain = neuro_drift(s, SIMPLE)
    scaled = neuro_drift(s, replace(SIMPLE, depression_scales_with_mu=True))
    assert plain.V == scaled.V
    assert plain.mu == pytest.approx((1 - 0.4) / 0.8 - 0.5 * 1.0)
    assert scaled.mu == pytest.approx((1 - 0.4) / 0.8 - 0.5 * 1.0 * 0.4)


@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_expanded_drift_matches_direct(a, b):
    base = NeuroState(3.0, 0.4)
    for p in (SIMPLE, replace(SIMPLE, depression_scales_with_mu=True)):
        d = neuro_drift(NeuroState(base.V + a, base.mu + b), p)
        e = _drift_about(base, a, b, p)
        assert e == pytest.approx((d.V, d.mu), rel=1e-9, abs=1e-9)


def test_demo_critical_set(demo):
    p, crit, _ = demo
    kinds = [c.classification for c in crit.points]
    assert len(kinds) == 3
    assert kinds[0] is Classification.STABLE_NODE
    assert crit.points[0].state == NeuroState(0.0, 1.0)
    assert sorted(k.value for k in kinds[1:]) == ["Saddle", "StableFocus"]
    assert abs(crit.focus_eigen[0].imag) > 0
    for c in crit.points:
        d = neuro_drift(c.state, p)
        assert np.hypot(d.V, d.mu) < 1e-10


def test_classification_matches_differences(demo):
    p, crit, _ = demo
    for c in crit.points[1:]:
        ev_a = np.sort_complex(np.linalg.eigvals(jacobian(c.state, p)))
        ev_f = np.sort_complex(np.linalg.eigvals(finite_difference_jacobian(c.state, p)))
        assert np.max(np.abs(ev_a - ev_f)) < 1e-6 * max(1.0, np.max(np.abs(ev_a)))


def test_focus_period_positive(demo):
    _, crit, _ = demo
    assert crit.focus_period == pytest.approx(2 * np.pi / abs(crit.focus_eigen[0].imag))
    assert crit.focus_eigen[0].real < 0


def test_low_connectivity_is_degenerate():
    p = demo_params()
    with pytest.raises(DegenerateRegime) as info:
        critical_points(replace(p, J=0.5 * p.J))
    assert len(info.value.points) == 1


def test_cycle_closure_and_focus_inside(demo):
    _, crit, cycle = demo
    assert cycle.closure < 1e-8
    assert np.hypot(*((cycle.points[-1] - cycle.points[0]) / cycle.scale)) < 1e-8
    assert cycle.contains(crit.focus.V, crit.focus.mu)
    assert cycle.contains(*REFERENCE_INIT)
    saddle = [c.state for c in crit.points if c.classification is Classification.SADDLE][0]
    assert not cycle.contains(saddle.V, saddle.mu)


def _forward(p, focus, scale, z0, t_end):
    su, sw = scale

    def rhs(_t, z):
        dv, dm = _drift_about(focus, su * z[0], sw * z[1], p)
        return [dv / su, dm / sw]

    return solve_ivp(rhs, (0.0, t_end), z0, method="DOP853", rtol=1e-11, atol=1e-14, dense_output=True)


def test_inside_start_stays_inside(demo):
    p, crit, cycle = demo
    z_star = (cycle.points[0] - [cycle.center.V, cycle.center.mu]) / cycle.scale
    sol = _forward(p, crit.focus, cycle.scale, 0.98 * z_star, 10 * cycle.period)
    z = sol.sol(np.linspace(0.0, 10 * cycle.period, 2000))
    V = crit.focus.V + cycle.scale[0] * z[0]
    mu = crit.focus.mu + cycle.scale[1] * z[1]
    assert np.all(cycle.contains(V, mu))


def test_outside_start_leaves(demo):
    p, crit, cycle = demo
    rel = (cycle.points - [cycle.center.V, cycle.center.mu]) / cycle.scale
    z_star = rel[0]
    # the cycle repels weakly, so watch a start 2% outside for 40 turns
    sol = _forward(p, crit.focus, cycle.scale, 1.02 * z_star, 40 * cycle.period)
    assert np.max(np.hypot(*sol.y)) > 1.5 * np.max(np.hypot(*rel.T))


def test_noise_free_convergence_to_focus(demo):
    p, crit, cycle = demo
    z0 = [(REFERENCE_INIT[0] - crit.focus.V) / cycle.scale[0], (REFERENCE_INIT[1] - crit.focus.mu) / cycle.scale[1]]
    sol = _forward(p, crit.focus, cycle.scale, z0, 1000.0)
    assert np.hypot(*sol.y[:, -1]) < 1e-4


def test_noise_free_ensemble_is_censored(demo):
    p, _, cycle = demo
    e = simulate_upstate_ensemble(replace(p, sigma=0.0), NeuroState(*REFERENCE_INIT), 20, 1,
                                  t_max=20.0, cycle=cycle)
    assert np.all(e.records.status == ExitStatus.CENSORED)


def test_init_outside_rejected(demo):
    p, crit, cycle = demo
    with pytest.raises(InitOutsideDomain):
        simulate_upstate_ensemble(p, NeuroState(0.0, 1.0), 10, 1, cycle=cycle)


def test_upstate_ensemble_properties(demo, small_ensemble):
    _, crit, _ = demo
    rec = small_ensemble.records
    assert rec.exited.mean() > 0.9
    # mu stays in [0, 1] at the exit points
    assert small_ensemble.mu_excursion_count == 0
    m = class_mean_times(rec)
    ks = sorted(m)[:8]
    assert all(m[a] < m[b] for a, b in zip(ks, ks[1:]))
    gaps = np.diff([m[k] for k in ks[1:]])
    assert np.all(np.abs(gaps / crit.focus_period - 1.0) < 0.1)


def test_exit_angles_concentrated(small_ensemble):
    a = small_ensemble.records.exit_angle[small_ensemble.records.exited]
    counts, _ = np.histogram(a, bins=12, range=(-np.pi, np.pi))
    assert counts.max() / counts.sum() > 2.0 / 12


def test_mu_excursion_counter():
    assert mu_excursions([0.0, 1.0, 0.5]) == 0
    assert mu_excursions([-1e-9, 1.0000001, 0.5]) == 2


def test_neuro_json(tmp_path, demo):
    p, crit, cycle = demo
    write_neuro_json(tmp_path / "n.json", p, crit, cycle)
    d = json.loads((tmp_path / "n.json").read_text(encoding="utf-8"))
    assert d["params"]["not_from_paper"] is True
    assert len(d["critical_set"]["points"]) == 3
    assert len(d["cycle"]["V"]) == len(cycle.points)
