import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from survfuse.coxph import (CoxModel, ConvergenceReport, DesignSpec, StepCurves, fit_cox,
                            fit_nuisance_pair, partial_loglik, survival_at)
from survfuse.data import Dataset
from survfuse.errors import DegenerateFitError, InvalidInputError


def _golden_max(f, lo, hi, iters=200):
    """Golden-section search in 60-digit arithmetic."""
    with mpmath.workdps(60):
        g = (mpmath.sqrt(5) - 1) / 2
        a, b = mpmath.mpf(lo), mpmath.mpf(hi)
        c, d = b - g * (b - a), a + g * (b - a)
        fc, fd = f(c), f(d)
        for _ in range(iters):
            if fc > fd:
                b, d, fd = d, c, fc
                c = b - g * (b - a)
                fc = f(c)
            else:
                a, c, fc = c, d, fd
                d = a + g * (b - a)
                fd = f(d)
        return float((a + b) / 2)


def test_binary_covariate_matches_golden_section():
    # five subjects, events at t=3 (x=1) and t=4 (x=0)
    time = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    event = np.array([0, 0, 1, 1, 0])
    x = np.array([[1.0], [0.0], [1.0], [0.0], [1.0]])

    def loglik(b):
        # risk sets {3,4,5} and {4,5}
        return b - mpmath.log(2 * mpmath.exp(b) + 1) - mpmath.log(1 + mpmath.exp(b))

    ref = _golden_max(loglik, -10, 10)
    model = fit_cox(time, event, x)
    assert abs(model.beta[0] - ref) < 1e-8


def test_gradient_matches_finite_differences(case1_trial):
    d = DesignSpec().build(case1_trial.x, case1_trial.a)
    model = fit_cox(case1_trial.y, case1_trial.delta, d)
    rng = np.random.default_rng(1)
    h = 1e-5
    for beta in (model.beta, model.beta + rng.normal(scale=0.3, size=model.beta.size)):
        _, grad, _ = partial_loglik(beta, case1_trial.y, case1_trial.delta, d)
        fd = np.empty_like(grad)
        for k in range(beta.size):
            e = np.zeros_like(beta)
            e[k] = h
            fd[k] = (partial_loglik(beta + e, case1_trial.y, case1_trial.delta, d)[0]
                     - partial_loglik(beta - e, case1_trial.y, case1_trial.delta, d)[0]) / (2 * h)
        # relative to the size of the score at a generic point
        scale = max(np.linalg.norm(grad), 1.0)
        assert np.max(np.abs(fd - grad)) <= 1e-6 * scale


def test_hessian_matches_finite_differences(case1_trial):
    d = DesignSpec().build(case1_trial.x, case1_trial.a)
    beta = np.linspace(-0.3, 0.3, d.shape[1])
    _, _, hess = partial_loglik(beta, case1_trial.y, case1_trial.delta, d)
    h = 1e-5
    for k in range(beta.size):
        e = np.zeros_like(beta)
        e[k] = h
        gp = partial_loglik(beta + e, case1_trial.y, case1_trial.delta, d)[1]
        gm = partial_loglik(beta - e, case1_trial.y, case1_trial.delta, d)[1]
        np.testing.assert_allclose((gp - gm) / (2 * h), hess[k], rtol=1e-5, atol=1e-4)


def _breslow_loops(time, event, design, beta):
    """Baseline cumulative hazard coded directly from its definition."""
    risk = [float(np.exp(row @ beta)) for row in design]
    times = sorted({t for t, e in zip(time, event) if e})
    out, total = [], 0.0
    for u in times:
        deaths = sum(1 for t, e in zip(time, event) if e and t == u)
        denom = sum(r for t, r in zip(time, risk) if t >= u)
        total += deaths / denom
        out.append(total)
    return np.array(times), np.array(out)


def test_breslow_matches_independent_loops(case1_trial):
    spec = DesignSpec()
    d = spec.build(case1_trial.x, case1_trial.a)
    model = fit_cox(case1_trial.y, case1_trial.delta, d, design_spec=spec)
    t_ref, h_ref = _breslow_loops(case1_trial.y, case1_trial.delta, d, model.beta)
    np.testing.assert_array_equal(model.times, t_ref)
    np.testing.assert_allclose(model.cumhaz, h_ref, rtol=1e-12)
    for x, a, t in [((0.0, 0.0), 1, 1.0), ((1.0, -0.5), 0, 2.5), ((-1.0, 1.0), 1, 0.3)]:
        eta = spec.build(np.array([x]), [a])[0] @ model.beta
        k = np.searchsorted(t_ref, t, side="right")
        ref = np.exp(-(h_ref[k - 1] if k else 0.0) * np.exp(eta))
        assert survival_at(model, x, a, t) == pytest.approx(ref, rel=1e-12)


def test_survival_at_trivial_cases():
    rep = ConvergenceReport(0, 0.0, ())
    grid = np.linspace(0.001, 10, 10000)
    model = CoxModel(np.zeros(2), grid, grid, rep, DesignSpec(interactions=False))
    assert survival_at(model, [0.3], 1, 0.0) == 1.0
    assert survival_at(model, [0.3], 1, 2.0) == pytest.approx(np.exp(-2.0), rel=1e-12)
    with pytest.raises(InvalidInputError):
        survival_at(model, [0.3], 1, -1.0)


def test_all_censored_is_degenerate():
    with pytest.raises(DegenerateFitError):
        fit_cox([1.0, 2.0, 3.0], [0, 0, 0], np.ones((3, 1)))


def _trial(delta):
    rng = np.random.default_rng(0)
    n = 40
    return Dataset(rng.exponential(size=n) + 0.01, delta * np.ones(n), rng.normal(size=(n, 2)),
                   rng.integers(0, 2, n), np.ones(n), ("x1", "x2"))


def test_nuisance_pair_names_failing_model():
    with pytest.raises(DegenerateFitError, match="censoring-time model") as info:
        fit_nuisance_pair(_trial(1), 3.0)
    assert info.value.model == "censoring-time model"
    with pytest.raises(DegenerateFitError, match="failure-time model"):
        fit_nuisance_pair(_trial(0), 3.0)


def test_case1_nuisance_fits_converge_quickly(case1_trial):
    gT, gC = fit_nuisance_pair(case1_trial, 3.0)
    assert gT.convergence_report.iterations <= 25
    assert gC.convergence_report.iterations <= 25
    assert gT.convergence_report.grad_norm <= 1e-8


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 5.0), min_size=1, max_size=20, unique=True),
       st.floats(0.0, 6.0))
def test_step_curve_area_matches_piecewise_sum(times, t):
    times = np.sort(times)
    vals = np.linspace(0.95, 0.1, times.size)
    c = StepCurves(times, vals)
    knots = np.concatenate([[0.0], times, [np.inf]])
    levels = np.concatenate([[1.0], vals])
    ref = sum(lv * max(0.0, min(t, hi) - lo) for lv, lo, hi in zip(levels, knots[:-1], knots[1:]))
    assert c.area([t])[0] == pytest.approx(ref, rel=1e-12, abs=1e-14)


def test_step_curve_left_limits():
    c = StepCurves([1.0, 2.0], [0.5, 0.25])
    assert c.value([1.0])[0] == 0.5
    assert c.value([1.0], left=True)[0] == 1.0
    assert c.value([0.5, 2.5]).tolist() == [1.0, 0.25]
