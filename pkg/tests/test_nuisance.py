import numpy as np
import pytest
from hypothesis import given, strategies as st

from survfuse.coxph import ConvergenceReport, CoxModel, DesignSpec, StepCurves
from survfuse.data import Dataset, SubjectRecord, restrict
from survfuse.errors import InvalidInputError, SeparationError
from survfuse.nuisance import (PropensityModel, _logistic_loglik, b_of_t, d_hat_all,
                               fit_propensity, mu_hat, r_hat, restricted_means, t_hat,
                               t_hat_batch)
from survfuse.oracles import oracle_prop_s2

FLAT = StepCurves([], np.ones((1, 0)))


def _exp_curve(k=10_000, L=3.0):
    t = np.linspace(0, L, k + 1)[1:]
    return StepCurves(t, np.exp(-t))


def _model(times, cumhaz):
    rep = ConvergenceReport(0, 0.0, ())
    return CoxModel(np.zeros(2), np.asarray(times, float), np.asarray(cumhaz, float), rep,
                    DesignSpec(interactions=False))


def test_mu_hat_examples():
    no_death = _model([], [])
    assert mu_hat(no_death, [0.0], 1, 3.0) == 3.0
    jump = _model([1.0], [np.inf])
    assert mu_hat(jump, [0.0], 0, 3.0) == pytest.approx(1.0)
    assert restricted_means(_exp_curve(), 3.0)[0] == pytest.approx(1 - np.exp(-3), abs=1e-3)


def test_b_of_t_examples():
    c = _exp_curve()
    assert b_of_t(c, 3.0, 3.0) == 3.0
    assert b_of_t(FLAT, 1.3, 3.0) == pytest.approx(3.0)
    assert b_of_t(c, 0.0, 3.0) == pytest.approx(1 - np.exp(-3), abs=1e-3)
    with pytest.raises(InvalidInputError):
        b_of_t(c, 3.5, 3.0)


def test_no_censoring_mass_gives_observed_time():
    y = np.array([0.4, 1.7, 3.0])
    out = t_hat_batch(y, np.ones(3, int), _exp_curve(), FLAT, 3.0)
    np.testing.assert_array_equal(out.t_hat, y)
    np.testing.assert_array_equal(out.augmentation, 0.0)


def test_two_atom_censored_subject():
    # censored at the single censoring jump (1 -> 0.5) with B(y) = b
    y, L = 1.0, 3.0
    b = b_of_t(FLAT, y, L)
    gC = StepCurves([y], [0.5])
    out = t_hat_batch([y], [0], FLAT, gC, L)
    assert out.ipcw[0] == 0.0
    # b / G_C(y-) from the censoring count, b * (0.5 - 1) / 1 from the compensator
    assert out.t_hat[0] == pytest.approx(b * (1 / 1) * 1 + b * (1 / 1) * (0.5 - 1) / 1, abs=1e-12)
    assert out.t_hat[0] == pytest.approx(0.5 * b, abs=1e-12)


def test_single_record_matches_batch():
    gT = _model([0.5, 1.0, 2.0], [0.1, 0.3, 0.7])
    gC = _model([0.2, 1.5], [0.2, 0.5])
    rec = restrict(SubjectRecord(1.6, 0, (0.0,), 1, 1), 3.0)
    curves_T, curves_C = gT.curves_for([[0.0]], [1]), gC.curves_for([[0.0]], [1])
    ref = t_hat_batch([1.6], [0], curves_T, curves_C, 3.0).t_hat[0]
    assert t_hat(rec, gT, gC, 3.0) == pytest.approx(ref, rel=1e-14)
    with pytest.raises(InvalidInputError):
        t_hat(restrict(SubjectRecord(1.6, 0, (0.0,), 1, 0), 3.0), gT, gC, 3.0)


def test_r_hat_examples():
    assert r_hat(1, 2.0, 0.5, 1.5, 1.0) == pytest.approx(1.5)
    for a in (0, 1):
        assert r_hat(a, [1.5, 1.0][1 - a], 0.3, 1.5, 1.0) == pytest.approx(0.5, abs=1e-15)


def test_r_hat_equals_two_term_form(rng):
    n = 1000
    a = rng.integers(0, 2, n)
    e = rng.uniform(0.05, 0.95, n)
    t = rng.uniform(0, 3, n)
    mu1, mu0 = rng.uniform(0, 3, n), rng.uniform(0, 3, n)
    r1 = a * t / e - (a - e) / e * mu1
    r0 = (1 - a) * t / (1 - e) + (a - e) / (1 - e) * mu0
    np.testing.assert_allclose(r_hat(a, t, e, mu1, mu0), r1 - r0, rtol=0, atol=1e-12)


def test_known_propensity_is_constant(rng):
    m = fit_propensity(rng.normal(size=(20, 2)), rng.integers(0, 2, 20), known=0.5)
    np.testing.assert_array_equal(m.predict(rng.normal(size=(7, 2))), 0.5)


def test_logistic_on_balanced_symmetric_design():
    x = np.array([[-1.0], [1.0]] * 10)
    a = np.array([1, 0, 0, 1] * 5)
    m = fit_propensity(x, a)
    np.testing.assert_allclose(m.predict(x), a.mean(), atol=1e-10)


def test_logistic_score_zero_by_finite_differences(rng):
    x = rng.normal(size=(300, 2))
    a = (rng.uniform(size=300) < 1 / (1 + np.exp(-(0.3 + x[:, 0])))).astype(int)
    m = fit_propensity(x, a)
    z = np.column_stack([np.ones(300), x])
    h = 1e-5
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (_logistic_loglik(m.coef + e, z, a)[0] - _logistic_loglik(m.coef - e, z, a)[0]) / (2 * h)
        assert abs(fd) < 1e-6


def test_logistic_separation_and_single_arm():
    x = np.linspace(-1, 1, 20)[:, None]
    with pytest.raises(SeparationError):
        fit_propensity(x, (x[:, 0] > 0).astype(int))
    with pytest.raises(InvalidInputError):
        fit_propensity(x, np.ones(20, int))


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_propensity_is_clipped(c0, c1):
    p = PropensityModel("logistic", coef=np.array([c0, c1])).predict(np.array([[-50.0], [50.0]]))
    assert np.all((p >= 0.01) & (p <= 0.99))


def test_d_hat_all_rwd_only_returns_y_L():
    data = Dataset([0.5, 4.0, 2.0], [1, 0, 0], np.zeros((3, 1)), [1, 0, 1], [0, 0, 0], ("x1",))
    out = d_hat_all(data, None, None, None, 3.0)
    np.testing.assert_array_equal(out.d_hat, [0.5, 3.0, 2.0])
    assert np.all(np.isnan(out.t_hat))


def test_d_hat_all_uncensored_trial_subject():
    data = Dataset([1.2, 0.5], [1, 1], np.zeros((2, 1)), [1, 0], [1, 0], ("x1",))
    gT = _model([0.5, 1.0, 2.0], [0.1, 0.3, 0.7])
    gC = _model([], [])
    e = PropensityModel("constant", value=0.5)
    out = d_hat_all(data, gT, gC, e, 3.0)
    m1 = mu_hat(gT, [0.0], 1, 3.0)
    assert out.d_hat[0] == pytest.approx(r_hat(1, 1.2, 0.5, m1, m1))
    assert out.d_hat[1] == 0.5
    assert out[0].components["t_hat"] == pytest.approx(1.2)


def test_aipcw_mean_matches_restricted_mean_with_true_curves():
    rep = oracle_prop_s2("1", n_draws=40_000, seed=7)
    assert rep.passed, "\n".join(rep.lines())
