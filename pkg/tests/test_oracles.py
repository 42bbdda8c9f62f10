import numpy as np
import pytest

from survfuse.estimator import FitConfig, fit_integrative
from survfuse.oracles import (bootstrap_se, gamma_terms, oracle_lemma_s2, oracle_prop_s1,
                              step_curve, theta_bias)
from survfuse.simulation import DgpSpec, generate

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")


def test_gamma1_closed_form():
    g1, g2 = gamma_terms("1", np.zeros(2), 3.0, 0.5, 0.6, 0.1, 1.0, 1.0)
    assert g1 == pytest.approx(0.041667, abs=1e-6)
    assert abs(g2) < 1e-12


def test_gamma1_vanishes_with_true_propensity():
    g1, _ = gamma_terms("1", np.ones(2), 3.0, 0.5, 0.5, 0.3, 1.0, 1.0)
    assert g1 == 0.0


def test_theta_vanishes_without_corruption():
    for case in ("1", "3"):
        assert theta_bias(case, np.array([0.5, 0.5]), 1, 3.0, 1.0, 1.0) == 0.0
        assert theta_bias(case, np.array([0.5, 0.5]), 1, 3.0, 2.0, 1.0) == 0.0
        assert abs(theta_bias(case, np.array([0.5, 0.5]), 0, 3.0, 1.0, 4.0)) < 1e-8


def test_theta_nonzero_when_both_curves_corrupted():
    assert abs(theta_bias("1", np.zeros(2), 1, 3.0, 1.5, 3.0)) > 1e-3


def test_step_curve_area_converges():
    sc = step_curve(lambda t: np.exp(-t), 2.0, k=4000)
    assert sc.area([2.0])[0] == pytest.approx(1 - np.exp(-2.0), abs=1e-6)


def test_identification_oracle_small():
    rep = oracle_prop_s1("2", 20_000, seed=1)
    assert len(rep.rows) == 5 and rep.passed, "\n".join(rep.lines())


def test_bias_oracle_true_nuisances_unbiased():
    rep = oracle_lemma_s2("1", "none", 20_000, seed=2, k=4000)
    assert rep.passed, "\n".join(rep.lines())
    assert all(r.target == 0.0 for r in rep.rows)


def test_bias_oracle_censoring_corruption_targets_zero_theta():
    # only the censoring curve is wrong while the failure curve is right
    rep = oracle_lemma_s2("1", "censoring", 20_000, seed=3, k=4000)
    assert rep.passed, "\n".join(rep.lines())


def test_unknown_misspec_rejected():
    with pytest.raises(ValueError):
        oracle_lemma_s2("1", "everything", 10)


def test_bootstrap_se_shape_and_scale():
    data = generate(DgpSpec("1", 300, 600, seed=8))
    fit = fit_integrative(data, FitConfig(horizon=3.0, gamma_grid=5))
    pts = np.array([[0.0, 0.0], [0.5, -0.5]])
    bs = bootstrap_se(fit, pts, n_boot=60, seed=1)
    assert bs.shape == (2,) and np.all(bs > 0)
    assert np.all(np.abs(bs / fit.se(pts) - 1) < 0.6)
