"""Pseudo-outcomes for the trial and real-world subjects.

For a trial subject with restricted time ``y_L`` and restricted event
indicator ``d``, the augmented inverse-probability-of-censoring transform is

    T_hat = y_L d / G_C(y_L-) + int_0^L B(t) / G_C(t-) dM_C(t),

    B(t)  = t + int_t^L G_T(u) du / G_T(t),
    M_C   = N_C + Q_C,  N_C(t) = (1 - d) I(y_L <= t),
    Q_C(t) = int_0^t I(y_L >= u) dG_C(u) / G_C(u-).

All fitted curves are step functions, so the integral is a finite sum over
the censoring atom at ``y_L`` (when ``d = 0``) and the jumps of ``G_C`` up to
``y_L``.  The augmentation enters with a plus sign: that is the sign for
which the transform stays unbiased when either ``G_T`` or ``G_C`` (not
necessarily both) is correct.  The pseudo individual treatment effect is the single-expression AIPW
form

    R_hat = (A - e) / (e (1 - e)) (T_hat - mu_A) + mu_1 - mu_0,

and the fused outcome is ``R_hat`` for trial subjects and ``y_L`` for
real-world subjects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .coxph import SURVIVAL_FLOOR, CoxModel, StepCurves
from .data import Dataset, RestrictedRecord
from .errors import ConvergenceError, InvalidInputError, SeparationError

PROPENSITY_CLIP = 0.01


def mu_hat(gT: CoxModel, x, a, L) -> float:
    """Restricted mean ``int_0^L G_T(t | x, a) dt`` of a fitted failure model."""
    if L <= 0:
        raise InvalidInputError("horizon must be > 0")
    curve = gT.curves_for(np.reshape(x, (1, -1)), [a])
    return float(curve.area([L])[0])


def restricted_means(curves: StepCurves, L, rows=None):
    n = curves.n_curves if rows is None else len(rows)
    return curves.area(np.full(n, float(L)), rows)


def b_of_t(curve: StepCurves, t, L, floor=SURVIVAL_FLOOR) -> float:
    """Mean restricted residual life ``E(T_L | T_L > t)`` from one curve."""
    t, L = float(t), float(L)
    if t < 0 or t > L:
        raise InvalidInputError(f"need 0 <= t <= L, got t={t}, L={L}")
    s_t = max(float(curve.value([t], [0])[0]), floor)
    tail = float(curve.area([L], [0])[0] - curve.area([t], [0])[0])
    return t + tail / s_t


@dataclass(frozen=True)
class AipcwTerms:
    t_hat: np.ndarray
    ipcw: np.ndarray
    augmentation: np.ndarray


def t_hat_batch(y_L, delta_tilde, gT: StepCurves, gC: StepCurves, L,
                floor=SURVIVAL_FLOOR) -> AipcwTerms:
    """AIPCW transform for many subjects.

    ``gT`` and ``gC`` hold either one curve per subject or a single curve
    shared by all of them.  Survival values are floored at ``floor`` wherever
    they are inverted; ``G_C`` always enters through its left limit.
    """
    y = np.asarray(y_L, dtype=float)
    d = np.asarray(delta_tilde)
    n = y.shape[0]
    if np.any(y > L) or np.any(y < 0):
        raise InvalidInputError("restricted times must lie in [0, L]")
    for c in (gT, gC):
        if c.n_curves not in (1, n):
            raise InvalidInputError("curves must be shared or one per subject")
    gT = gT.truncate(L)
    gC = gC.truncate(L)
    rows_T = None if gT.n_curves == n else np.zeros(n, dtype=int)
    rows_C = None if gC.n_curves == n else np.zeros(n, dtype=int)

    area_L_T = gT.area_grid([L])[:, 0]
    s_y = np.maximum(gT.value(y, rows_T), floor)
    b_y = y + (area_L_T[gT._rows(n, rows_T)] - gT.area(y, rows_T)) / s_y
    c_left = np.maximum(gC.value(y, rows_C, left=True), floor)

    ipcw = y * d / c_left
    n_term = np.where(d == 0, b_y / c_left, 0.0)

    s = gC.times
    if s.size:
        b_grid = s[None, :] + (area_L_T[:, None] - gT.area_grid(s)) / np.maximum(
            gT.value_grid(s), floor)
        prev = gC._left_vals[:, :-1]
        dc = gC.values - prev
        w = b_grid * dc / np.maximum(prev, floor) ** 2
        cum = np.hstack([np.zeros((w.shape[0], 1)), np.cumsum(w, axis=1)])
        idx = np.searchsorted(s, y, side="right")
        row = np.arange(n) if cum.shape[0] == n else np.zeros(n, dtype=int)
        q_term = cum[row, idx]
    else:
        q_term = np.zeros(n)
    aug = n_term + q_term
    return AipcwTerms(t_hat=ipcw + aug, ipcw=ipcw, augmentation=aug)


def t_hat(record: RestrictedRecord, gT: CoxModel, gC: CoxModel, L) -> float:
    """AIPCW transform of one restricted trial record."""
    o = record.original
    if o.s != 1:
        raise InvalidInputError("the AIPCW transform is defined for trial records (s = 1) only")
    x = np.reshape(o.x, (1, -1))
    terms = t_hat_batch([record.y_L], [record.delta_tilde], gT.curves_for(x, [o.a]),
                        gC.curves_for(x, [o.a]), L)
    return float(terms.t_hat[0])


def r_hat(a, t_hat, e, mu1, mu0):
    """AIPW pseudo individual treatment effect (vectorised)."""
    a = np.asarray(a, dtype=float)
    e = np.asarray(e, dtype=float)
    mu_a = a * mu1 + (1 - a) * mu0
    return (a - e) / (e * (1 - e)) * (np.asarray(t_hat) - mu_a) + mu1 - mu0


@dataclass(frozen=True)
class PropensityModel:
    kind: str
    value: float | None = None
    coef: np.ndarray | None = None
    clip: float = PROPENSITY_CLIP

    def predict(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "constant":
            p = np.full(x.shape[0], float(self.value))
        else:
            p = expit(self.coef[0] + x @ self.coef[1:])
        return np.clip(p, self.clip, 1 - self.clip)


def _logistic_loglik(coef, z, a):
    eta = z @ coef
    ll = float(np.sum(a * eta - np.logaddexp(0, eta)))
    p = expit(eta)
    grad = z.T @ (a - p)
    hess = -(z * (p * (1 - p))[:, None]).T @ z
    return ll, grad, hess


def fit_propensity(x, a, known: float | None = None, max_iter=100, tol=1e-8) -> PropensityModel:
    """Known-constant or logistic propensity model.

    The logistic fit maximizes the Bernoulli log likelihood of ``a`` on an
    intercept plus ``x`` by Newton-Raphson.
    """
    if known is not None:
        if not 0 < known < 1:
            raise InvalidInputError("known propensity must lie in (0, 1)")
        return PropensityModel("constant", value=float(known))
    a = np.asarray(a, dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] != a.shape[0]:
        x = x.reshape(a.shape[0], -1)
    if a.min() == a.max():
        raise InvalidInputError("both treatment arms are needed to fit a propensity model")
    z = np.hstack([np.ones((a.shape[0], 1)), x])
    coef = np.zeros(z.shape[1])
    ll, grad, hess = _logistic_loglik(coef, z, a)
    for _ in range(max_iter):
        if np.linalg.norm(grad) <= tol:
            break
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            raise SeparationError("singular logistic information matrix") from None
        scale = 1.0
        for _ in range(50):
            cand = coef + scale * step
            ll_new, g_new, h_new = _logistic_loglik(cand, z, a)
            if ll_new >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            scale /= 2
        coef, ll, grad, hess = cand, ll_new, g_new, h_new
        if np.max(np.abs(coef)) > 30:
            raise SeparationError(
                f"logistic coefficients diverge (max |coef| = {np.max(np.abs(coef)):.1f}); "
                "treatment is (quasi-)separated by the covariates")
    else:
        if np.linalg.norm(grad) > tol:
            raise ConvergenceError("logistic regression did not converge",
                                   float(np.linalg.norm(grad)))
    return PropensityModel("logistic", coef=coef)


@dataclass(frozen=True)
class PseudoOutcome:
    d_hat: float
    components: dict


@dataclass(frozen=True)
class PseudoOutcomes:
    """Fused outcomes for a whole dataset, in record order.

    Component arrays are NaN for real-world subjects.
    """

    d_hat: np.ndarray
    t_hat: np.ndarray
    ipcw: np.ndarray
    augmentation: np.ndarray
    mu1: np.ndarray
    mu0: np.ndarray
    e: np.ndarray

    def __len__(self):
        return len(self.d_hat)

    def __getitem__(self, i) -> PseudoOutcome:
        comps = {k: float(getattr(self, k)[i])
                 for k in ("t_hat", "ipcw", "augmentation", "mu1", "mu0", "e")}
        return PseudoOutcome(float(self.d_hat[i]), comps)


def trial_pseudo_ite(x, a, y_L, delta_tilde, gT: CoxModel, gC: CoxModel,
                     e: PropensityModel, L):
    """``R_hat`` and its components for trial-like records."""
    spec = gT.design_spec
    x = np.atleast_2d(x)
    design = spec.build(x, a)
    terms = t_hat_batch(y_L, delta_tilde, gT.curves(design), gC.curves(design), L)
    mu1 = restricted_means(gT.curves(spec.build(x, np.ones(len(a)))), L)
    mu0 = restricted_means(gT.curves(spec.build(x, np.zeros(len(a)))), L)
    ev = e.predict(x)
    r = r_hat(a, terms.t_hat, ev, mu1, mu0)
    return r, terms, mu1, mu0, ev


def d_hat_all(data: Dataset, gT: CoxModel | None, gC: CoxModel | None,
              e: PropensityModel | None, L) -> PseudoOutcomes:
    """Fused outcome: ``R_hat`` for trial subjects, ``y_L`` for real-world ones."""
    y_L, dt = data.restricted(L)
    n = data.n
    nan = np.full(n, np.nan)
    d = y_L.astype(float).copy()
    t_h, ipcw, aug, mu1, mu0, ev = (nan.copy() for _ in range(6))
    trial = data.s == 1
    if np.any(trial):
        if gT is None or gC is None or e is None:
            raise InvalidInputError("trial records need fitted nuisance models")
        r, terms, m1, m0, e1 = trial_pseudo_ite(
            data.x[trial], data.a[trial], y_L[trial], dt[trial], gT, gC, e, L)
        d[trial] = r
        t_h[trial], ipcw[trial], aug[trial] = terms.t_hat, terms.ipcw, terms.augmentation
        mu1[trial], mu0[trial], ev[trial] = m1, m0, e1
    if not np.all(np.isfinite(d)):
        raise InvalidInputError("non-finite pseudo-outcome")
    return PseudoOutcomes(d, t_h, ipcw, aug, mu1, mu0, ev)
