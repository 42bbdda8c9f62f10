"""Monte Carlo identity checks run with known (true or deliberately corrupted) nuisances.

Every check draws subjects at fixed covariate values from the trial
population of a simulation design, so conditional expectations become plain
means.  True survival curves are continuous; they are replaced by
right-continuous step functions on a fine uniform grid (value at each cell
midpoint) so that the production pseudo-outcome code is what gets tested.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .coxph import StepCurves
from .nuisance import r_hat, t_hat_batch
from .simulation import (_sample_u, case_design, censoring_rate, sample_failure,
                         trial_survival, true_censoring_survival, true_mu, true_tau)

DEFAULT_PROBES = ((0.0, 0.0), (-1.0, -1.0), (1.0, 1.0), (-1.0, 1.0), (0.5, -0.5))
STEP_GRID = 20000


@dataclass
class OracleRow:
    label: str
    estimate: float
    target: float
    se: float
    tol_se: float = 3.0

    @property
    def z(self):
        return (self.estimate - self.target) / self.se if self.se > 0 else (
            0.0 if self.estimate == self.target else np.inf)

    @property
    def passed(self):
        return abs(self.estimate - self.target) <= self.tol_se * self.se + 1e-12


@dataclass
class OracleReport:
    name: str
    rows: list = field(default_factory=list)

    @property
    def passed(self):
        return all(r.passed for r in self.rows)

    def lines(self):
        return [f"{self.name} {r.label}: estimate {r.estimate:.6f} target {r.target:.6f} "
                f"se {r.se:.2e} z {r.z:+.2f} {'PASS' if r.passed else 'FAIL'}" for r in self.rows]


def _mean_se(v):
    v = np.asarray(v, dtype=float)
    return float(np.mean(v)), float(np.std(v, ddof=1) / np.sqrt(len(v)))


def step_curve(fn, L, k=STEP_GRID) -> StepCurves:
    """Single-row step approximation of a continuous survival function on ``[0, L]``."""
    edges = np.linspace(0.0, L, k + 1)
    jumps = edges[1:]
    mids = np.append((edges[1:-1] + edges[2:]) / 2, L)
    return StepCurves(jumps, np.asarray(fn(mids))[None, :])


def _full_x(case, x):
    p = 4 if str(case).startswith("S") else 2
    x = np.asarray(x, dtype=float)
    return np.concatenate([x, np.zeros(p - len(x))])


def _draw(case, x, a, n, rng):
    """Failure and observed censoring-or-duration times at fixed ``(x, a)`` in the trial."""
    src = case_design(case).trial
    X = np.tile(x, (n, 1))
    u = _sample_u(src, n, rng)
    t = sample_failure(case, 1, X, np.full(n, a), u, rng)
    c = rng.exponential(size=n) / censoring_rate(case, 1, X)
    return t, np.minimum(c, src.duration)


def _restricted_obs(t, c, L):
    y = np.minimum(t, c)
    delta = t <= c
    y_L = np.minimum(y, L)
    return y_L, np.where(y >= L, 1, delta).astype(int)


def oracle_prop_s1(case="1", n_draws=100_000, probes=DEFAULT_PROBES, seed=0, e=0.5):
    """Mean of the AIPW pseudo effect on uncensored draws versus ``tau(x)``."""
    rng = np.random.default_rng(seed)
    L = case_design(case).horizon
    rep = OracleReport("identification")
    for x in probes:
        xf = _full_x(case, x)
        a = (rng.uniform(size=n_draws) < e).astype(int)
        t1, _ = _draw(case, xf, 1, n_draws, rng)
        t0, _ = _draw(case, xf, 0, n_draws, rng)
        t_L = np.minimum(np.where(a == 1, t1, t0), L)
        mu1, mu0 = true_mu(case, xf, 1, L), true_mu(case, xf, 0, L)
        r = r_hat(a, t_L, e, mu1, mu0)
        m, se = _mean_se(r)
        rep.rows.append(OracleRow(f"x={tuple(x)}", m, mu1 - mu0, se))
    return rep


def true_curves(case, x, a, L, k=STEP_GRID):
    xf = _full_x(case, x)
    gT = step_curve(lambda t: trial_survival(case, xf, a, t), L, k)
    gC = step_curve(lambda t: true_censoring_survival(case, xf, t), L, k)
    return gT, gC


def oracle_prop_s2(case="1", n_draws=100_000, probes=(((0.0, 0.0), 1), ((-1.0, 1.0), 0),
                                                       ((1.0, 1.0), 1)), seed=0, k=STEP_GRID):
    """Mean AIPCW transform with true nuisances versus the restricted mean, and the
    mean of the censoring-martingale augmentation versus zero."""
    rng = np.random.default_rng(seed)
    L = case_design(case).horizon
    rep = OracleReport("aipcw")
    for x, a in probes:
        xf = _full_x(case, x)
        gT, gC = true_curves(case, xf, a, L, k)
        t, c = _draw(case, xf, a, n_draws, rng)
        y_L, dt = _restricted_obs(t, c, L)
        terms = t_hat_batch(y_L, dt, gT, gC, L)
        m, se = _mean_se(terms.t_hat)
        rep.rows.append(OracleRow(f"mean T_hat x={tuple(x)} a={a}", m, true_mu(case, xf, a, L), se))
        m, se = _mean_se(terms.augmentation)
        rep.rows.append(OracleRow(f"martingale x={tuple(x)} a={a}", m, 0.0, se))
    return rep


def theta_bias(case, x, a, L, kappa_T=1.0, kappa_C=1.0, n=20001):
    """Exact mean error of the AIPCW transform under power-corrupted curves.

    With ``S = G_T``, ``Sh = G_T ** kappa_T`` and ``R = G_C / G_C ** kappa_C``,

        E(T_hat) - E(T_L) = int_0^L int_0^t [S(t) - Sh(t) S(u) / Sh(u)] dR(u) dt,

    which vanishes when ``Sh = S`` or ``R = 1``.
    """
    xf = _full_x(case, x)
    t = np.linspace(0.0, L, n)
    sT = trial_survival(case, xf, a, t)
    sT_h = sT ** kappa_T
    h = float(censoring_rate(case, 1, xf[None, :])[0])
    c = (1.0 - kappa_C) * h
    R = np.exp(-c * t)
    dR = -c * R
    inner = integrate.cumulative_simpson(sT / sT_h * dR, x=t, initial=0.0)
    return float(integrate.simpson(sT * (R - 1.0) - sT_h * inner, x=t))


MISSPEC = ("none", "propensity", "censoring", "failure", "both")


def gamma_terms(case, x, L, e, e_hat, mu_shift, kappa_T, kappa_C):
    g1 = sum((e_hat - e) * mu_shift / (a * e_hat + (1 - a) * (1 - e_hat)) for a in (0, 1))
    th1 = theta_bias(case, x, 1, L, kappa_T, kappa_C)
    th0 = theta_bias(case, x, 0, L, kappa_T, kappa_C)
    g2 = (e / e_hat) * th1 - ((1 - e) / (1 - e_hat)) * th0
    return g1, g2


def oracle_lemma_s2(case="1", misspec="propensity", n_draws=100_000, probes=DEFAULT_PROBES[:3],
                    seed=0, e_hat=0.6, mu_shift=0.1, kappa_T=1.5, kappa_C=3.0, k=STEP_GRID):
    """Bias of the fused outcome under corrupted nuisances versus ``Gamma_1 + Gamma_2``.

    ``misspec`` picks what is corrupted: ``propensity`` (``e_hat`` and
    ``mu + mu_shift``), ``censoring`` (``G_C ** kappa_C``), ``failure``
    (``G_T ** kappa_T``, with ``mu`` from the corrupted curve), ``both``
    (failure and censoring) or ``none``.  Two rows per probe: the paired mean
    of ``D_hat - D`` and the direct mean of ``D_hat - tau``.
    """
    if misspec not in MISSPEC:
        raise ValueError(f"misspec must be one of {MISSPEC}")
    rng = np.random.default_rng(seed)
    L = case_design(case).horizon
    e = 0.5
    eh = e_hat if misspec == "propensity" else e
    shift = mu_shift if misspec == "propensity" else 0.0
    kT = kappa_T if misspec in ("failure", "both") else 1.0
    kC = kappa_C if misspec in ("censoring", "both") else 1.0
    rep = OracleReport(f"bias[{misspec}]")
    for x in probes:
        xf = _full_x(case, x)
        a = (rng.uniform(size=n_draws) < e).astype(int)
        d_hat = np.empty(n_draws)
        d_true = np.empty(n_draws)
        mus, mus_hat = {}, {}
        for arm in (1, 0):
            gT, gC = true_curves(case, xf, arm, L, k)
            gT_h = StepCurves(gT.times, gT.values ** kT)
            gC_h = StepCurves(gC.times, gC.values ** kC)
            mus[arm] = true_mu(case, xf, arm, L)
            mus_hat[arm] = float(gT_h.area([L])[0]) + shift if kT != 1.0 else mus[arm] + shift
            idx = np.flatnonzero(a == arm)
            t, c = _draw(case, xf, arm, idx.size, rng)
            y_L, dt = _restricted_obs(t, c, L)
            d_true[idx] = t_hat_batch(y_L, dt, gT, gC, L).t_hat
            d_hat[idx] = t_hat_batch(y_L, dt, gT_h, gC_h, L).t_hat
        D = r_hat(a, d_true, e, mus[1], mus[0])
        Dh = r_hat(a, d_hat, eh, mus_hat[1], mus_hat[0])
        g1, g2 = gamma_terms(case, xf, L, e, eh, shift, kT, kC)
        m, se = _mean_se(Dh - D)
        rep.rows.append(OracleRow(f"paired x={tuple(x)}", m, g1 + g2, se))
        m, se = _mean_se(Dh - true_tau(case, xf, L))
        rep.rows.append(OracleRow(f"direct x={tuple(x)}", m, g1 + g2, se))
    return rep


def bootstrap_se(fit, points, n_boot=200, seed=0):
    """Pairs bootstrap of the final weighted system with tuning, weights and
    outcomes held fixed; returns the bootstrap SD of ``tau_hat`` at ``points``."""
    from .sieve import eval_basis
    sys, gammas = fit.system, fit.gammas
    rng = np.random.default_rng(seed)
    phi = eval_basis(fit.basis_tau, np.atleast_2d(points))
    pen = sys.n * sys.penalty(gammas)
    est = np.empty((n_boot, phi.shape[0]))
    for b in range(n_boot):
        # resample within each source so both blocks stay identified
        idx = np.concatenate([rng.choice(np.flatnonzero(rows), rows.sum())
                              for rows in (np.arange(sys.n) < sys.n1, np.arange(sys.n) >= sys.n1)
                              if rows.any()])
        A, h, d = sys.A[idx], sys.h[idx], sys.d[idx]
        M = A.T @ (h[:, None] * A) + pen
        theta = np.linalg.solve(M, A.T @ (h * d))
        est[b] = phi @ theta[:sys.r1]
    return est.std(axis=0, ddof=1)
