"""Cox proportional hazards fits for the failure and censoring time models.

The coefficient vector maximizes the Breslow partial likelihood

    l(beta) = sum_{i: event} [ x_i'beta - log sum_{j: y_j >= y_i} exp(x_j'beta) ]

by Newton-Raphson with step halving, and the baseline cumulative hazard is the
Breslow estimator.  Fitted conditional survival functions are right-continuous
step functions with jumps at the distinct event times; :class:`StepCurves`
holds a batch of them on a shared jump grid so that per-subject quantities can
be computed with array operations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import (ConvergenceError, DegenerateFitError, InvalidInputError,
                     NumericalError, SingularMatrixError)

MAX_ITER = 100
GRAD_TOL = 1e-8
SURVIVAL_FLOOR = 1e-4


class StepCurves:
    """Batch of right-continuous survival step functions on a shared grid.

    Row ``i`` equals 1 on ``[0, times[0])`` and ``values[i, k]`` on
    ``[times[k], times[k + 1])``.  With a single row the curve is shared by
    every query.
    """

    def __init__(self, times, values):
        times = np.asarray(times, dtype=float)
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if times.ndim != 1 or values.shape[1] != times.shape[0]:
            raise InvalidInputError("values must have one column per jump time")
        if times.size and (np.any(np.diff(times) <= 0) or times[0] < 0):
            raise InvalidInputError("jump times must be nonnegative and strictly increasing")
        self.times = times
        self.values = values
        # area under each row from 0 up to each jump time
        knots = np.concatenate([[0.0], times])
        left_vals = np.hstack([np.ones((values.shape[0], 1)), values])
        pieces = left_vals[:, :-1] * np.diff(knots)[None, :]
        self._cum = np.hstack([np.zeros((values.shape[0], 1)), np.cumsum(pieces, axis=1)])
        self._knots = knots
        self._left_vals = left_vals

    @property
    def n_curves(self):
        return self.values.shape[0]

    def _rows(self, n, rows):
        if rows is not None:
            return np.asarray(rows)
        if self.n_curves == 1:
            return np.zeros(n, dtype=int)
        if self.n_curves != n:
            raise InvalidInputError("need one query per curve or an explicit row index")
        return np.arange(n)

    def value(self, t, rows=None, left=False):
        """``S_i(t)`` (or the left limit ``S_i(t-)``) for paired queries."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        rows = self._rows(t.shape[0], rows)
        side = "left" if left else "right"
        idx = np.searchsorted(self.times, t, side=side)
        return self._left_vals[rows, idx]

    def area(self, t, rows=None):
        """``int_0^t S_i(u) du`` for paired queries."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        rows = self._rows(t.shape[0], rows)
        idx = np.searchsorted(self.times, t, side="right")
        return self._cum[rows, idx] + self._left_vals[rows, idx] * (t - self._knots[idx])

    def value_grid(self, t, left=False):
        """Values of every row at each point of ``t``; shape ``(n_curves, len(t))``."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="left" if left else "right")
        return self._left_vals[:, idx]

    def area_grid(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        return self._cum[:, idx] + self._left_vals[:, idx] * (t - self._knots[idx])[None, :]

    def truncate(self, L):
        """Drop jumps after ``L``; behaviour on ``[0, L]`` is unchanged."""
        keep = self.times <= L
        return StepCurves(self.times[keep], self.values[:, keep])


@dataclass(frozen=True)
class DesignSpec:
    """Maps covariates and treatment to a Cox design row.

    Columns are ``x_1..x_p, a`` followed by ``a*x_1..a*x_p`` when
    ``interactions`` is true.
    """

    interactions: bool = True

    def build(self, x, a):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        a = np.asarray(a, dtype=float).reshape(-1, 1)
        if a.shape[0] == 1 and x.shape[0] > 1:
            a = np.repeat(a, x.shape[0], axis=0)
        cols = [x, a]
        if self.interactions:
            cols.append(a * x)
        return np.hstack(cols)


@dataclass(frozen=True)
class ConvergenceReport:
    iterations: int
    grad_norm: float
    loglik_path: tuple


@dataclass(frozen=True)
class CoxModel:
    beta: np.ndarray
    times: np.ndarray
    cumhaz: np.ndarray
    convergence_report: ConvergenceReport
    design_spec: DesignSpec | None = None

    def linear_predictor(self, design):
        return np.atleast_2d(design) @ self.beta

    def baseline_cumhaz(self, t):
        """Right-continuous Breslow ``H0(t)``."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        return np.concatenate([[0.0], self.cumhaz])[idx]

    def curves(self, design) -> StepCurves:
        """Survival curves ``exp(-H0(t) exp(design @ beta))``, one row per design row."""
        risk = np.exp(self.linear_predictor(design))
        return StepCurves(self.times, np.exp(-np.outer(risk, self.cumhaz)))

    def curves_for(self, x, a) -> StepCurves:
        if self.design_spec is None:
            raise InvalidInputError("model has no design spec; use curves(design)")
        return self.curves(self.design_spec.build(x, a))


def _risk_sums(xs, eta, first):
    w = np.exp(eta - eta.max())
    s0 = np.cumsum(w[::-1])[::-1]
    wx = w[:, None] * xs
    s1 = np.cumsum(wx[::-1], axis=0)[::-1]
    s2 = np.cumsum((wx[:, :, None] * xs[:, None, :])[::-1], axis=0)[::-1]
    return s0[first], s1[first], s2[first], eta.max()


def partial_loglik(beta, time, event, design):
    """Breslow log partial likelihood, gradient and Hessian at ``beta``."""
    time = np.asarray(time, dtype=float)
    event = np.asarray(event).astype(bool)
    design = np.atleast_2d(np.asarray(design, dtype=float))
    order = np.argsort(time, kind="mergesort")
    t, ev, xs = time[order], event[order], design[order]
    first = np.searchsorted(t, t, side="left")
    return _loglik_sorted(np.asarray(beta, dtype=float), ev, xs, first)


def _loglik_sorted(beta, ev, xs, first):
    eta = xs @ beta
    s0, s1, s2, shift = _risk_sums(xs, eta, first)
    s0, s1, s2 = s0[ev], s1[ev], s2[ev]
    xbar = s1 / s0[:, None]
    ll = float(np.sum(eta[ev]) - np.sum(np.log(s0) + shift))
    grad = np.sum(xs[ev] - xbar, axis=0)
    hess = -(np.sum(s2 / s0[:, None, None], axis=0) - xbar.T @ xbar)
    return ll, grad, hess


def fit_cox(time, event, design, design_spec: DesignSpec | None = None,
            max_iter: int = MAX_ITER, tol: float = GRAD_TOL) -> CoxModel:
    """Fit a Cox model with Breslow ties.

    Raises
    ------
    DegenerateFitError
        No events.
    SingularMatrixError
        The Hessian is singular (design rank deficient on the risk sets).
    ConvergenceError
        ``max_iter`` Newton steps without reaching ``tol``.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event).astype(bool)
    design = np.atleast_2d(np.asarray(design, dtype=float))
    if design.shape[0] != time.shape[0] or event.shape[0] != time.shape[0]:
        raise InvalidInputError("time, event and design must have the same number of rows")
    if not np.any(event):
        raise DegenerateFitError("no events: the partial likelihood is constant")
    order = np.argsort(time, kind="mergesort")
    t, ev, xs = time[order], event[order], design[order]
    # centring leaves beta and the partial likelihood unchanged
    xs = xs - xs.mean(axis=0)
    first = np.searchsorted(t, t, side="left")

    beta = np.zeros(xs.shape[1])
    ll, grad, hess = _loglik_sorted(beta, ev, xs, first)
    path = [ll]
    it = 0
    while np.linalg.norm(grad) > tol:
        if it >= max_iter:
            raise ConvergenceError(
                f"Newton-Raphson did not converge in {max_iter} iterations "
                f"(gradient norm {np.linalg.norm(grad):.3e})", np.linalg.norm(grad))
        try:
            cho = linalg.cho_factor(-hess)
            step = linalg.cho_solve(cho, grad)
        except linalg.LinAlgError:
            ev_min = float(np.min(np.linalg.eigvalsh(-hess)))
            raise SingularMatrixError(
                f"singular information matrix (min eigenvalue {ev_min:.3e}); "
                "design is rank deficient on the risk sets", ev_min) from None
        if not np.all(np.isfinite(step)):
            raise SingularMatrixError("non-finite Newton step")
        scale = 1.0
        for _ in range(60):
            cand = beta + scale * step
            ll_new, g_new, h_new = _loglik_sorted(cand, ev, xs, first)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            scale /= 2
        else:
            raise ConvergenceError("step halving failed to increase the partial likelihood",
                                   np.linalg.norm(grad))
        beta, ll, grad, hess = cand, ll_new, g_new, h_new
        path.append(ll)
        it += 1

    eigs = np.linalg.eigvalsh(-hess)
    if eigs[0] <= 1e-12 * max(eigs[-1], 1e-300):
        raise SingularMatrixError(
            f"singular information matrix at the optimum (min eigenvalue {eigs[0]:.3e})",
            float(eigs[0]))

    # Breslow baseline on the original (uncentred) design
    risk = np.exp(design[order] @ beta)
    s0 = np.cumsum(risk[::-1])[::-1]
    uniq, counts = np.unique(t[ev], return_counts=True)
    at_risk = s0[np.searchsorted(t, uniq, side="left")]
    cumhaz = np.cumsum(counts / at_risk)
    report = ConvergenceReport(it, float(np.linalg.norm(grad)), tuple(path))
    return CoxModel(beta=beta, times=uniq, cumhaz=cumhaz, convergence_report=report,
                    design_spec=design_spec)


def survival_at(model: CoxModel, x, a, t) -> float:
    """``exp(-H0(t) exp(design(x, a)'beta))``, right-continuous in ``t``."""
    t = float(t)
    if t < 0:
        raise InvalidInputError(f"time must be >= 0, got {t}")
    spec = model.design_spec or DesignSpec()
    eta = float((spec.build(np.asarray(x, dtype=float).reshape(1, -1), [a]) @ model.beta)[0])
    return float(np.exp(-model.baseline_cumhaz(t) * np.exp(eta)))


def _relabel(exc, label):
    new = type(exc).__new__(type(exc))
    new.__dict__.update(exc.__dict__)
    new.args = (f"{label}: {exc}",)
    new.model = label
    return new


def fit_nuisance_pair(trial, L, design_spec: DesignSpec | None = None):
    """Fit the failure-time and censoring-time Cox models on trial records.

    The censoring model treats ``1 - delta`` as the event indicator.  Errors
    keep their class and gain a ``model`` attribute naming the failing fit.
    """
    if trial.n == 0:
        raise InvalidInputError("no trial records to fit nuisance models on")
    if L <= 0:
        raise InvalidInputError("horizon must be > 0")
    spec = design_spec or DesignSpec()
    design = spec.build(trial.x, trial.a)
    out = []
    for label, ev in (("failure-time model", trial.delta), ("censoring-time model", 1 - trial.delta)):
        try:
            out.append(fit_cox(trial.y, ev, design, design_spec=spec))
        except NumericalError as exc:
            raise _relabel(exc, label) from exc
    return tuple(out)
