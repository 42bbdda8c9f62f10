"""Penalized weighted sieve regression for the treatment effect and the bias function.

With ``A = [Phi | (1 - S) Psi]`` (trial rows first), diagonal weights ``H``
and block penalty ``P_gamma = diag(gamma_1 P_1, gamma_0 P_2)`` the estimate is

    theta = (A' H A + n P_gamma)^{-1} A' H D,

so that ``tau(x) = phi(x)' alpha`` and ``lambda(x) = psi(x)' beta``.  The
pointwise variance is the plug-in sandwich

    V = M^{-1} A' H Sigma_D H A M^{-1},   M = A' H A + n P_gamma,

with ``Sigma_D`` the kernel variance estimate from the final residuals.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.stats import norm

from .config import FitConfig
from .coxph import DesignSpec, fit_nuisance_pair
from .data import Dataset
from .errors import (InvalidInputError, NumericalError, SingularMatrixError, StageError,
                     SurvfuseError)
from .nuisance import d_hat_all, fit_propensity, trial_pseudo_ite
from .sieve import (SieveBasis, build_basis, default_interior_knots, eval_basis,
                    penalty_matrix, pooled_domain)
from .weights import binary_columns, estimate_sigma2, fit_variance_weights

FORMAT_VERSION = 1
SINGULAR_RTOL = 1e-13


@dataclass
class DesignSystem:
    """Block design, weights and outcome of one penalized fit.

    ``order[i]`` is the input row that became system row ``i``.
    """

    A: np.ndarray
    h: np.ndarray
    d: np.ndarray
    P1: np.ndarray
    P2: np.ndarray | None
    n1: int
    n0: int
    r1: int
    r0: int
    order: np.ndarray
    _gram: np.ndarray | None = field(default=None, repr=False)
    _rhs: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def gram(self):
        if self._gram is None:
            self._gram = self.A.T @ (self.h[:, None] * self.A)
        return self._gram

    @property
    def rhs(self):
        if self._rhs is None:
            self._rhs = self.A.T @ (self.h * self.d)
        return self._rhs

    def penalty(self, gammas):
        g1, g0 = gammas
        if self.P2 is None:
            return g1 * self.P1
        return linalg.block_diag(g1 * self.P1, g0 * self.P2)

    def normal_matrix(self, gammas):
        return self.gram + self.n * self.penalty(gammas)

    def reweighted(self, h):
        return DesignSystem(self.A, np.asarray(h, dtype=float), self.d, self.P1, self.P2,
                            self.n1, self.n0, self.r1, self.r0, self.order)


def assemble(x, s, d, h, basis_tau: SieveBasis, basis_lambda: SieveBasis | None,
             P1, P2=None) -> DesignSystem:
    """Build ``[Phi | (1 - S) Psi]`` with trial rows first (stable reorder).

    Without ``basis_lambda`` the system has the single block ``Phi``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    s = np.asarray(s)
    d = np.asarray(d, dtype=float)
    h = np.asarray(h, dtype=float)
    if not (x.shape[0] == len(s) == len(d) == len(h)):
        raise InvalidInputError("x, s, d and h must have the same length")
    if np.any(~np.isfinite(h)) or np.any(h <= 0):
        raise InvalidInputError("weights must be finite and positive")
    order = np.argsort(-s, kind="stable")
    x, s, d, h = x[order], s[order], d[order], h[order]
    phi = eval_basis(basis_tau, x)
    if phi.shape[1] != P1.shape[0]:
        raise InvalidInputError("penalty P1 does not match the tau basis")
    blocks = [phi]
    r0 = 0
    if basis_lambda is not None:
        psi = eval_basis(basis_lambda, x) * (1 - s)[:, None]
        if P2 is None or psi.shape[1] != P2.shape[0]:
            raise InvalidInputError("penalty P2 does not match the lambda basis")
        blocks.append(psi)
        r0 = psi.shape[1]
    A = np.hstack(blocks)
    return DesignSystem(A, h, d, np.asarray(P1), None if basis_lambda is None else np.asarray(P2),
                        int(np.sum(s == 1)), int(np.sum(s == 0)), phi.shape[1], r0, order)


@dataclass
class Solution:
    theta: np.ndarray
    M_inv: np.ndarray
    gammas: tuple

    def split(self, r1):
        return self.theta[:r1], self.theta[r1:]


def _factor_solve(M, rhs):
    """Solve ``M X = rhs`` for symmetric ``M``; returns ``(X, M^{-1})``.

    Cholesky first; when it fails or its pivots suggest near-singularity the
    eigenvalues decide between a symmetric solve and a singular-system error.
    """
    n = M.shape[0]
    eye = np.eye(n)
    try:
        cho = linalg.cho_factor(M, check_finite=True)
        piv = np.abs(np.diag(cho[0])) ** 2
        if piv.min() > SINGULAR_RTOL * piv.max():
            return linalg.cho_solve(cho, rhs), linalg.cho_solve(cho, eye)
    except linalg.LinAlgError:
        pass
    eigs = np.linalg.eigvalsh(M)
    if eigs[0] <= SINGULAR_RTOL * max(abs(eigs[-1]), 1e-300):
        raise SingularMatrixError(
            f"regularized normal matrix is not positive definite "
            f"(smallest eigenvalue {eigs[0]:.3e})", float(eigs[0]))
    M_inv = linalg.solve(M, eye, assume_a="sym")
    return M_inv @ rhs, M_inv


def solve(sys: DesignSystem, gammas) -> Solution:
    M = sys.normal_matrix(gammas)
    theta, M_inv = _factor_solve(M, sys.rhs)
    return Solution(theta, M_inv, tuple(float(g) for g in gammas))


def gcv_score(sys: DesignSystem, gammas, solution: Solution | None = None):
    """``n |H^(1/2)(D - A theta)|^2 / (n - tr S)^2`` with ``tr S = tr(M^{-1} A'HA)``."""
    sol = solution or solve(sys, gammas)
    resid = sys.d - sys.A @ sol.theta
    rss = float(np.sum(sys.h * resid ** 2))
    tr = float(np.sum(sol.M_inv * sys.gram.T))
    n = sys.n
    return (n * rss / (n - tr) ** 2 if tr < n else math.inf), tr


def smoother_trace_eig(sys: DesignSystem, gammas):
    """Trace of ``H^(1/2) A M^{-1} A' H^(1/2)`` as the sum of its eigenvalues."""
    M = sys.normal_matrix(gammas)
    B = np.sqrt(sys.h)[:, None] * sys.A
    small = linalg.solve(M, B.T @ B, assume_a="sym")
    return float(np.sum(np.linalg.eigvals(small).real))


def gamma_grid(n, m, p, size=15, span=(1e-8, 1e2)):
    scale = n ** (-2.0 * m / (2 * m + p))
    return np.geomspace(span[0], span[1], size) * scale


@dataclass(frozen=True)
class GcvResult:
    gammas: tuple
    score: float
    scores: np.ndarray
    grid: np.ndarray
    at_edge: bool


def gcv_select(sys: DesignSystem, m=2, p=2, size=15, span=(1e-8, 1e2)) -> GcvResult:
    """Grid search for ``(gamma_1, gamma_0)``; ties go to the smoother fit."""
    grid = gamma_grid(sys.n, m, p, size, span)
    two = sys.P2 is not None
    g0s = grid if two else np.array([0.0])
    scores = np.full((len(grid), len(g0s)), np.inf)
    for i, g1 in enumerate(grid):
        for j, g0 in enumerate(g0s):
            try:
                scores[i, j] = gcv_score(sys, (g1, g0))[0]
            except SingularMatrixError:
                pass
    best = np.min(scores)
    if not np.isfinite(best):
        raise SingularMatrixError("no grid point gives a solvable system")
    tied = np.argwhere(scores <= best + 1e-12 * abs(best))
    # larger total smoothing first, then larger gamma_1
    i, j = max(tied, key=lambda ij: (ij[0] + ij[1], ij[0]))
    last = len(grid) - 1
    edge = i in (0, last) or (two and j in (0, last))
    if edge:
        warnings.warn("GCV optimum on the edge of the smoothing-parameter grid",
                      RuntimeWarning, stacklevel=2)
    return GcvResult((float(grid[i]), float(g0s[j])), float(best), scores, grid, bool(edge))


def sandwich(sys: DesignSystem, sol: Solution, sigma2):
    """``M^{-1} A' H Sigma H A M^{-1}`` for per-row variances ``sigma2`` (system order)."""
    w = sys.h ** 2 * np.asarray(sigma2, dtype=float)
    meat = sys.A.T @ (w[:, None] * sys.A)
    V = sol.M_inv @ meat @ sol.M_inv
    return (V + V.T) / 2


Z975 = float(norm.ppf(0.975))


@dataclass
class FitResult:
    """Fitted coefficients plus everything needed to evaluate and serialize them."""

    method: str
    alpha: np.ndarray
    beta: np.ndarray
    gammas: tuple
    basis_tau: SieveBasis
    basis_lambda: SieveBasis | None
    covariance: np.ndarray
    horizon: float
    covariates: tuple
    n: int
    n1: int
    n0: int
    gcv: float = math.nan
    bandwidths: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    system: DesignSystem | None = field(default=None, repr=False, compare=False)
    solution: Solution | None = field(default=None, repr=False, compare=False)

    @property
    def r1(self):
        return len(self.alpha)

    def tau(self, x):
        return eval_basis(self.basis_tau, x) @ self.alpha

    def lam(self, x):
        if self.basis_lambda is None:
            return np.full(np.atleast_2d(x).shape[0], np.nan)
        return eval_basis(self.basis_lambda, x) @ self.beta

    def _contrast(self, x, target):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        k = self.covariance.shape[0]
        c = np.zeros((x.shape[0], k))
        if target == "tau":
            c[:, :self.r1] = eval_basis(self.basis_tau, x)
        elif target == "lambda":
            if self.basis_lambda is None:
                return None
            c[:, self.r1:] = eval_basis(self.basis_lambda, x)
        else:
            raise InvalidInputError("target must be 'tau' or 'lambda'")
        return c

    def se(self, x, target="tau"):
        c = self._contrast(x, target)
        if c is None:
            return np.full(np.atleast_2d(x).shape[0], np.nan)
        var = np.einsum("ij,jk,ik->i", c, self.covariance, c)
        return np.sqrt(np.maximum(var, 0.0))

    def ci(self, x, level=0.95):
        z = Z975 if level == 0.95 else float(norm.ppf(0.5 + level / 2))
        est, se = self.tau(x), self.se(x)
        return est - z * se, est + z * se

    def to_dict(self):
        return {
            "format": "survfuse-fit",
            "version": FORMAT_VERSION,
            "method": self.method,
            "horizon": self.horizon,
            "covariates": list(self.covariates),
            "n": self.n, "n1": self.n1, "n0": self.n0,
            "gammas": list(self.gammas),
            "gcv": self.gcv,
            "basis_tau": self.basis_tau.to_dict(),
            "basis_lambda": None if self.basis_lambda is None else self.basis_lambda.to_dict(),
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "covariance": self.covariance.tolist(),
            "bandwidths": {str(k): np.asarray(v).tolist() for k, v in self.bandwidths.items()},
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "survfuse-fit":
            raise InvalidInputError("not a fit-result file")
        if d.get("version") != FORMAT_VERSION:
            raise InvalidInputError(f"unsupported fit-result version {d.get('version')!r}")
        return cls(
            method=d["method"], alpha=np.array(d["alpha"], dtype=float),
            beta=np.array(d["beta"], dtype=float), gammas=tuple(d["gammas"]),
            basis_tau=SieveBasis.from_dict(d["basis_tau"]),
            basis_lambda=None if d["basis_lambda"] is None else SieveBasis.from_dict(d["basis_lambda"]),
            covariance=np.array(d["covariance"], dtype=float), horizon=float(d["horizon"]),
            covariates=tuple(d["covariates"]), n=d["n"], n1=d["n1"], n0=d["n0"],
            gcv=float(d["gcv"]),
            bandwidths={int(k): np.array(v) for k, v in d["bandwidths"].items()},
            notes=list(d["notes"]))

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise InvalidInputError(f"cannot read fit result {path}: {exc}") from None


def pointwise_se(fit: FitResult, x0, target="tau"):
    return fit.se(np.reshape(x0, (1, -1)), target)[0]


def confidence_interval(fit: FitResult, x0, level=0.95):
    lo, hi = fit.ci(np.reshape(x0, (1, -1)), level)
    return float(lo[0]), float(hi[0])


GRID_STATS = ("tau_hat", "se_tau", "ci_lo", "ci_hi", "lambda_hat", "se_lambda")


def grid_table(fit: FitResult, points):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    lo, hi = fit.ci(points)
    return np.column_stack([points, fit.tau(points), fit.se(points), lo, hi,
                            fit.lam(points), fit.se(points, "lambda")])


def write_grid(fit: FitResult, points, path):
    table = grid_table(fit, points)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(list(fit.covariates) + list(GRID_STATS)) + "\n")
        for row in table:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


# --------------------------------------------------------------------- pipeline

def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except SurvfuseError as exc:
        raise StageError(name, exc) from exc
    except np.linalg.LinAlgError as exc:
        raise StageError(name, NumericalError(str(exc))) from exc


@dataclass
class BasisSetup:
    names: tuple
    columns: list
    basis: SieveBasis
    penalty: np.ndarray
    m: int

    def x(self, data: Dataset):
        return data.x[:, self.columns]


def basis_setup(data: Dataset, cfg: FitConfig) -> BasisSetup:
    """Spline basis on the pooled covariate range of ``data``."""
    names = tuple(cfg.basis_covariates) if cfg.basis_covariates else data.covariates
    cols = [data.covariate_index(c) for c in names]
    x = data.x[:, cols]
    if data.n == 0:
        raise InvalidInputError("empty dataset")
    k = cfg.knots if cfg.knots is not None else default_interior_knots(data.n, len(cols), cfg.m)
    basis = build_basis(pooled_domain(x), k, cfg.degree)
    return BasisSetup(names, cols, basis, penalty_matrix(basis, cfg.m).matrix, cfg.m)


def _clone_basis(b: SieveBasis):
    return SieveBasis.from_dict(b.to_dict())


def fit_penalized(x, s, d, setup: BasisSetup, cfg: FitConfig, two_blocks: bool):
    """Pilot unweighted fit, kernel variance weights, final weighted fit, sandwich.

    Returns ``(system, solution, gcv_result, sigma2_final, weights, notes,
    lambda_basis)`` with ``sigma2_final`` in input row order.
    """
    basis_l = _clone_basis(setup.basis) if two_blocks else None
    P2 = setup.penalty if two_blocks else None
    p = setup.basis.p
    grid_kw = dict(m=setup.m, p=p, size=cfg.gamma_grid, span=tuple(cfg.gamma_range))
    binary = binary_columns(x) if x.shape[0] else None

    def pilot():
        sys0 = assemble(x, s, d, np.ones(len(d)), setup.basis, basis_l, setup.penalty, P2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            g = gcv_select(sys0, **grid_kw)
        sol0 = solve(sys0, g.gammas)
        resid = np.empty(len(d))
        resid[sys0.order] = sys0.d - sys0.A @ sol0.theta
        return resid

    resid0 = _stage("pilot fit", pilot)
    vw = _stage("variance weights", fit_variance_weights, x, s, resid0, binary)
    h = vw.weights / np.mean(vw.weights)

    sys = _stage("final fit", assemble, x, s, d, h, setup.basis, basis_l, setup.penalty, P2)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        g = _stage("tuning", gcv_select, sys, **grid_kw)
    notes = list(vw.diagnostics) + [str(w.message) for w in caught]
    sol = _stage("final fit", solve, sys, g.gammas)

    resid = np.empty(len(d))
    resid[sys.order] = sys.d - sys.A @ sol.theta

    def final_variance():
        out = np.empty(len(d))
        for src, bw in vw.bandwidths.items():
            idx = np.flatnonzero(np.asarray(s) == src)
            est = estimate_sigma2(x[idx], resid[idx], bw, binary)
            out[idx] = est(x[idx])
        return out

    sigma2 = _stage("variance", final_variance)
    return sys, sol, g, sigma2, vw, notes, basis_l


def _result(method, sys, sol, g, sigma2, vw, notes, basis_l, setup, cfg, data_n, n1, n0):
    alpha, beta = sol.split(sys.r1)
    V = sandwich(sys, sol, sigma2[sys.order])
    gsum = sum(sol.gammas)
    if data_n * gsum > 1:
        notes = notes + [f"n(gamma_1 + gamma_0) = {data_n * gsum:.3g} > 1: intervals may be "
                         "affected by smoothing bias"]
    return FitResult(method=method, alpha=alpha, beta=beta, gammas=sol.gammas,
                     basis_tau=setup.basis, basis_lambda=basis_l, covariance=V,
                     horizon=float(cfg.horizon), covariates=setup.names, n=data_n, n1=n1, n0=n0,
                     gcv=g.score, bandwidths=dict(vw.bandwidths), notes=notes,
                     system=sys, solution=sol)


def _trial_outcomes(data: Dataset, cfg: FitConfig):
    L = cfg.horizon
    spec = DesignSpec(cfg.interactions)
    trial = data.source(1)
    gT, gC = _stage("nuisance", fit_nuisance_pair, trial, L, spec)
    e = _stage("propensity", fit_propensity, trial.x, trial.a, cfg.known_propensity)
    return _stage("pseudo-outcomes", d_hat_all, data, gT, gC, e, L)


def fit_integrative(data: Dataset, cfg: FitConfig | None = None, setup: BasisSetup | None = None) -> FitResult:
    """Joint fit of ``tau`` and ``lambda`` on trial plus real-world records.

    Without real-world records this is exactly :func:`fit_rct_only`.
    """
    cfg = (cfg or FitConfig()).validate()
    if data.n1 == 0:
        raise StageError("input", InvalidInputError("no trial records"))
    setup = setup or _stage("basis", basis_setup, data, cfg)
    if data.n0 == 0:
        res = fit_rct_only(data, cfg, setup)
        res.method = "integrative"
        return res
    pseudo = _trial_outcomes(data, cfg)
    x = setup.x(data)
    parts = fit_penalized(x, data.s, pseudo.d_hat, setup, cfg, two_blocks=True)
    return _result("integrative", *parts, setup, cfg, data.n, data.n1, data.n0)


def fit_rct_only(data: Dataset, cfg: FitConfig | None = None, setup: BasisSetup | None = None) -> FitResult:
    """``tau`` from the trial records alone, on the same pooled basis."""
    cfg = (cfg or FitConfig()).validate()
    if data.n1 == 0:
        raise StageError("input", InvalidInputError("no trial records"))
    setup = setup or _stage("basis", basis_setup, data, cfg)
    trial = data.source(1)
    pseudo = _trial_outcomes(trial, cfg)
    parts = fit_penalized(setup.x(trial), trial.s, pseudo.d_hat, setup, cfg, two_blocks=False)
    return _result("rct", *parts, setup, cfg, trial.n, trial.n, 0)


def fit_rwd_only(data: Dataset, cfg: FitConfig | None = None, setup: BasisSetup | None = None) -> FitResult:
    """Real-world-only comparator.

    Treats the real-world records as if they were a trial: Cox nuisance
    models and a logistic propensity fitted on them give a pseudo effect for
    every record.  Unmeasured confounding makes this estimator biased; it is
    a baseline, not a recommendation.
    """
    cfg = (cfg or FitConfig()).validate()
    if data.n0 == 0:
        raise StageError("input", InvalidInputError("no real-world records"))
    setup = setup or _stage("basis", basis_setup, data, cfg)
    rwd = data.source(0)
    L = cfg.horizon
    gT, gC = _stage("nuisance", fit_nuisance_pair, rwd, L, DesignSpec(cfg.interactions))
    e = _stage("propensity", fit_propensity, rwd.x, rwd.a)
    y_L, dt = rwd.restricted(L)
    r, *_ = _stage("pseudo-outcomes", trial_pseudo_ite, rwd.x, rwd.a, y_L, dt, gT, gC, e, L)
    # single-block solve; the source label only orders rows
    s = np.ones(rwd.n, dtype=int)
    parts = fit_penalized(setup.x(rwd), s, r, setup, cfg, two_blocks=False)
    return _result("rwd", *parts, setup, cfg, rwd.n, 0, rwd.n)


FITTERS = {"integrative": fit_integrative, "rct": fit_rct_only, "rwd": fit_rwd_only}


# ------------------------------------------------------------------ certificate

@dataclass
class EfficiencyCertificate:
    """Precision gain of the joint fit over the trial-only fit for ``alpha``.

    ``difference`` is ``Sigma_int^{-1} - Sigma_rct^{-1}``; the certificate
    passes when its smallest eigenvalue is at least ``-tol``.
    """

    difference: np.ndarray
    min_eigenvalue: float
    sigma_int: np.ndarray
    sigma_rct: np.ndarray
    tol: float = 1e-8
    notes: list = field(default_factory=list)

    @property
    def passed(self):
        return self.min_eigenvalue >= -self.tol

    def variance_gap(self, phi):
        """``Var_int - Var_rct`` of ``phi(x)' alpha`` at each row of ``phi``."""
        phi = np.atleast_2d(phi)
        v_int = np.einsum("ij,jk,ik->i", phi, self.sigma_int, phi)
        v_rct = np.einsum("ij,jk,ik->i", phi, self.sigma_rct, phi)
        return v_int - v_rct


def efficiency_certificate(sys: DesignSystem, gammas=(0.0, 0.0), tol=1e-8) -> EfficiencyCertificate:
    """Check ``A21'H2A21 - A21'H2A2 (A2'H2A2)^+ A2'H2A21 >= 0``.

    ``A21`` and ``A2`` are the real-world rows of the ``Phi`` and ``Psi``
    blocks.  The trial-only precision is ``A1'H1A1 + n gamma_1 P1``; the joint
    precision adds the difference matrix.
    """
    r1, n1 = sys.r1, sys.n1
    A1, h1 = sys.A[:n1, :r1], sys.h[:n1]
    base = A1.T @ (h1[:, None] * A1) + sys.n * gammas[0] * sys.P1
    notes = []
    if sys.n0 == 0 or sys.r0 == 0:
        diff = np.zeros((r1, r1))
    else:
        root = np.sqrt(sys.h[n1:])[:, None]
        C, B = root * sys.A[n1:, :r1], root * sys.A[n1:, r1:]
        # the difference is R'R with R the part of C outside range(B); forming
        # it this way avoids cancelling two large Gram matrices
        U, sv, _ = np.linalg.svd(B, full_matrices=False)
        rank = int(np.sum(sv > sv[0] * max(B.shape) * np.finfo(float).eps)) if sv.size else 0
        if rank < B.shape[1]:
            notes.append("A2'H2A2 is singular; projected onto its range (pseudo-inverse)")
        U = U[:, :rank]
        R = C - U @ (U.T @ C)
        diff = R.T @ R
    min_eig = float(np.linalg.eigvalsh(diff)[0]) if diff.size else 0.0
    inv = lambda M: np.linalg.pinv((M + M.T) / 2, hermitian=True)
    return EfficiencyCertificate(diff, min_eig, inv(base + diff), inv(base), tol, notes)
