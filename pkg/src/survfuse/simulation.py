"""Synthetic trial / real-world data, true effects and Monte Carlo evaluation.

Six designs are provided.  Cases ``1``-``3`` have two standard-normal (trial)
or variance-0.5 normal (real-world) covariates and horizon 3; cases
``S1``-``S3`` add two binary covariates and use horizon 2.  In every design

* the trial assigns treatment with probability 0.5, the real-world source
  with probability ``expit(0.5 (x1 + x2 - u + 1))`` where ``u`` is an
  unmeasured covariate;
* censoring is exponential with a covariate-dependent rate and is cut off
  administratively at the study duration.

Cases ``1`` and ``S1`` use the survival function
``(1 + 0.02 t) exp(-0.1 u t - r t)``, which can exceed 1 for small ``t``;
the sampler uses ``min(1, G)``, the survival function of
``T = inf{t : G(t) <= U}``.
"""

from __future__ import annotations

import json
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import integrate
from scipy.special import expit

from .config import CASES, FitConfig
from .data import Dataset
from .errors import InvalidInputError, SurvfuseError

BISECTION_UPPER = 200.0
BISECTION_TOL = 1e-10


@dataclass(frozen=True)
class SourceDesign:
    x_sd: float
    u_dist: str | None          # "exp5", "normal" or None
    failure: str                # "case1", "cox", "s1", "s_cox"
    u_in_failure: bool
    h0c: float
    duration: float
    p_binary: tuple = ()


@dataclass(frozen=True)
class CaseDesign:
    horizon: float
    trial: SourceDesign
    rwd: SourceDesign


_R05 = math.sqrt(0.5)
DESIGNS = {
    "1": CaseDesign(3.0, SourceDesign(1.0, "exp5", "case1", True, 0.0147, 4.9),
                    SourceDesign(_R05, "exp5", "case1", True, 0.441, 4.5)),
    "2": CaseDesign(3.0, SourceDesign(1.0, None, "cox", False, 0.0184, 5.0),
                    SourceDesign(_R05, "normal", "cox", True, 0.552, 4.5)),
    "3": CaseDesign(3.0, SourceDesign(1.0, "normal", "cox", True, 0.0147, 5.2),
                    SourceDesign(_R05, "normal", "cox", True, 0.552, 4.5)),
    "S1": CaseDesign(2.0, SourceDesign(1.0, "exp5", "s1", True, 0.052, 4.5, (0.5, 0.5)),
                     SourceDesign(_R05, "exp5", "s1", True, 3.164, 3.5, (0.6, 0.4))),
    "S2": CaseDesign(2.0, SourceDesign(1.0, None, "s_cox", False, 0.055, 4.5, (0.5, 0.5)),
                     SourceDesign(_R05, "normal", "s_cox", True, 3.587, 3.5, (0.6, 0.4))),
    "S3": CaseDesign(2.0, SourceDesign(1.0, "normal", "s_cox", True, 0.02, 5.5, (0.5, 0.5)),
                     SourceDesign(_R05, "normal", "s_cox", True, 3.587, 3.5, (0.6, 0.4))),
}


@dataclass(frozen=True)
class DgpSpec:
    case: str = "1"
    n1: int = 500
    n0: int = 1000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "case", str(self.case))
        if self.case not in CASES:
            raise InvalidInputError(f"unknown case {self.case!r}; expected one of {CASES}")
        if self.n1 < 0 or self.n0 < 0:
            raise InvalidInputError("sample sizes must be >= 0")

    @property
    def design(self) -> CaseDesign:
        return DESIGNS[self.case]

    @property
    def horizon(self):
        return self.design.horizon

    @property
    def covariates(self):
        return ("x1", "x2", "x3", "x4") if self.case.startswith("S") else ("x1", "x2")


def case_design(case) -> CaseDesign:
    case = str(case)
    if case not in DESIGNS:
        raise InvalidInputError(f"unknown case {case!r}; expected one of {CASES}")
    return DESIGNS[case]


# ------------------------------------------------------------------ failure law

def _main_lp(x, a):
    return -0.2 * x[:, 0] - 0.5 * x[:, 1] + 0.4 * a * x[:, 0] + 1.3 * a * x[:, 1]


def _s_lp(x, a):
    return (-0.5 * a + (0.6 * a - 0.3) * np.exp(1.5 * x[:, 0])
            + (0.3 - 0.6 * a) * np.exp(1.5 * x[:, 1]) + 0.5 * x[:, 2] - 0.5 * x[:, 3])


def failure_rate(case, x, a):
    """Covariate part of the failure law: ``r`` in ``G = (1+0.02t) e^{-0.1ut - rt}``
    for cases 1/S1, the hazard without the unmeasured term otherwise."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    a = np.broadcast_to(np.asarray(a, dtype=float), (x.shape[0],))
    fam = case_design(case).trial.failure
    if fam in ("case1", "cox"):
        return 0.2 * np.exp(_main_lp(x, a))
    return 0.845 * np.exp(_s_lp(x, a))


def _sample_bump(rate, u, uniform):
    """``inf{t : (1 + 0.02t) exp(-(rate + 0.1u) t) <= U}`` by bisection."""
    k = rate + 0.1 * u
    target = np.log(uniform)
    lo = np.zeros_like(k)
    hi = np.full_like(k, BISECTION_UPPER)
    log_g = lambda t: np.log1p(0.02 * t) - k * t
    capped = log_g(hi) > target
    iters = int(math.ceil(math.log2(BISECTION_UPPER / BISECTION_TOL)))
    for _ in range(iters):
        mid = (lo + hi) / 2
        below = log_g(mid) <= target
        hi = np.where(below, mid, hi)
        lo = np.where(below, lo, mid)
    return np.where(capped, BISECTION_UPPER, hi)


def _check_bump_monotone():
    """``log G`` is concave in ``t``, so ``{G <= U}`` is an interval ``[t*, inf)``
    for ``U < 1``; this is what makes bisection valid."""
    t = np.linspace(0, BISECTION_UPPER, 2001)
    for k in (1e-3, 0.05, 1.0, 20.0):
        second = np.diff(np.log1p(0.02 * t) - k * t, 2)
        assert np.all(second <= 1e-12)


_check_bump_monotone()


def sample_failure(case, source, x, a, u, rng):
    src = case_design(case).trial if source == 1 else case_design(case).rwd
    rate = failure_rate(case, x, a)
    uniform = rng.uniform(size=rate.shape[0])
    uniform = np.where(uniform <= 0, np.finfo(float).tiny, uniform)
    if src.failure in ("case1", "s1"):
        return _sample_bump(rate, u, uniform)
    hazard = rate * (np.exp(u) if src.u_in_failure else 1.0)
    return -np.log(uniform) / hazard


def _sample_u(src: SourceDesign, n, rng):
    if src.u_dist == "exp5":
        return rng.exponential(scale=1 / 5.0, size=n)
    if src.u_dist == "normal":
        return rng.standard_normal(n)
    return np.zeros(n)


def censoring_rate(case, source, x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    src = case_design(case).trial if source == 1 else case_design(case).rwd
    lp = 0.5 * x[:, 0] + 0.5 * x[:, 1]
    if x.shape[1] >= 4:
        lp = lp - 0.5 * x[:, 2] - 0.5 * x[:, 3]
    return src.h0c * np.exp(lp)


def _generate_source(case, source, n, rng):
    des = case_design(case)
    src = des.trial if source == 1 else des.rwd
    x = src.x_sd * rng.standard_normal((n, 2))
    if src.p_binary:
        bins = np.column_stack([rng.uniform(size=n) < p for p in src.p_binary]).astype(float)
        x = np.hstack([x, bins])
    u = _sample_u(src, n, rng)
    if source == 1:
        a = (rng.uniform(size=n) < 0.5).astype(int)
    else:
        a = (rng.uniform(size=n) < expit(0.5 * (x[:, 0] + x[:, 1] - u + 1))).astype(int)
    t = sample_failure(case, source, x, a, u, rng)
    c = rng.exponential(size=n) / censoring_rate(case, source, x)
    y = np.minimum(np.minimum(t, c), src.duration)
    delta = ((t <= c) & (t < src.duration)).astype(int)
    return x, a, y, delta, t


def generate(spec: DgpSpec, rng: np.random.Generator | None = None) -> Dataset:
    """Trial rows followed by real-world rows for the given design."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    parts = [(_generate_source(spec.case, 1, spec.n1, rng), 1),
             (_generate_source(spec.case, 0, spec.n0, rng), 0)]
    x = np.vstack([p[0][0] for p in parts])
    return Dataset(np.concatenate([p[0][2] for p in parts]),
                   np.concatenate([p[0][3] for p in parts]), x,
                   np.concatenate([p[0][1] for p in parts]),
                   np.concatenate([np.full(p[0][0].shape[0], p[1]) for p in parts]),
                   spec.covariates)


def censoring_fraction(spec: DgpSpec, source: int, rng=None) -> float:
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    n = spec.n1 if source == 1 else spec.n0
    *_, delta, _ = _generate_source(spec.case, source, n, rng)
    return float(1 - np.mean(delta))


# ------------------------------------------------------------------ true effects

def trial_survival(case, x, a, t):
    """Trial-population survival ``P(T > t | x, a, S = 1)``, the unmeasured
    covariate integrated out.  ``x`` is one covariate vector, ``t`` an array."""
    des = case_design(case).trial
    t = np.atleast_1d(np.asarray(t, dtype=float))
    r = float(failure_rate(case, np.reshape(x, (1, -1)), a)[0])
    if des.failure in ("case1", "s1"):
        out = np.ones_like(t)
        pos = t > 0
        tt = t[pos]
        c = np.exp(np.log1p(0.02 * tt) - r * tt) * 5.0 / (5.0 + 0.1 * tt)
        xstar = (np.log1p(0.02 * tt) - r * tt) / (0.1 * tt)
        above = xstar > 0
        val = c.copy()
        xs = xstar[above]
        val[above] = -np.expm1(-5 * xs) + c[above] * np.exp(-(5 + 0.1 * tt[above]) * xs)
        out[pos] = val
        return out
    if not des.u_in_failure:
        return np.exp(-r * t)
    nodes, weights = np.polynomial.hermite_e.hermegauss(80)
    weights = weights / weights.sum()
    return np.exp(-r * np.outer(t, np.exp(nodes))) @ weights


def true_mu(case, x, a, L=None):
    """``int_0^L P(T > t | x, a, S = 1) dt`` by adaptive quadrature."""
    L = case_design(case).horizon if L is None else float(L)
    des = case_design(case).trial
    r = float(failure_rate(case, np.reshape(x, (1, -1)), a)[0])
    if des.failure == "cox" and not des.u_in_failure or des.failure == "s_cox" and not des.u_in_failure:
        return float(-np.expm1(-r * L) / r)
    if des.failure in ("cox", "s_cox"):
        # closed form in t, quadrature over the standard-normal unmeasured covariate
        f = lambda z: -np.expm1(-r * np.exp(z) * L) / (r * np.exp(z)) * np.exp(-z * z / 2)
        val, _ = integrate.quad(f, -12, 12, epsabs=1e-12, epsrel=1e-12, limit=200)
        return float(val / math.sqrt(2 * math.pi))
    val, _ = integrate.quad(lambda t: trial_survival(case, x, a, [t])[0], 0, L,
                            epsabs=1e-11, epsrel=1e-11, limit=200)
    return float(val)


def true_tau(case, x, L=None) -> float:
    """``mu_1(x) - mu_0(x)`` in the trial population."""
    return true_mu(case, x, 1, L) - true_mu(case, x, 0, L)


def true_censoring_survival(case, x, t):
    """Trial censoring survival (exponential part; the study duration exceeds the horizon)."""
    return np.exp(-float(censoring_rate(case, 1, np.reshape(x, (1, -1)))[0])
                  * np.asarray(t, dtype=float))


# ------------------------------------------------------------------ Monte Carlo

def evaluation_grid(step=0.5, lim=1.5):
    g = np.arange(-lim, lim + step / 2, step)
    return np.array([(a, b) for a in g for b in g])


def interior_mask(grid, bound=1.0):
    return np.max(np.abs(grid), axis=1) <= bound + 1e-12


def rep_rng(seed, rep):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep,)))


@dataclass
class RepResult:
    rep: int
    estimates: dict = field(default_factory=dict)   # method -> (tau, se, lo, hi)
    failures: dict = field(default_factory=dict)    # method -> message
    certificate_min_eig: float | None = None


def run_replication(spec: DgpSpec, rep: int, grid, methods, cfg: FitConfig,
                    certificate=False) -> RepResult:
    """Generate replication ``rep`` and fit every method on it."""
    from .estimator import FITTERS, basis_setup, efficiency_certificate
    data = generate(spec, rep_rng(spec.seed, rep))
    out = RepResult(rep)
    setup = basis_setup(data, cfg)
    for m in methods:
        try:
            fit = FITTERS[m](data, cfg, setup)
            lo, hi = fit.ci(grid)
            out.estimates[m] = (fit.tau(grid), fit.se(grid), lo, hi)
            if certificate and m == "integrative":
                out.certificate_min_eig = efficiency_certificate(fit.system, fit.gammas).min_eigenvalue
        except (SurvfuseError, np.linalg.LinAlgError) as exc:
            out.failures[m] = f"{type(exc).__name__}: {exc}"
    return out


def _rep_job(args):
    return run_replication(*args)


@dataclass
class McReport:
    """Per-point bias, Monte Carlo SD, mean SE and 95% coverage for each method."""

    spec: DgpSpec
    grid: np.ndarray
    tau0: np.ndarray
    reps: int
    summary: dict          # method -> dict of arrays
    estimates: dict        # method -> (n_ok, G) array of tau-hat
    failures: dict         # method -> list of (rep, message)
    certificate_min_eigs: list = field(default_factory=list)

    COLUMNS = ("x1", "x2", "method", "tau0", "bias", "sd", "mean_se", "coverage", "n_ok")

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for m, s in self.summary.items():
                for g in range(len(self.grid)):
                    vals = [repr(float(self.grid[g, 0])), repr(float(self.grid[g, 1])), m,
                            repr(float(self.tau0[g]))]
                    vals += [repr(float(s[k][g])) for k in ("bias", "sd", "mean_se", "coverage")]
                    vals.append(str(int(s["n_ok"])))
                    fh.write(",".join(vals) + "\n")

    def manifest(self, config: dict | None = None, timestamp=True):
        from . import __version__
        out = {
            "spec": asdict(self.spec),
            "reps": self.reps,
            "failures": {m: len(v) for m, v in self.failures.items()},
            "assumptions": [
                "real-world N(0, 0.5) covariates read as variance 0.5",
                "expit(x) = exp(x) / (1 + exp(x))",
                "Exp(5) read as rate 5",
            ],
            "versions": {"survfuse": __version__, "numpy": np.__version__,
                         "python": platform.python_version()},
            "config": config or {},
        }
        if timestamp:
            out["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        return out

    def write_manifest(self, path, config=None):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.manifest(config), fh, indent=1, sort_keys=True)
            fh.write("\n")


def _fsum_mean(rows):
    rows = np.asarray(rows, dtype=float)
    return np.array([math.fsum(col) / len(col) for col in rows.T]) if len(rows) else \
        np.full(rows.shape[1] if rows.ndim == 2 else 0, np.nan)


def summarize(results, grid, tau0, methods, reps, max_fail=0.02):
    results = sorted(results, key=lambda r: r.rep)
    summary, estimates, failures = {}, {}, {}
    for m in methods:
        ok = [r.estimates[m] for r in results if m in r.estimates]
        failures[m] = [(r.rep, r.failures[m]) for r in results if m in r.failures]
        if len(failures[m]) > max_fail * reps:
            raise SurvfuseError(
                f"{m}: {len(failures[m])} of {reps} replications failed "
                f"(limit {max_fail:.0%}); first: {failures[m][0][1]}")
        tau = np.array([e[0] for e in ok])
        se = np.array([e[1] for e in ok])
        cover = np.array([(e[2] <= tau0) & (tau0 <= e[3]) for e in ok], dtype=float)
        mean = _fsum_mean(tau)
        dev = (tau - mean) ** 2
        sd = np.sqrt(np.array([math.fsum(c) for c in dev.T]) / max(len(ok) - 1, 1))
        summary[m] = {"bias": mean - tau0, "sd": sd, "mean_se": _fsum_mean(se),
                      "coverage": _fsum_mean(cover), "n_ok": len(ok)}
        estimates[m] = tau
    return summary, estimates, failures


def run_monte_carlo(spec: DgpSpec, reps: int, grid=None, methods=("integrative", "rct", "rwd"),
                    cfg: FitConfig | None = None, workers: int = 1, certificate=False,
                    progress=None) -> McReport:
    """Independent replications with per-replication RNG substreams.

    Replication ``k`` uses ``SeedSequence(seed, spawn_key=(k,))``, so it can
    be rerun alone.  Aggregation sorts by replication index and uses
    compensated sums, making the report independent of completion order.
    """
    if reps < 1:
        raise InvalidInputError("reps must be >= 1")
    cfg = cfg or FitConfig(horizon=spec.horizon)
    grid = evaluation_grid() if grid is None else np.atleast_2d(np.asarray(grid, dtype=float))
    tau0 = np.array([true_tau(spec.case, np.r_[g, np.zeros(len(spec.covariates) - len(g))], cfg.horizon)
                     for g in grid])
    jobs = [(spec, k, grid, tuple(methods), cfg, certificate) for k in range(reps)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_rep_job, jobs))
    else:
        results = []
        for j in jobs:
            results.append(_rep_job(j))
            if progress:
                progress(j[1])
    summary, estimates, failures = summarize(results, grid, tau0, methods, reps)
    eigs = [r.certificate_min_eig for r in sorted(results, key=lambda r: r.rep)
            if r.certificate_min_eig is not None]
    return McReport(spec, grid, tau0, reps, summary, estimates, failures, eigs)


# ------------------------------------------------------------------ stratified driver

def stratified_fit_driver(data: Dataset, cfg: FitConfig | None = None,
                          binary=("x3", "x4"), continuous=("x1", "x2"), method="integrative"):
    """One fit per binary-covariate cell of the trial.

    Each trial cell is paired with the whole real-world sample; the bases use
    the continuous covariates only.  Returns ``{(v3, v4): FitResult}``.
    """
    from .estimator import FITTERS
    cfg = replace(cfg or FitConfig(horizon=2.0), basis_covariates=tuple(continuous))
    bidx = [data.covariate_index(b) for b in binary]
    cont = data.select_covariates(continuous)
    fits = {}
    for v3 in (0, 1):
        for v4 in (0, 1):
            cell = (data.s == 0) | ((data.x[:, bidx[0]] == v3) & (data.x[:, bidx[1]] == v4))
            fits[(v3, v4)] = FITTERS[method](cont.subset(cell), cfg)
    return fits
