"""Kernel estimates of the conditional variance of the fused outcome.

Each source gets its own Nadaraya-Watson smoother with a Gaussian product
kernel over the continuous covariates.  Binary covariates are handled by
exact matching: a query only borrows from training points in the same
binary cell.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

MIN_PAIRS = 20
FLOOR_FRACTION = 1e-4
_TINY = 1e-12


def binary_columns(x):
    """Boolean mask of columns whose values are all 0 or 1."""
    x = np.atleast_2d(x)
    return np.array([np.all((c == 0) | (c == 1)) for c in x.T], dtype=bool)


def _split(x, binary):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if binary is None:
        binary = np.zeros(x.shape[1], dtype=bool)
    binary = np.asarray(binary, dtype=bool)
    return x[:, ~binary], x[:, binary]


def _kernel(q_cont, q_bin, t_cont, t_bin, h):
    """Gaussian product kernel between query and training rows (no normalising constant)."""
    if q_cont.shape[1]:
        z = (q_cont[:, None, :] - t_cont[None, :, :]) / h[None, None, :]
        k = np.exp(-0.5 * np.sum(z * z, axis=2))
    else:
        k = np.ones((q_cont.shape[0], t_cont.shape[0]))
    if q_bin.shape[1]:
        k = k * np.all(q_bin[:, None, :] == t_bin[None, :, :], axis=2)
    return k


@dataclass
class Sigma2Estimate:
    """Fitted variance function for one source; call it on query rows."""

    x_cont: np.ndarray
    x_bin: np.ndarray
    resid2: np.ndarray
    bandwidth: np.ndarray
    binary: np.ndarray
    floor: float
    fallback: float
    diagnostics: list = field(default_factory=list)

    def __call__(self, x):
        q_cont, q_bin = _split(x, self.binary)
        k = _kernel(q_cont, q_bin, self.x_cont, self.x_bin, self.bandwidth)
        mass = k.sum(axis=1)
        empty = mass <= 0
        with np.errstate(invalid="ignore", divide="ignore"):
            s2 = (k @ self.resid2) / mass
        if np.any(empty):
            self.diagnostics.append(
                f"{int(empty.sum())} queries had zero kernel mass; used the sample variance")
            s2[empty] = self.fallback
        return np.maximum(s2, self.floor)


def _nw_mean(k, d):
    mass = k.sum(axis=1)
    out = np.full(k.shape[0], np.mean(d))
    ok = mass > 0
    out[ok] = (k[ok] @ d) / mass[ok]
    return out


def estimate_sigma2(x, d, bandwidth, binary=None, floor=None) -> Sigma2Estimate:
    """Nadaraya-Watson variance function for one source.

    The kernel mean ``m(x_i)`` is fitted first; the variance at ``x`` is the
    kernel-weighted average of ``(d_i - m(x_i))**2``, floored at
    ``1e-4 * var(d)`` unless ``floor`` is given.
    """
    d = np.asarray(d, dtype=float)
    x_cont, x_bin = _split(x, binary)
    if len(d) < MIN_PAIRS:
        raise InvalidInputError(f"need at least {MIN_PAIRS} pairs for variance estimation, got {len(d)}")
    h = np.asarray(bandwidth, dtype=float).reshape(-1)
    if h.shape[0] != x_cont.shape[1] or np.any(h <= 0):
        raise InvalidInputError("need one positive bandwidth per continuous covariate")
    k = _kernel(x_cont, x_bin, x_cont, x_bin, h)
    resid = d - _nw_mean(k, d)
    var_d = float(np.var(d, ddof=1))
    if floor is None:
        floor = max(FLOOR_FRACTION * var_d, _TINY)
    p = x_cont.shape[1] + x_bin.shape[1]
    return Sigma2Estimate(x_cont, x_bin, resid ** 2, h,
                          np.zeros(p, bool) if binary is None else np.asarray(binary, bool),
                          float(floor), max(var_d, floor))


@dataclass(frozen=True)
class BandwidthChoice:
    bandwidths: np.ndarray
    scale: float
    index: int
    grid: np.ndarray
    scores: np.ndarray

    @property
    def at_edge(self):
        return self.index in (0, len(self.grid) - 1)


def bandwidth_grid(size=20, lo=0.05, hi=5.0):
    return np.geomspace(lo, hi, size)


def select_bandwidth(x, d, binary=None, grid=None) -> BandwidthChoice:
    """GCV choice of a common multiplier ``c`` with per-dimension bandwidth
    ``c * sd_j``; the returned bandwidths are twice the GCV optimum.

    ``GCV(c) = n RSS / (n - tr S)^2`` for the Nadaraya-Watson mean smoother.
    Rows with identical covariates act as one design point, so the diagonal
    entry of row ``i`` is ``(number of copies of x_i) / (row kernel mass)``;
    duplicating every record then leaves the score unchanged.
    """
    d = np.asarray(d, dtype=float)
    x_cont, x_bin = _split(x, binary)
    n = len(d)
    if n < MIN_PAIRS:
        raise InvalidInputError(f"need at least {MIN_PAIRS} pairs for bandwidth selection, got {n}")
    grid = bandwidth_grid() if grid is None else np.asarray(grid, dtype=float)
    sd = np.std(x_cont, axis=0, ddof=1) if n > 1 else np.ones(x_cont.shape[1])
    sd = np.where(sd > 0, sd, 1.0)
    z = x_cont / sd
    dist2 = np.sum((z[:, None, :] - z[None, :, :]) ** 2, axis=2)
    same = (np.all(x_bin[:, None, :] == x_bin[None, :, :], axis=2)
            if x_bin.shape[1] else None)
    _, inverse, counts = np.unique(np.hstack([x_cont, x_bin]), axis=0,
                                   return_inverse=True, return_counts=True)
    copies = counts[inverse.reshape(-1)]
    scores = np.empty(len(grid))
    for j, c in enumerate(grid):
        k = np.exp(-0.5 * dist2 / c ** 2)
        if same is not None:
            k = k * same
        mass = k.sum(axis=1)
        fit = (k @ d) / mass
        tr = np.sum(copies / mass)
        rss = np.sum((d - fit) ** 2)
        scores[j] = n * rss / (n - tr) ** 2 if tr < n else np.inf
    idx = int(np.argmin(scores))
    choice = BandwidthChoice(2.0 * grid[idx] * sd, float(grid[idx]), idx, grid, scores)
    if choice.at_edge:
        warnings.warn(f"bandwidth GCV optimum at grid edge (c={grid[idx]:.3g}); grid may be too narrow",
                      RuntimeWarning, stacklevel=2)
    return choice


@dataclass
class VarianceWeights:
    """Per-subject variance estimates and the weights ``1 / sigma2``.

    ``bandwidths`` maps a source label (0 or 1) to its per-dimension bandwidths.
    """

    sigma2: np.ndarray
    bandwidths: dict
    floors: dict
    binary: np.ndarray
    diagnostics: list = field(default_factory=list)

    @property
    def weights(self):
        return 1.0 / self.sigma2


def fit_variance_weights(x, s, d, binary=None, bandwidths=None) -> VarianceWeights:
    """Estimate ``sigma2(x_i, s_i)`` for every subject, source by source.

    Bandwidths are selected by :func:`select_bandwidth` unless given as a
    mapping from source label to bandwidth vector.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    s = np.asarray(s)
    d = np.asarray(d, dtype=float)
    if binary is None:
        binary = np.zeros(x.shape[1], dtype=bool)
    sigma2 = np.empty(len(d))
    bws, floors, diag = {}, {}, []
    for src in (1, 0):
        idx = np.flatnonzero(s == src)
        if idx.size == 0:
            continue
        if bandwidths is not None and src in bandwidths:
            h = np.asarray(bandwidths[src], dtype=float)
        else:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                h = select_bandwidth(x[idx], d[idx], binary).bandwidths
            diag += [f"source {src}: {w.message}" for w in caught]
        est = estimate_sigma2(x[idx], d[idx], h, binary)
        sigma2[idx] = est(x[idx])
        diag += [f"source {src}: {m}" for m in est.diagnostics]
        bws[src], floors[src] = h, est.floor
    return VarianceWeights(sigma2, bws, floors, np.asarray(binary, bool), diag)
