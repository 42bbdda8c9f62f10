"""Tensor-product B-spline sieve bases and their roughness penalties."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .errors import InvalidInputError


@dataclass
class SieveBasis:
    """Clamped uniform B-spline basis in each dimension, combined by tensor product.

    Basis functions are enumerated in row-major order over dimensions: the
    index of ``(i_1, ..., i_p)`` is ``((i_1 * r_2) + i_2) * r_3 + ...``.
    Points outside ``domain`` are clamped onto it; ``clamped`` counts how
    many coordinates were moved.
    """

    degree: int
    domain: tuple
    n_interior: tuple
    clamped: int = field(default=0, compare=False)

    def __post_init__(self):
        self.domain = tuple((float(lo), float(hi)) for lo, hi in self.domain)
        self.n_interior = tuple(int(k) for k in self.n_interior)
        if len(self.n_interior) != len(self.domain):
            raise InvalidInputError("need one knot count per dimension")
        if self.degree < 1:
            raise InvalidInputError("degree must be >= 1")
        for lo, hi in self.domain:
            if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
                raise InvalidInputError(f"domain [{lo}, {hi}] is empty or inverted")
        if any(k < 0 for k in self.n_interior):
            raise InvalidInputError("interior knot counts must be >= 0")

    @property
    def p(self):
        return len(self.domain)

    @property
    def sizes(self):
        return tuple(k + self.degree + 1 for k in self.n_interior)

    @property
    def dim(self):
        return int(np.prod(self.sizes))

    def knots(self, d):
        """Full clamped knot vector for dimension ``d``."""
        lo, hi = self.domain[d]
        inner = np.linspace(lo, hi, self.n_interior[d] + 2)
        k = self.degree
        return np.concatenate([np.full(k, lo), inner, np.full(k, hi)])

    def to_dict(self):
        return {"degree": self.degree, "domain": [list(b) for b in self.domain],
                "n_interior": list(self.n_interior)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["degree"]), tuple(tuple(b) for b in d["domain"]),
                   tuple(d["n_interior"]))


def build_basis(domain, knots_per_dim, degree: int = 3) -> SieveBasis:
    domain = tuple(domain)
    if np.isscalar(knots_per_dim):
        knots_per_dim = (int(knots_per_dim),) * len(domain)
    return SieveBasis(degree, domain, tuple(knots_per_dim))


def default_interior_knots(n: int, p: int, m: int = 2) -> int:
    """Interior knots per dimension so that each dimension carries about
    ``ceil(n ** (1 / (2m + p))) + degree`` basis functions."""
    return max(int(math.ceil(n ** (1.0 / (2 * m + p)))) - 1, 0)


def pooled_domain(x, expand=0.01):
    """Per-column covariate range widened by ``expand`` times its length."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    lo, hi = x.min(axis=0), x.max(axis=0)
    width = np.where(hi > lo, hi - lo, 1.0)
    return tuple(zip(lo - expand * width, hi + expand * width))


def _clamp(basis: SieveBasis, x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != basis.p:
        raise InvalidInputError(f"expected {basis.p} coordinates, got {x.shape[1]}")
    lo = np.array([b[0] for b in basis.domain])
    hi = np.array([b[1] for b in basis.domain])
    out = np.clip(x, lo, hi)
    basis.clamped += int(np.sum(out != x))
    return out


def _factor_matrices(basis: SieveBasis, x):
    return [BSpline.design_matrix(x[:, d], basis.knots(d), basis.degree).toarray()
            for d in range(basis.p)]


def _row_kron(mats):
    out = mats[0]
    for m in mats[1:]:
        out = (out[:, :, None] * m[:, None, :]).reshape(out.shape[0], -1)
    return out


def eval_basis(basis: SieveBasis, x):
    """Basis values at the rows of ``x``; shape ``(n, basis.dim)``.

    A single point may be passed as a 1-d array, giving shape ``(1, dim)``.
    """
    x = _clamp(basis, x)
    return _row_kron(_factor_matrices(basis, x))


@dataclass(frozen=True)
class PenaltyMatrix:
    m: int
    matrix: np.ndarray


def _gram_1d(knots, degree, order):
    """``int B_i^(order) B_j^(order)`` over the knot span, exact by Gauss-Legendre."""
    r = len(knots) - degree - 1
    spline = BSpline(knots, np.eye(r), degree)
    if order:
        spline = spline.derivative(order)
    nodes, wts = np.polynomial.legendre.leggauss(int(math.ceil((2 * degree + 1) / 2)))
    breaks = np.unique(knots)
    a, b = breaks[:-1], breaks[1:]
    half = (b - a) / 2
    pts = ((a + b) / 2)[:, None] + half[:, None] * nodes[None, :]
    w = (half[:, None] * wts[None, :]).ravel()
    vals = spline(pts.ravel())
    return (vals * w[:, None]).T @ vals


def _compositions(m, p):
    for cut in itertools.combinations(range(m + p - 1), p - 1):
        edges = (-1,) + cut + (m + p - 1,)
        yield tuple(edges[i + 1] - edges[i] - 1 for i in range(p))


def penalty_matrix(basis: SieveBasis, m: int = 2) -> PenaltyMatrix:
    """Sum over multi-indices ``|k| = m`` of ``m!/prod(k_d!)`` times the tensor
    Gram matrix of the ``k``-th partial derivatives."""
    if m > basis.degree:
        raise InvalidInputError(f"penalty order m={m} exceeds spline degree {basis.degree}")
    if m < 0:
        raise InvalidInputError("penalty order must be >= 0")
    grams = [{j: _gram_1d(basis.knots(d), basis.degree, j) for j in range(m + 1)}
             for d in range(basis.p)]
    total = np.zeros((basis.dim, basis.dim))
    for k in _compositions(m, basis.p):
        coef = math.factorial(m) / math.prod(math.factorial(kd) for kd in k)
        term = np.ones((1, 1))
        for d, kd in enumerate(k):
            term = np.kron(term, grams[d][kd])
        total += coef * term
    return PenaltyMatrix(m, (total + total.T) / 2)
