"""Energies, generalised capacities and equilibrium measures on discretised domains.

A domain is a finite set of disjoint cells (intervals along the first axis or
axis-aligned squares). Measures are piecewise constant on cells, so the
discrete energy ``w^T G w`` uses a Gram matrix ``G`` of cell-averaged kernel
values. For power kernels on 1-D cells the averages are exact; otherwise
off-diagonal entries use the midpoint rule and the diagonal is ``K(0)`` (or
the exact self-energy of a square cell for power kernels).

The minimum of the energy over the probability simplex is found with a
conditional-gradient method: pairwise (away-to-toward) steps with exact line
search, linear oracle ``argmin`` of the gradient (ties to the lowest index),
uniform start. The Frank-Wolfe gap certifies the result.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate, linalg, special
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import DomainError, NumericError, check_positive
from .kernels import Kernel

DOMAIN_KINDS = ("segment", "box", "ball", "union_of_balls", "condensed_segment", "points")


@dataclass(frozen=True)
class DiscretizedDomain:
    """Disjoint cells with centres ``centers`` (shape ``(n, dim)``).

    ``lengths`` is the side length of each cell; ``cell_dim`` is 1 for
    intervals lying on the first axis, 2 for squares in the first two axes
    and 0 for point atoms.
    """

    kind: str
    centers: np.ndarray
    lengths: np.ndarray
    cell_dim: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DOMAIN_KINDS:
            raise DomainError(f"unknown domain kind {self.kind!r}")
        if self.centers.ndim != 2 or len(self.centers) != len(self.lengths):
            raise DomainError("centers must be (n, dim) with one length per cell")

    @property
    def n(self) -> int:
        return len(self.centers)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def volumes(self) -> np.ndarray:
        return self.lengths ** self.cell_dim

    def union(self, other: "DiscretizedDomain", kind: Optional[str] = None) -> "DiscretizedDomain":
        if other.cell_dim != self.cell_dim:
            raise DomainError("cannot join domains with different cell dimension")
        return DiscretizedDomain(kind or self.kind,
                                 np.vstack([self.centers, other.centers]),
                                 np.concatenate([self.lengths, other.lengths]),
                                 self.cell_dim, {**self.params, **other.params})


@dataclass(frozen=True)
class DiscreteMeasure:
    weights: np.ndarray
    domain: DiscretizedDomain

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.domain.n,):
            raise DomainError("one weight per cell required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DomainError("weights must be nonnegative and sum to 1")

    @classmethod
    def uniform(cls, domain: DiscretizedDomain) -> "DiscreteMeasure":
        w = domain.volumes / domain.volumes.sum()
        return cls(w / w.sum(), domain)

    def cdf(self) -> np.ndarray:
        """Cumulative weights ordered by the first coordinate."""
        order = np.argsort(self.domain.centers[:, 0], kind="stable")
        return self.domain.centers[order, 0], np.cumsum(self.weights[order])


@dataclass(frozen=True)
class CapacityResult:
    capacity: float
    measure: DiscreteMeasure
    energy: float
    potential_min_on_support: float
    duality_gap: float
    upper_bound: float
    iterations: int
    converged: bool
    metadata: dict = field(default_factory=dict)

    @property
    def lower_bound(self) -> float:
        return self.capacity


# --------------------------------------------------------------------------
# domain constructors


def _segment_cells(a, b, n, dim):
    h = (b - a) / n
    c = np.zeros((n, dim))
    c[:, 0] = a + (np.arange(n) + 0.5) * h
    return c, np.full(n, h)


def segment(R: float, n: Optional[int] = None, cell_size: float = 0.25, start: float = 0.0,
            dim: int = 2) -> DiscretizedDomain:
    """``[start, start + R]`` on the first axis, split into ``n`` equal cells.

    Without ``n`` the cell count is ``ceil(R / cell_size)``.
    """
    check_positive("R", R)
    if n is None:
        n = max(2, int(math.ceil(R / cell_size - 1e-9)))
    c, h = _segment_cells(start, start + R, int(n), dim)
    return DiscretizedDomain("segment", c, h, 1, {"R": R, "n": int(n), "cell_size": R / n})


def condensed_segment(s: float, r: float, R: float, cell_size: float = 0.25,
                      dim: int = 2) -> DiscretizedDomain:
    """Grains ``i r + [0, s]`` for ``1 <= i < floor(R / r)``."""
    if not 0 <= s <= r <= R:
        raise DomainError(f"need 0 <= s <= r <= R, got s={s}, r={r}, R={R}")
    if s <= 0:
        raise DomainError("grains of zero length carry no cells")
    count = int(math.floor(R / r + 1e-12)) - 1
    if count < 1:
        raise DomainError("R / r too small: no grains")
    k = max(1, int(math.ceil(s / cell_size - 1e-9)))
    cs, ls = [], []
    for i in range(1, count + 1):
        c, h = _segment_cells(i * r, i * r + s, k, dim)
        cs.append(c)
        ls.append(h)
    return DiscretizedDomain("condensed_segment", np.vstack(cs), np.concatenate(ls), 1,
                             {"s": s, "r": r, "R": R, "segments": count, "cells_per_segment": k})


def box(sides, cell_size: float = 0.25, origin=(0.0, 0.0), dim: int = 2) -> DiscretizedDomain:
    """Axis-aligned rectangle ``origin + [0, a] x [0, b]`` split into squares."""
    a, b = sides
    nx = max(1, int(math.ceil(a / cell_size - 1e-9)))
    ny = max(1, int(math.ceil(b / cell_size - 1e-9)))
    hx, hy = a / nx, b / ny
    if not math.isclose(hx, hy, rel_tol=1e-9):
        raise DomainError("box sides must be commensurate with a square cell")
    xs = origin[0] + (np.arange(nx) + 0.5) * hx
    ys = origin[1] + (np.arange(ny) + 0.5) * hy
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    c = np.zeros((nx * ny, dim))
    c[:, 0], c[:, 1] = X.ravel(), Y.ravel()
    return DiscretizedDomain("box", c, np.full(nx * ny, hx), 2, {"sides": (a, b)})


def ball(radius: float, center=(0.0, 0.0), cell_size: float = 0.25, dim: int = 2) -> DiscretizedDomain:
    """Square cells of side ``cell_size`` whose centres lie in the closed disc."""
    check_positive("radius", radius)
    m = int(math.ceil(radius / cell_size))
    g = (np.arange(-m, m + 1)) * cell_size
    X, Y = np.meshgrid(g, g, indexing="ij")
    keep = X ** 2 + Y ** 2 <= radius ** 2 + 1e-12
    c = np.zeros((int(keep.sum()), dim))
    c[:, 0] = X[keep] + center[0]
    c[:, 1] = Y[keep] + center[1]
    return DiscretizedDomain("ball", c, np.full(len(c), float(cell_size)), 2,
                             {"radius": radius, "center": tuple(center)})


def union_of_balls(s: float, centers, cell_size: float = 0.25, dim: int = 2) -> DiscretizedDomain:
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    parts = [ball(s, c, cell_size, dim) for c in centers]
    out = parts[0]
    for p in parts[1:]:
        out = out.union(p)
    d = dict(out.params)
    d.update({"radius": s, "centers": centers.tolist()})
    return DiscretizedDomain("union_of_balls", out.centers, out.lengths, 2, d)


def points(coords) -> DiscretizedDomain:
    """Point atoms (zero-size cells); only valid for kernels finite at 0."""
    c = np.atleast_2d(np.asarray(coords, dtype=float))
    return DiscretizedDomain("points", c, np.zeros(len(c)), 0, {})


# --------------------------------------------------------------------------
# Gram matrices


def _interval_antiderivative(t, alpha):
    # G'' = |t|^-alpha, G even, G(0) = G'(0) = 0
    return np.abs(t) ** (2.0 - alpha) / ((1.0 - alpha) * (2.0 - alpha))


def _square_self_energy(alpha):
    """Mean of ``|x - y|^-alpha`` over pairs in the unit square."""
    f = lambda v, u: 4 * (1 - u) * (1 - v) * (u * u + v * v) ** (-alpha / 2)
    val, _ = integrate.dblquad(f, 0, 1, 0, 1, epsabs=1e-12, epsrel=1e-10)
    return val


def _pair_distances(a, b):
    d = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", d, d))


def gram_matrix(domain: DiscretizedDomain, kernel: Kernel) -> np.ndarray:
    """Cell-averaged kernel matrix ``G_ij = mean_{x in c_i, y in c_j} K(x - y)``."""
    c, h = domain.centers, domain.lengths
    if kernel.power_law:
        a = kernel.alpha
        if domain.cell_dim == 0:
            raise DomainError("singular kernel with point atoms: energy is infinite")
        if domain.cell_dim == 1:
            if a >= 1:
                raise DomainError("power kernel with alpha >= 1 has infinite energy on segments")
            x = c[:, 0]
            lo, hi = x - h / 2, x + h / 2
            G = (_interval_antiderivative(hi[None, :] - lo[:, None], a)
                 - _interval_antiderivative(lo[None, :] - lo[:, None], a)
                 - _interval_antiderivative(hi[None, :] - hi[:, None], a)
                 + _interval_antiderivative(lo[None, :] - hi[:, None], a))
            G /= h[:, None] * h[None, :]
            return 0.5 * (G + G.T)
        d = _pair_distances(c, c)
        np.fill_diagonal(d, 1.0)
        G = kernel(d)
        np.fill_diagonal(G, _square_self_energy(a) * h ** (-a))
        return G
    d = _pair_distances(c, c)
    G = kernel(d)
    np.fill_diagonal(G, kernel.k0)
    return G


def energy(measure: DiscreteMeasure, kernel: Kernel, gram: Optional[np.ndarray] = None) -> float:
    """``sum_ij w_i w_j Kbar(c_i, c_j)``."""
    G = gram_matrix(measure.domain, kernel) if gram is None else gram
    w = measure.weights
    return float(w @ (G @ w))


# --------------------------------------------------------------------------
# solver


def _fully_corrective(G, w, tol, budget):
    """Wolfe-style active-set correction starting from ``w``.

    Each minor cycle solves ``min y^T G_SS y, sum y = 1`` on the active set
    and moves towards ``y`` until the first weight hits zero; each major cycle
    adds the Frank-Wolfe vertex.
    """
    S = list(np.flatnonzero(w > 0))
    it = 0
    rel_gap = np.inf
    while it < budget:
        for _ in range(10 * len(G)):
            idx = np.array(S)
            Gs = G[np.ix_(idx, idx)]
            try:
                z = linalg.solve(Gs, np.ones(len(idx)), assume_a="pos")
            except (linalg.LinAlgError, ValueError):
                z = np.linalg.lstsq(Gs, np.ones(len(idx)), rcond=None)[0]
            y = z / z.sum()
            it += 1
            if np.all(y > 0):
                w[:] = 0.0
                w[idx] = y
                break
            ws = w[idx]
            neg = y <= 0
            theta = np.min(ws[neg] / (ws[neg] - y[neg]))
            ws = ws + theta * (y - ws)
            ws[ws < 1e-15] = 0.0
            w[:] = 0.0
            w[idx] = ws
            w /= w.sum()
            S = list(idx[ws > 0])
        g = G @ w
        E = float(w @ g)
        j = int(np.argmin(g))
        rel_gap = 2.0 * (E - g[j]) / E
        if rel_gap <= tol or j in S:
            break
        S.append(j)
    return w, it, rel_gap


def minimize_energy(G: np.ndarray, tol: float = 1e-6, max_iter: Optional[int] = None,
                    refresh: int = 200):
    """Minimise ``w^T G w`` over the simplex.

    Pairwise steps run for at most ``20 n`` iterations; if the gap is still
    above ``tol`` the remaining budget goes to fully-corrective active-set
    cycles, which converge quickly on the ill-conditioned Gram matrices of
    smooth kernels.

    Returns ``(w, n_iter, relative_gap, converged)``.
    """
    n = G.shape[0]
    max_iter = 200 * n if max_iter is None else int(max_iter)
    w = np.full(n, 1.0 / n)
    g = G @ w
    diag = np.diag(G)
    it = 0
    rel_gap = np.inf
    pairwise_budget = min(max_iter, 20 * n)
    while True:
        E = float(w @ g)
        if E <= 0:
            raise NumericError("non-positive energy: discretised Gram is not positive definite")
        j = int(np.argmin(g))
        # FW gap of f(w) = w^T G w is <2Gw, w - e_j>
        rel_gap = 2.0 * (E - g[j]) / E
        if rel_gap <= tol or it >= pairwise_budget:
            break
        support = np.flatnonzero(w > 0)
        k = int(support[np.argmax(g[support])])
        if k == j:
            break
        num = g[k] - g[j]
        den = diag[j] + diag[k] - 2.0 * G[j, k]
        if den <= 0:
            raise NumericError("indefinite discretised Gram matrix")
        step = min(w[k], num / den)
        w[j] += step
        w[k] -= step
        if w[k] <= 1e-300:
            w[k] = 0.0
        it += 1
        if it % refresh == 0:
            g = G @ w
        else:
            g += step * (G[:, j] - G[:, k])
    if rel_gap > tol and it < max_iter:
        w, extra, rel_gap = _fully_corrective(G, w, tol, max_iter - it)
        it += extra
    w = np.maximum(w, 0.0)
    w /= w.sum()
    g = G @ w
    E = float(w @ g)
    rel_gap = 2.0 * (E - float(g.min())) / E
    return w, it, max(rel_gap, 0.0), bool(rel_gap <= tol)


class CapacitySolver(BaseEstimator):
    """Equilibrium measure and capacity of a discretised domain.

    Parameters
    ----------
    kernel : Kernel
    tol : float
        Relative Frank-Wolfe gap at which to stop.
    max_iter : int, optional
        Defaults to ``200 * n``.

    Attributes
    ----------
    capacity_, energy_, weights_, duality_gap_, n_iter_, converged_, result_
    """

    def __init__(self, kernel: Kernel = None, tol: float = 1e-6, max_iter: Optional[int] = None):
        self.kernel = kernel
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, domain: DiscretizedDomain, y=None):
        if self.kernel is None:
            raise DomainError("CapacitySolver needs a kernel")
        check_positive("tol", self.tol)
        if domain.n < 1:
            raise DomainError("empty domain")
        G = gram_matrix(domain, self.kernel)
        w, it, gap, ok = minimize_energy(G, self.tol, self.max_iter)
        g = G @ w
        E = float(w @ g)
        cap = 1.0 / E
        supp = w > 1e-6 * w.max()
        gmin = float(g.min())
        self.domain_ = domain
        self.gram_ = G
        self.weights_ = w
        self.energy_ = E
        self.capacity_ = cap
        self.duality_gap_ = gap
        self.n_iter_ = it
        self.converged_ = ok
        # h = g / min_D g is >= 1 on D, so Cap <= ||h||^2 = E / g_min^2
        upper = E / gmin ** 2 if gmin > 0 else np.inf
        self.result_ = CapacityResult(
            capacity=cap, measure=DiscreteMeasure(w, domain), energy=E,
            potential_min_on_support=float(cap * g[supp].min()), duality_gap=gap,
            upper_bound=upper, iterations=it, converged=ok,
            metadata={"n": domain.n, "kind": domain.kind, "kernel": self.kernel.ident,
                      "cell_size": float(np.max(domain.lengths)) if domain.n else 0.0})
        return self

    def predict(self, X=None):
        """Dual potential ``Cap * sum_i w_i Kbar(x, c_i)`` at points ``X``."""
        check_is_fitted(self, "result_")
        return dual_potential(self.result_, self.kernel, X, gram=self.gram_)


def capacity(domain: DiscretizedDomain, kernel: Kernel, tol: float = 1e-6,
             max_iter: Optional[int] = None) -> CapacityResult:
    """``(min_{mu in P(D)} E(mu))^-1`` with its minimiser and a gap certificate."""
    if domain.n < 2:
        raise DomainError("capacity needs at least two cells")
    return CapacitySolver(kernel, tol, max_iter).fit(domain).result_


def _point_cell_average(x, domain, kernel):
    c, h = domain.centers, domain.lengths
    if kernel.power_law and domain.cell_dim == 1:
        a = kernel.alpha
        lo = c[None, :, 0] - h[None, :] / 2 - x[:, None, 0]
        hi = lo + h[None, :]
        perp = np.sqrt(np.sum(x[:, None, 1:] ** 2 - 2 * x[:, None, 1:] * c[None, :, 1:]
                              + c[None, :, 1:] ** 2, axis=-1))
        on_line = perp < 1e-12
        # exact on-axis average: (F(hi) - F(lo)) / h with F' = |t|^-alpha
        F = lambda t: np.sign(t) * np.abs(t) ** (1 - a) / (1 - a)
        exact = (F(hi) - F(lo)) / h[None, :]
        d = _pair_distances(x, c)
        with np.errstate(divide="ignore"):
            mid = kernel.evaluator(np.maximum(d, 1e-300))
        return np.where(on_line, exact, mid)
    d = _pair_distances(x, c)
    if kernel.power_law and np.any(d == 0):
        raise DomainError("potential of a singular kernel evaluated at a cell centre of a 2-D cell")
    return kernel(d)


def dual_potential(result: CapacityResult, kernel: Kernel, points=None,
                   gram: Optional[np.ndarray] = None) -> np.ndarray:
    """Optimal RKHS function ``h = Cap * h_mu``.

    With ``points=None`` the discrete potential ``Cap * G w`` at the cells is
    returned (equal to 1 on the support at convergence).
    """
    w = result.measure.weights
    dom = result.measure.domain
    if points is None:
        G = gram_matrix(dom, kernel) if gram is None else gram
        return result.capacity * (G @ w)
    x = np.atleast_2d(np.asarray(points, dtype=float))
    if x.shape[1] != dom.dim:
        x = np.hstack([x, np.zeros((len(x), dom.dim - x.shape[1]))])
    return result.capacity * (_point_cell_average(x, dom, kernel) @ w)


# --------------------------------------------------------------------------
# closed forms


def c_alpha(alpha: float) -> float:
    """``B((1+a)/2, (1+a)/2) cos(pi a / 2) / pi`` for ``a in [0, 1)``."""
    if not 0 <= alpha < 1:
        raise DomainError(f"c_alpha needs alpha in [0, 1), got {alpha}")
    if alpha == 0:
        return 1.0  # B(1/2, 1/2) = pi exactly
    b = (1.0 + alpha) / 2.0
    return float(special.beta(b, b) * math.cos(math.pi * alpha / 2.0) / math.pi)


def riesz_equilibrium_density(alpha: float, x):
    """Beta((1+a)/2, (1+a)/2) density; ``+inf`` at the endpoints."""
    if not 0 < alpha < 1:
        raise DomainError("alpha must lie in (0, 1)")
    x = np.asarray(x, dtype=float)
    if np.any((x < 0) | (x > 1)):
        raise DomainError("x must lie in [0, 1]")
    b = (1.0 + alpha) / 2.0
    with np.errstate(divide="ignore"):
        out = (x * (1 - x)) ** ((alpha - 1) / 2) / special.beta(b, b)
    return np.where((x == 0) | (x == 1), np.inf, out)


def kernel_integral(kernel: Kernel, upper: float = np.inf) -> float:
    """``int_0^upper K(x) dx``."""
    f = lambda t: float(kernel(np.array(t)))
    if np.isinf(upper):
        val, err = integrate.quad(f, 0, np.inf, limit=500, epsrel=1e-10)
    else:
        pts = np.geomspace(1.0, upper, 12)[:-1] if upper > 2 else None
        val, err = integrate.quad(f, 0, upper, limit=1000, epsrel=1e-11, points=pts)
    return float(val)


def capacity_asymptote(kernel: Kernel, R: float) -> float:
    """Leading-order ``Cap_K([0, R])`` as ``R -> infinity``."""
    check_positive("R", R)
    a = kernel.alpha
    if a > 1:
        if kernel.power_law:
            raise DomainError("power kernel with alpha > 1 is not integrable at 0")
        I = kernel_integral(kernel)
        if I <= 0:
            raise DomainError("integral of K over [0, inf) must be positive")
        return R / (2.0 * I)
    if a == 1:
        if kernel.power_law:
            raise DomainError("power kernel with alpha = 1 is not integrable at 0")
        return R / (2.0 * kernel_integral(kernel, R))
    return c_alpha(a) / float(kernel(np.array(R)))


def extrapolate_limit(values) -> float:
    """Aitken delta-squared limit of the last three terms of a refinement sequence.

    Falls back to the last value when the differences do not shrink
    geometrically with a common sign.
    """
    v = np.asarray(values, dtype=float)
    if len(v) < 3:
        raise DomainError("need three refinement levels")
    a, b, c = v[-3:]
    d1, d2 = b - a, c - b
    if d1 == 0 or not 0 < d2 / d1 < 1:
        return float(c)
    return float(c - d2 * d2 / (d2 - d1))


# --------------------------------------------------------------------------
# condensation and projection


@dataclass(frozen=True)
class ProjectionComparison:
    cap_balls: float
    cap_condensed: float
    ratio: float
    cap_segments: Optional[float] = None

    def __iter__(self):
        return iter((self.cap_balls, self.cap_condensed, self.ratio))


def projection_compare(s: float, centers, r: float, kernel: Kernel, cell_size: float = 0.25,
                       tol: float = 1e-6, with_segments: bool = False) -> ProjectionComparison:
    """Capacity of balls ``B(c_i, s)`` against their collinear projection ``{i r e_1 + B(s)}``.

    Centres must satisfy ``|c_i - c_j| >= |i - j| r`` and ``s < r / 2``.
    """
    C = np.atleast_2d(np.asarray(centers, dtype=float))
    n = len(C)
    if not 0 < s < r / 2:
        raise DomainError("need 0 < s < r/2")
    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(C[i] - C[j]) < (j - i) * r - 1e-9:
                raise DomainError(f"spacing violated between balls {i} and {j}")
    # cells are laid out relative to each centre, so congruent balls share geometry
    line = np.zeros_like(C)
    line[:, 0] = np.arange(n) * r
    dom_b = union_of_balls(s, C, cell_size)
    dom_p = union_of_balls(s, line, cell_size)
    solve = lambda dom: CapacitySolver(kernel, tol).fit(dom).capacity_
    cb, cp = solve(dom_b), solve(dom_p)
    cs = None
    if with_segments and n >= 1:
        segs = [segment(s, cell_size=cell_size, start=i * r) for i in range(n)]
        dom_s = segs[0]
        for sg in segs[1:]:
            dom_s = dom_s.union(sg)
        cs = solve(dom_s)
    return ProjectionComparison(cb, cp, cb / cp, cs)
