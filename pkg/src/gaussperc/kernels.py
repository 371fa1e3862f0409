"""Isotropic covariance kernels and their auxiliary representations.

Three families are built in:

* ``cauchy``  -- ``K(r) = (1 + r^2)^(-alpha/2)``, smooth, ``K(0) = 1``.
* ``riesz``   -- ``K(r) = r^(-alpha)``, singular at the origin; only usable
  for capacity computations.
* ``log``     -- ``K = q * q`` for a unimodal radial ``q`` with tail
  ``x^-1 (log x)^(-(gamma+1)/2)``, normalised so that
  ``K(r) (log r)^gamma -> 1``.

Kernel config block grammar (INI section ``[kernel]``)::

    family      = cauchy | riesz | log
    alpha       = <float>          ; cauchy, riesz
    gamma       = <float>          ; log
    dim         = <int>            ; default 2
    join_radius = <float>          ; log, default 2.0
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np
from scipy import integrate, interpolate, special

from ._validation import DomainError, NumericError, check_in_open_interval

FAMILIES = ("cauchy", "riesz", "log", "custom")


@dataclass(frozen=True)
class Kernel:
    """Immutable isotropic covariance ``K(|x|)``.

    ``evaluator`` maps an array of distances to kernel values. ``k0`` is
    ``None`` for kernels that are singular at the origin.
    """

    family: str
    alpha: float
    dim: int
    evaluator: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False)
    k0: Optional[float] = 1.0
    gamma: Optional[float] = None
    metadata: Mapping[str, float] = field(default_factory=dict, compare=False)

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if np.any(r < 0):
            raise DomainError("kernel evaluated at a negative distance")
        if self.k0 is None and np.any(r == 0):
            raise DomainError(f"{self.family} kernel is singular at r = 0")
        return self.evaluator(r)

    @property
    def samplable(self) -> bool:
        return self.k0 is not None

    @property
    def power_law(self) -> bool:
        """True when the kernel is an exact power ``r^-alpha``."""
        return self.family == "riesz"

    @property
    def ident(self) -> str:
        if self.gamma is not None:
            return f"{self.family}(gamma={self.gamma:g},d={self.dim})"
        return f"{self.family}(alpha={self.alpha:g},d={self.dim})"

    def mixture(self) -> "ScaleMixture":
        if self.family != "cauchy":
            raise DomainError(f"no scale-mixture representation for {self.family}")
        return cauchy_mixture(self.alpha, self.dim)


@dataclass(frozen=True)
class ScaleMixture:
    """Laplace-mixture representation ``K(r) = int exp(-s r^2) v(s) ds``."""

    v: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    dim: int
    alpha: float
    # the integrand has an s^(alpha/2 - 1) singularity at 0 and decays like e^-s
    s_range: tuple = (0.0, np.inf)

    def w(self, t):
        """Time-scale weight ``c_d t^(-d-3) v(1/(4 t^2))`` with ``c_d = 1/(2 pi^(d/2))``."""
        t = np.asarray(t, dtype=float)
        c = 0.5 * np.pi ** (-self.dim / 2)
        return c * t ** (-self.dim - 3) * self.v(1.0 / (4.0 * t * t))

    @property
    def t_range(self):
        lo, hi = self.s_range
        t_lo = 0.0 if hi == np.inf else 1.0 / (2.0 * np.sqrt(hi))
        t_hi = np.inf if lo == 0 else 1.0 / (2.0 * np.sqrt(lo))
        return t_lo, t_hi


@dataclass(frozen=True)
class MovingAverageKernel:
    """Radial convolution root ``q`` with ``K = q * q`` on ``R^d``.

    ``q`` is either analytic (``profile`` set) or tabulated on a lattice by
    :func:`moving_average_from_kernel`. Values beyond ``support_radius`` are
    treated as zero.
    """

    profile: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    support_radius: float
    dim: int = 2
    normalization: float = 1.0
    kernel: Optional[Kernel] = field(default=None, repr=False, compare=False)

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        out = self.normalization * self.profile(r)
        return np.where(r <= self.support_radius, out, 0.0)

    def scaled(self, c: float) -> "MovingAverageKernel":
        return MovingAverageKernel(self.profile, self.support_radius, self.dim,
                                   self.normalization * c, self.kernel)


# --------------------------------------------------------------------------
# Cauchy and Riesz


def make_cauchy(alpha: float, dim: int = 2) -> Kernel:
    """Cauchy kernel ``(1 + r^2)^(-alpha/2)``.

    Raises
    ------
    DomainError
        If ``alpha`` is not in ``(0, dim)``.
    """
    check_in_open_interval("alpha", alpha, 0.0, dim)
    a = float(alpha)

    def evaluator(r):
        return (1.0 + r * r) ** (-a / 2.0)

    return Kernel("cauchy", a, int(dim), evaluator, k0=1.0)


def make_riesz(alpha: float, dim: int = 2) -> Kernel:
    """Riesz kernel ``r^-alpha``; capacity-only (no finite variance)."""
    check_in_open_interval("alpha", alpha, 0.0, dim)
    a = float(alpha)

    def evaluator(r):
        return r ** (-a)

    return Kernel("riesz", a, int(dim), evaluator, k0=None)


def cauchy_mixture(alpha: float, dim: int = 2) -> ScaleMixture:
    """Laplace weight ``v(s) = s^(alpha/2-1) e^-s / Gamma(alpha/2)`` of the Cauchy kernel."""
    check_in_open_interval("alpha", alpha, 0.0, dim)
    a = float(alpha)
    norm = 1.0 / special.gamma(a / 2.0)

    def v(s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = norm * s ** (a / 2.0 - 1.0) * np.exp(-s)
        return np.where(s > 0, out, 0.0)

    return ScaleMixture(v, int(dim), a)


def reconstruct_from_mixture(mixture: ScaleMixture, r: float, quad_tol: float = 1e-10) -> float:
    """Evaluate ``int_0^inf exp(-s r^2) v(s) ds`` by quadrature in ``u = log s``.

    The substitution ``s = e^u`` removes the integrable endpoint singularity
    of ``v`` at zero.
    """
    if r < 0:
        raise DomainError("r must be nonnegative")
    r2 = float(r) ** 2

    def integrand(u):
        s = np.exp(u)
        return np.exp(-s * r2) * mixture.v(s) * s

    # exp(-s) kills the integrand well before u = 6; the lower tail behaves
    # like exp(u alpha/2), so u = -80 / alpha is far below double precision
    lo = -max(60.0, 80.0 / max(mixture.alpha, 1e-3))
    val, err = integrate.quad(integrand, lo, 8.0, epsabs=quad_tol / 10, epsrel=1e-13,
                              limit=500, points=[0.0])
    if not np.isfinite(val) or err > quad_tol:
        raise NumericError(f"mixture quadrature did not converge (residual {err:.3g})")
    return float(val)


def slowly_varying_part(kernel: Kernel, r):
    """``r^alpha K(r)``."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise DomainError("slowly varying part needs r > 0")
    return r ** kernel.alpha * kernel(r)


# --------------------------------------------------------------------------
# Tauberian constants


def tauberian_constants(dim: int, alpha: float, gamma: float = 1.0):
    """Asymptotic constants linking the decay of ``K``, of its root ``q`` and of ``rho``.

    With ``K(x) ~ x^-alpha L(x)`` the convolution root satisfies
    ``q(x) ~ c' x^(-(d+alpha)/2) sqrt(L(x))`` and the spectral density
    ``rho(l) ~ c'' l^(alpha-d) L(1/l)``. For ``alpha = 0`` and
    ``K ~ (log x)^-gamma`` (only ``d = 2``) the pair is
    ``(sqrt(gamma/(2 pi)), 2 pi gamma)``.

    Returns
    -------
    (c_prime, c_doubleprime)
    """
    if not 0 <= alpha < dim:
        raise DomainError(f"alpha must lie in [0, {dim}), got {alpha}")
    if alpha == 0:
        if gamma is None or gamma <= 0:
            raise DomainError("gamma > 0 required when alpha = 0")
        if dim != 2:
            raise DomainError("alpha = 0 constants are only defined for dim = 2")
        return np.sqrt(gamma) / np.sqrt(2 * np.pi), 2 * np.pi * gamma
    d, a = float(dim), float(alpha)
    lg = special.gammaln
    c2 = np.exp((d / 2) * np.log(np.pi) + (d - a) * np.log(2.0) + lg((d - a) / 2) - lg(a / 2))
    c1 = np.exp(-(d / 4) * np.log(np.pi) + 0.5 * (lg((d - a) / 2) - lg(a / 2))
                + lg((d + a) / 4) - lg((d - a) / 4))
    return float(c1), float(c2)


def hankel_tauberian_factor(beta: float, nu: float) -> float:
    """``2^(1-beta) Gamma(1 - beta/2 + nu/2) / Gamma(beta/2 + nu/2)``."""
    return float(2.0 ** (1 - beta) * special.gamma(1 - beta / 2 + nu / 2)
                 / special.gamma(beta / 2 + nu / 2))


# --------------------------------------------------------------------------
# Log-correlated kernel

_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)


def _log_tail_profile(gamma: float, join_radius: float):
    """Unnormalised radial ``q`` and its C^2 cubic cap below ``join_radius``."""
    b = (gamma + 1.0) / 2.0
    J = float(join_radius)

    def tail(x):
        return 1.0 / x * np.log(x) ** (-b)

    L = np.log(J)
    t1 = -J ** -2 * L ** -b - b * J ** -2 * L ** (-b - 1)
    t2 = (2 * J ** -3 * L ** -b + 3 * b * J ** -3 * L ** (-b - 1)
          + b * (b + 1) * J ** -3 * L ** (-b - 2))
    # p(x) = a0 + a2 x^2 + a3 x^3, p'(0) = 0, matched to C^2 at J
    a3 = (t2 - t1 / J) / (3 * J)
    a2 = (t1 / J - 3 * a3 * J) / 2
    a0 = tail(J) - a2 * J ** 2 - a3 * J ** 3

    def q(x):
        x = np.asarray(x, dtype=float)
        cap = a0 + a2 * x * x + a3 * x ** 3
        safe = np.maximum(x, J)
        return np.where(x < J, cap, tail(safe))

    return q


def _graded_breaks(lo, hi, center, h0=1.0, ratio=2.0):
    pts = {lo, hi}
    if lo < center < hi:
        pts.add(center)
    for sgn in (1.0, -1.0):
        d = h0
        while True:
            p = center + sgn * d
            if p <= lo or p >= hi:
                break
            pts.add(p)
            d *= ratio
    return np.array(sorted(pts))


def _panel_nodes(breaks):
    a = breaks[:-1, None]
    b = breaks[1:, None]
    x = (a + b) / 2 + (b - a) / 2 * _GL_X
    w = (b - a) / 2 * _GL_W
    return x.ravel(), w.ravel()


def radial_self_convolution_2d(q, r: float, tail_gamma: float, join_radius: float = 2.0,
                               rho_max: float = 1e8) -> float:
    """``(q * q)(r)`` for a radial ``q`` on ``R^2``.

    Polar coordinates around the origin, composite Gauss-Legendre panels
    graded geometrically towards ``rho = 0`` and ``rho = r`` (radial) and
    towards ``theta = 0`` (angular). The region ``rho > rho_max`` is added in
    closed form using ``q(x)^2 ~ x^-2 (log x)^-(gamma+1)``.
    """
    br = np.union1d(_graded_breaks(0.0, rho_max, r), _graded_breaks(0.0, rho_max, 0.0))
    br = np.union1d(br, [join_radius])
    rho, wr = _panel_nodes(br)
    total = 0.0
    k = np.arange(40)
    for i in range(0, rho.size, 256):
        rr = rho[i:i + 256]
        t0 = 1.0 / np.maximum(rr, 1.0)
        edges = np.minimum(t0[:, None] * 2.0 ** k[None, :], np.pi)
        edges = np.concatenate([np.zeros((rr.size, 1)), edges, np.full((rr.size, 1), np.pi)], axis=1)
        a = edges[:, :-1, None]
        b = edges[:, 1:, None]
        th = (a + b) / 2 + (b - a) / 2 * _GL_X
        wt = (b - a) / 2 * _GL_W
        s = np.sqrt(np.maximum(rr[:, None, None] ** 2 + r * r
                               - 2 * rr[:, None, None] * r * np.cos(th), 0.0))
        ang = 2.0 * (q(s) * wt).sum(axis=(1, 2))
        total += float(np.sum(wr[i:i + 256] * rr * q(rr) * ang))
    tail = 2 * np.pi * np.log(rho_max) ** (-tail_gamma) / tail_gamma
    return total + tail


def make_log_kernel(gamma: float, dim: int = 2, join_radius: float = 2.0,
                    norm_radius: float = 1e4, table_size: int = 48) -> Kernel:
    """Log-correlated kernel ``K = q * q`` with ``K(r) (log r)^gamma -> 1``.

    The constant is fixed numerically so that ``K(norm_radius) (log norm_radius)^gamma = 1``;
    ``K`` is tabulated on a log-spaced radius grid at construction and
    interpolated with a monotone cubic in ``log(1 + r)``.
    """
    if not gamma > 0:
        raise DomainError(f"gamma must be > 0, got {gamma}")
    if dim != 2:
        raise DomainError("log-correlated construction is defined for dim = 2 only")
    if join_radius < 2:
        raise DomainError("join_radius must be >= 2")
    q_raw = _log_tail_profile(gamma, join_radius)

    def conv(r):
        return radial_self_convolution_2d(q_raw, r, gamma, join_radius)

    k_norm = conv(norm_radius)
    scale = k_norm * np.log(norm_radius) ** gamma
    if not np.isfinite(scale) or scale <= 0:
        raise NumericError("normalisation integral did not converge")
    r_max = 10.0 * norm_radius
    r_tab = np.concatenate([[0.0], np.geomspace(0.05, r_max, table_size - 1)])
    k_tab = np.array([conv(r) for r in r_tab]) / scale
    spline = interpolate.PchipInterpolator(np.log1p(r_tab), k_tab)
    q_norm = 1.0 / np.sqrt(scale)
    c_prime, _ = tauberian_constants(2, 0.0, gamma)

    def evaluator(r):
        r = np.asarray(r, dtype=float)
        out = spline(np.log1p(np.minimum(r, r_max)))
        far = r > r_max
        if np.any(far):
            out = np.where(far, np.log(np.maximum(r, 2.0)) ** (-gamma), out)
        return out

    meta = {"q_normalization": q_norm, "norm_radius": norm_radius,
            "join_radius": join_radius, "tauberian_c_prime": c_prime}
    kern = Kernel("log", 0.0, 2, evaluator, k0=float(k_tab[0]), gamma=float(gamma),
                  metadata=meta)
    return kern


def log_kernel_root(kernel: Kernel, support_radius: float = 1e3) -> MovingAverageKernel:
    """Analytic convolution root of a kernel built by :func:`make_log_kernel`."""
    if kernel.family != "log":
        raise DomainError("log_kernel_root needs a log-correlated kernel")
    q_raw = _log_tail_profile(kernel.gamma, kernel.metadata["join_radius"])
    return MovingAverageKernel(q_raw, support_radius, 2, kernel.metadata["q_normalization"], kernel)


# --------------------------------------------------------------------------
# config


def kernel_from_config(section: Mapping[str, str]) -> Kernel:
    """Build a kernel from a parsed ``[kernel]`` section."""
    fam = str(section.get("family", "")).strip().lower()
    dim = int(section.get("dim", 2))
    if fam == "cauchy":
        return make_cauchy(float(section["alpha"]), dim)
    if fam == "riesz":
        return make_riesz(float(section["alpha"]), dim)
    if fam in ("log", "logcorrelated"):
        return make_log_kernel(float(section["gamma"]), dim,
                               float(section.get("join_radius", 2.0)))
    raise DomainError(f"unknown kernel family {fam!r}")
