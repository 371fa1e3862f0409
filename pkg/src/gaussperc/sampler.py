"""Gaussian field synthesis on regular grids.

Two exact-in-law paths share one interface (:class:`FieldSampler`):

* ``dense``    -- symmetric square root of the Gram matrix of the grid points
  (used for grids of at most ``dense_limit`` points);
* ``spectral`` -- FFT synthesis on a torus at least ``padding`` times the
  window along every axis, with the discrete spectrum clipped at zero. One
  complex FFT yields two independent fields (real and imaginary parts), so
  trials ``2p`` and ``2p + 1`` share the random stream of pair ``p``.

The covariance actually realised by either path (clipped spectrum or clipped
eigenvalues) is available through :meth:`FieldSampler.site_covariance` and is
what the Cameron-Martin tilt uses, which keeps the tilted estimator exactly
unbiased for the law that is being sampled.

Random streams: trial ``t`` (dense) or pair ``t // 2`` (spectral) draws from
``PCG64(SeedSequence(seed, spawn_key=(index,)))``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
import scipy.fft as sfft
from scipy import interpolate, linalg, signal

from ._validation import DomainError, ResourceError, check_positive
from .capacity import CapacityResult, DiscreteMeasure, minimize_energy, points as point_domain
from .kernels import Kernel, MovingAverageKernel

DEFAULT_SPACING = 0.25
MAX_TORUS_POINTS = 40_000_000


def stream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for ``(seed, index)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(index),))))


@dataclass(frozen=True)
class Grid:
    """Regular lattice ``origin + spacing * index``."""

    shape: tuple
    spacing: float = DEFAULT_SPACING
    origin: tuple = None

    def __post_init__(self):
        check_positive("spacing", self.spacing)
        shape = tuple(int(s) for s in self.shape)
        if any(s < 1 for s in shape):
            raise DomainError("grid needs at least one point per axis")
        object.__setattr__(self, "shape", shape)
        origin = (0.0,) * len(shape) if self.origin is None else tuple(float(o) for o in self.origin)
        if len(origin) != len(shape):
            raise DomainError("origin and shape dimensions differ")
        object.__setattr__(self, "origin", origin)

    @classmethod
    def from_extent(cls, extent, spacing: float = DEFAULT_SPACING, origin=None) -> "Grid":
        """Grid covering ``origin + [0, extent_i]`` with ``extent_i / spacing + 1`` points."""
        extent = np.atleast_1d(np.asarray(extent, dtype=float))
        counts = extent / spacing
        if not np.allclose(counts, np.round(counts), atol=1e-9):
            raise DomainError("extent must be an integer multiple of the spacing")
        return cls(tuple(int(round(c)) + 1 for c in counts), spacing, origin)

    @classmethod
    def centered(cls, radius: float, spacing: float = DEFAULT_SPACING, dim: int = 2) -> "Grid":
        """Square window ``[-radius, radius]^dim`` with the origin on a grid point."""
        m = radius / spacing
        if not math.isclose(m, round(m), abs_tol=1e-9):
            raise DomainError("radius must be an integer multiple of the spacing")
        m = int(round(m))
        return cls((2 * m + 1,) * dim, spacing, (-m * spacing,) * dim)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def extent(self) -> tuple:
        return tuple((s - 1) * self.spacing for s in self.shape)

    def axis(self, i: int) -> np.ndarray:
        return self.origin[i] + self.spacing * np.arange(self.shape[i])

    def coordinates(self) -> np.ndarray:
        """Array of shape ``shape + (dim,)``."""
        mesh = np.meshgrid(*[self.axis(i) for i in range(self.dim)], indexing="ij")
        return np.stack(mesh, axis=-1)

    def radius_from(self, point=None) -> np.ndarray:
        p = np.zeros(self.dim) if point is None else np.asarray(point, dtype=float)
        r2 = 0.0
        for i in range(self.dim):
            sh = [1] * self.dim
            sh[i] = -1
            r2 = r2 + ((self.axis(i) - p[i]) ** 2).reshape(sh)
        return np.sqrt(r2)

    def index_of(self, point) -> tuple:
        """Index of the grid point at ``point``; raises if not on the lattice."""
        p = np.asarray(point, dtype=float)
        idx = (p - np.asarray(self.origin)) / self.spacing
        if not np.allclose(idx, np.round(idx), atol=1e-9):
            raise DomainError(f"{tuple(p)} is not a grid point")
        idx = tuple(int(round(i)) for i in idx)
        if any(i < 0 or i >= s for i, s in zip(idx, self.shape)):
            raise DomainError(f"{tuple(p)} lies outside the grid")
        return idx

    def describe(self) -> dict:
        return {"shape": list(self.shape), "spacing": self.spacing, "origin": list(self.origin)}


@dataclass
class GridField:
    grid: Grid
    values: np.ndarray
    seed: Optional[int] = None
    trial: Optional[int] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise DomainError("values do not match the grid shape")


@dataclass
class TiltedSample:
    field: GridField
    log_weight: float
    shift_spec: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# sampler


def _torus_lags(shape, spacing):
    """Minimal-image distances on a torus of the given shape."""
    r2 = 0.0
    d = len(shape)
    for i, n in enumerate(shape):
        k = np.arange(n)
        k = np.minimum(k, n - k) * spacing
        sh = [1] * d
        sh[i] = -1
        r2 = r2 + (k ** 2).reshape(sh)
    return np.sqrt(r2)


class FieldSampler:
    """Reusable sampler of ``kernel`` restricted to ``grid``.

    Parameters
    ----------
    kernel : Kernel
    grid : Grid
    method : {"auto", "dense", "spectral"}
    padding : int
        Torus size factor for the spectral path (at least 4).
    dense_limit : int
        ``auto`` uses the dense path up to this many points.
    max_points : int
        Memory budget in torus (or Gram) entries.
    """

    def __init__(self, kernel: Kernel, grid: Grid, method: str = "auto", padding: int = 4,
                 dense_limit: int = 4096, max_points: int = MAX_TORUS_POINTS,
                 clip_tolerance: float = 1e-3):
        if not kernel.samplable:
            raise DomainError(f"{kernel.family} is a capacity-only kernel")
        if padding < 4:
            raise DomainError("padding factor must be >= 4")
        self.kernel = kernel
        self.grid = grid
        self.padding = padding
        if method == "auto":
            method = "dense" if grid.size <= dense_limit else "spectral"
        if method not in ("dense", "spectral"):
            raise DomainError(f"unknown sampling method {method!r}")
        self.method = method
        self.provenance = {"method": method, "kernel": kernel.ident, "grid": grid.describe()}
        if method == "dense":
            if grid.size ** 2 > max_points * 4:
                raise ResourceError("dense Gram exceeds the memory budget")
            X = grid.coordinates().reshape(-1, grid.dim)
            D = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(-1))
            C = kernel(D)
            lam, V = linalg.eigh(C)
            clipped = -lam[lam < 0].sum() / np.abs(lam).sum()
            lam = np.clip(lam, 0.0, None)
            self._root = (V * np.sqrt(lam)) @ V.T
            self._cov = (V * lam) @ V.T
            self.clipped_mass = float(clipped)
        else:
            tshape = tuple(sfft.next_fast_len(padding * n) for n in grid.shape)
            if int(np.prod(tshape)) > max_points:
                raise ResourceError(f"torus {tshape} exceeds the budget of {max_points} points")
            lag = _torus_lags(tshape, grid.spacing)
            S = sfft.fftn(kernel(lag)).real
            del lag
            neg = -S[S < 0].sum()
            clipped = float(neg / np.abs(S).sum())
            np.clip(S, 0.0, None, out=S)
            self._spectrum = S
            self._amp = np.sqrt(S / S.size)
            self.torus_shape = tshape
            self.clipped_mass = clipped
            self.provenance["torus"] = list(tshape)
        self.provenance["clipped_mass"] = self.clipped_mass
        if self.clipped_mass > clip_tolerance:
            self.provenance["warning"] = "negative spectral mass above clip tolerance"
            warnings.warn(f"relative clipped spectral mass {self.clipped_mass:.2e} exceeds "
                          f"{clip_tolerance:.0e}", RuntimeWarning, stacklevel=2)

    # -- draws -------------------------------------------------------------

    def _window(self, arr):
        return arr[tuple(slice(0, n) for n in self.grid.shape)]

    def _pair(self, seed, p):
        rng = stream(seed, p)
        shape = self.torus_shape
        z = np.empty(shape, dtype=complex)
        z.real = rng.standard_normal(shape)
        z.imag = rng.standard_normal(shape)
        z *= self._amp
        F = sfft.fftn(z, overwrite_x=True)
        return np.ascontiguousarray(self._window(F.real)), np.ascontiguousarray(self._window(F.imag))

    def _field(self, values, seed, t):
        return GridField(self.grid, values, seed, t, dict(self.provenance))

    def sample(self, seed: int, trial: int = 0) -> GridField:
        if self.method == "dense":
            z = stream(seed, trial).standard_normal(self.grid.size)
            return self._field((self._root @ z).reshape(self.grid.shape), seed, trial)
        a, b = self._pair(seed, trial // 2)
        return self._field(a if trial % 2 == 0 else b, seed, trial)

    def iter_trials(self, seed: int, trials: Iterable[int]) -> Iterator[GridField]:
        """Yield fields for ``trials``, reusing each spectral pair once."""
        cache = (None, None)
        for t in trials:
            if self.method == "dense":
                yield self.sample(seed, t)
                continue
            p = t // 2
            if cache[0] != p:
                cache = (p, self._pair(seed, p))
            yield self._field(cache[1][t % 2], seed, t)

    # -- realised covariance ------------------------------------------------

    def _site_indices(self, sites):
        return [self.grid.index_of(s) for s in np.atleast_2d(sites)]

    def site_covariance(self, sites) -> np.ndarray:
        """Realised covariance matrix between grid points ``sites``."""
        idx = np.array(self._site_indices(sites))
        if self.method == "dense":
            flat = np.ravel_multi_index(idx.T, self.grid.shape)
            return self._cov[np.ix_(flat, flat)]
        c = self.torus_covariance()
        diff = (idx[:, None, :] - idx[None, :, :]) % np.array(self.torus_shape)
        return c[tuple(diff[..., i] for i in range(self.grid.dim))]

    def torus_covariance(self) -> np.ndarray:
        return sfft.ifftn(self._spectrum).real

    def covariance_with(self, sites, weights) -> np.ndarray:
        """``sum_i w_i Cov(f(x), f(x_i))`` over the window."""
        idx = self._site_indices(sites)
        w = np.asarray(weights, dtype=float)
        if self.method == "dense":
            flat = np.ravel_multi_index(np.array(idx).T, self.grid.shape)
            return (self._cov[:, flat] @ w).reshape(self.grid.shape)
        W = np.zeros(self.torus_shape)
        for i, wi in zip(idx, w):
            W[i] += wi
        h = sfft.ifftn(sfft.fftn(W) * self._spectrum).real
        return np.ascontiguousarray(self._window(h))


def sample_field(kernel: Kernel, grid: Grid, seed: int, trial: int = 0, **kwargs) -> GridField:
    """One draw of the stationary field with covariance ``kernel`` on ``grid``."""
    return FieldSampler(kernel, grid, **kwargs).sample(seed, trial)


# --------------------------------------------------------------------------
# empirical covariance


class CovarianceAccumulator:
    """Streaming estimate of ``E[f(x) f(x + lag e_i)]`` averaged over translations and axes.

    Every field contributes one translation average per lag; the reported
    standard error is the spread of these averages across fields.
    """

    def __init__(self, grid: Grid, lags: Sequence[float]):
        self.grid = grid
        self.lags = np.asarray(lags, dtype=float)
        steps = self.lags / grid.spacing
        if not np.allclose(steps, np.round(steps), atol=1e-9):
            raise DomainError("lags must be multiples of the grid spacing")
        self.steps = np.round(steps).astype(int)
        if np.any(self.steps >= min(grid.shape)):
            raise DomainError("lag exceeds the grid window")
        self.n = 0
        self._sum = np.zeros(len(self.lags))
        self._sumsq = np.zeros(len(self.lags))

    def update(self, fld) -> None:
        v = fld.values if isinstance(fld, GridField) else np.asarray(fld)
        if isinstance(fld, GridField) and fld.grid != self.grid:
            raise DomainError("field grid differs from the accumulator grid")
        if v.shape != self.grid.shape:
            raise DomainError("field shape differs from the accumulator grid")
        stats = np.empty(len(self.steps))
        for j, k in enumerate(self.steps):
            acc = 0.0
            for ax in range(v.ndim):
                lo = [slice(None)] * v.ndim
                hi = [slice(None)] * v.ndim
                lo[ax] = slice(0, v.shape[ax] - k)
                hi[ax] = slice(k, None)
                acc += float(np.mean(v[tuple(lo)] * v[tuple(hi)]))
            stats[j] = acc / v.ndim
        self.n += 1
        self._sum += stats
        self._sumsq += stats ** 2

    def result(self):
        if self.n < 2:
            raise DomainError("need at least two fields")
        mean = self._sum / self.n
        var = (self._sumsq - self.n * mean ** 2) / (self.n - 1)
        return mean, np.sqrt(np.maximum(var, 0.0) / self.n)


def empirical_covariance(fields: Iterable, lags: Sequence[float], grid: Optional[Grid] = None,
                         min_samples: int = 100):
    """Covariance estimates and standard errors at ``lags`` (physical units).

    ``fields`` may be any iterable (including a generator) of :class:`GridField`.
    """
    acc = None
    for f in fields:
        if acc is None:
            acc = CovarianceAccumulator(grid or f.grid, lags)
        acc.update(f)
    if acc is None or acc.n < min_samples:
        raise DomainError(f"need at least {min_samples} independent samples")
    return acc.result()


# --------------------------------------------------------------------------
# moving averages and local-global split


def moving_average_from_kernel(kernel: Kernel, spacing: float = DEFAULT_SPACING,
                               support_radius: float = 32.0, padding: int = 4) -> MovingAverageKernel:
    """Convolution root ``q = F^-1[sqrt(F[K])]`` tabulated on a lattice.

    ``q`` is computed on a torus of side ``2 * padding * support_radius`` and
    interpolated radially along the first axis.
    """
    if not kernel.samplable:
        raise DomainError(f"{kernel.family} is a capacity-only kernel")
    n = sfft.next_fast_len(int(math.ceil(2 * padding * support_radius / spacing)))
    shape = (n,) * kernel.dim
    S = sfft.fftn(kernel(_torus_lags(shape, spacing))).real
    np.clip(S, 0.0, None, out=S)
    q = sfft.ifftn(np.sqrt(S / spacing ** kernel.dim)).real
    line = q[(slice(0, n // 2 + 1),) + (0,) * (kernel.dim - 1)]
    r = spacing * np.arange(line.size)
    prof = interpolate.PchipInterpolator(r, line, extrapolate=False)

    def profile(x):
        return np.nan_to_num(prof(np.asarray(x, dtype=float)), nan=0.0)

    return MovingAverageKernel(profile, float(support_radius), kernel.dim, 1.0, kernel)


def cutoff(x):
    """C-infinity cutoff: 1 on ``[0, 1/4]``, 0 on ``[1/2, inf)``."""
    x = np.asarray(x, dtype=float)

    def psi(t):
        out = np.zeros_like(t)
        pos = t > 0
        out[pos] = np.exp(-1.0 / t[pos])
        return out

    a = psi(0.5 - x)
    b = psi(x - 0.25)
    return a / (a + b)


def _stencil(profile, spacing, radius, dim):
    m = int(math.floor(radius / spacing + 1e-9))
    ax = spacing * np.arange(-m, m + 1)
    mesh = np.meshgrid(*([ax] * dim), indexing="ij")
    r = np.sqrt(sum(g ** 2 for g in mesh))
    return profile(r), m


def _white_noise(grid: Grid, halo: int, seed: int, trial: int):
    shape = tuple(n + 2 * halo for n in grid.shape)
    return stream(seed, trial).standard_normal(shape) * grid.spacing ** (grid.dim / 2)


def _ma_convolve(noise, stencil):
    return signal.fftconvolve(noise, stencil, mode="valid")


def sample_moving_average(ma: MovingAverageKernel, grid: Grid, seed: int, trial: int = 0) -> GridField:
    """``f = q * W`` with lattice white noise scaled by ``h^(d/2)``."""
    if not np.isfinite(ma.support_radius):
        raise DomainError("moving average needs a finite support radius")
    q, m = _stencil(ma, grid.spacing, ma.support_radius, grid.dim)
    _check_truncation(ma, q, grid.spacing)
    f = _quantize(_ma_convolve(_white_noise(grid, m, seed, trial), q))
    return GridField(grid, f, seed, trial, {"method": "moving_average",
                                            "support_radius": ma.support_radius})


def _check_truncation(ma, q, spacing):
    if ma.kernel is None or ma.kernel.k0 is None:
        return None
    kept = float(np.sum(q ** 2) * spacing ** q.ndim)
    lost = 1.0 - kept / ma.kernel.k0
    if lost > 0.01:
        warnings.warn(f"moving-average truncation discards {lost:.1%} of ||q||^2",
                      RuntimeWarning, stacklevel=3)
    return lost


def moving_average_covariance(ma: MovingAverageKernel, spacing: float, lags, dim: int = 2,
                              L: Optional[float] = None):
    """Exact covariance of the lattice moving average at axis lags (``q_L`` if ``L`` given)."""
    prof = ma if L is None else (lambda r: ma(r) * cutoff(np.asarray(r) / L))
    q, m = _stencil(prof, spacing, ma.support_radius, dim)
    out = []
    for lag in np.atleast_1d(lags):
        k = int(round(lag / spacing))
        if k > 2 * m:
            out.append(0.0)
            continue
        a = np.take(q, np.arange(0, q.shape[0] - k), axis=0)
        b = np.take(q, np.arange(k, q.shape[0]), axis=0)
        out.append(float(np.sum(a * b) * spacing ** dim))
    return np.array(out)


QUANTUM = 2.0 ** -36


def _quantize(x):
    """Round to the lattice ``QUANTUM * Z`` so sums and differences of fields are exact."""
    if np.max(np.abs(x), initial=0.0) >= 2.0 ** 15:
        raise DomainError("field values too large for exact local-global arithmetic")
    return np.round(x / QUANTUM) * QUANTUM


def local_global_split(ma: MovingAverageKernel, L: float, grid: Grid, seed: int, trial: int = 0):
    """Split ``f = q * W`` into ``f_L = q_L * W`` and ``g_L = f - f_L``.

    ``q_L = q * phi(|x| / L)`` vanishes beyond ``L / 2``, so ``f_L`` is
    ``L``-range dependent. Both parts use the same noise lattice as
    :func:`sample_moving_average`, and ``f_L + g_L``
    reproduces that output bit for bit. Both ``f`` and ``f_L`` are rounded
    pointwise to multiples of ``QUANTUM`` (2^-36), which makes the difference
    exact and leaves ``f_L`` a function of the noise within ``L / 2``.
    """
    if L < 1:
        raise DomainError("L must be >= 1")
    if min(grid.extent) < 2 * L:
        raise DomainError("grid extent must be at least 2L")
    full = sample_moving_average(ma, grid, seed, trial)
    q, m = _stencil(ma, grid.spacing, ma.support_radius, grid.dim)
    noise = _white_noise(grid, m, seed, trial)
    r = _stencil(lambda x: x, grid.spacing, ma.support_radius, grid.dim)[0]
    fL = _quantize(_ma_convolve(noise, q * cutoff(r / L)))
    gL = full.values - fL
    prov = {"method": "local_global", "L": L, "support_radius": ma.support_radius}
    return (GridField(grid, fL, seed, trial, {**prov, "part": "local"}),
            GridField(grid, gL, seed, trial, {**prov, "part": "global"}))


# --------------------------------------------------------------------------
# Cameron-Martin tilt


def shift_capacity(sampler: FieldSampler, sites, tol: float = 1e-9) -> CapacityResult:
    """Equilibrium measure of grid points ``sites`` under the realised covariance."""
    sites = np.atleast_2d(np.asarray(sites, dtype=float))
    C = sampler.site_covariance(sites)
    w, it, gap, ok = minimize_energy(C, tol)
    g = C @ w
    E = float(w @ g)
    dom = point_domain(sites)
    return CapacityResult(1.0 / E, DiscreteMeasure(w, dom), E, float(g[w > 0].min() / E), gap,
                          E / float(g.min()) ** 2, it, ok, {"n": len(sites), "kernel": "realised"})


class CameronMartinShift:
    """Deterministic shift ``direction * amplitude * Cap * h_mu`` and its log-likelihood ratio.

    For a draw ``f`` of the untilted field the tilted sample is ``f + h`` and
    ``log_weight = -direction * amplitude * Cap * sum_i w_i f(x_i) - |h|_H^2 / 2``
    with ``|h|_H^2 = amplitude^2 Cap^2 w^T C w`` under the realised covariance
    ``C`` (equal to ``amplitude^2 Cap`` when the capacity was computed with ``C``).
    """

    def __init__(self, sampler: FieldSampler, result: CapacityResult, amplitude: float,
                 direction: int = 1):
        if not result.converged:
            raise DomainError("capacity input did not converge")
        if amplitude < 0:
            raise DomainError("amplitude must be >= 0")
        if direction not in (1, -1):
            raise DomainError("direction must be +1 or -1")
        self.sampler = sampler
        self.amplitude = float(amplitude)
        self.direction = direction
        sites = result.measure.domain.centers
        w = result.measure.weights
        self.capacity = result.capacity
        self._flat = np.ravel_multi_index(np.array(sampler._site_indices(sites)).T, sampler.grid.shape)
        self._coef = self.amplitude * result.capacity * w
        if self.amplitude == 0:
            self.shift = np.zeros(sampler.grid.shape)
            self.norm2 = 0.0
        else:
            cov = sampler.covariance_with(sites, w)
            self.shift = direction * self.amplitude * result.capacity * cov
            self.norm2 = float(self._coef @ cov.ravel()[self._flat] * self.amplitude * result.capacity)
        self.spec = {"amplitude": self.amplitude, "direction": direction,
                     "capacity": result.capacity, "sites": int(len(sites)), "norm2": self.norm2}

    def apply(self, fld: GridField) -> TiltedSample:
        if self.amplitude == 0:
            return TiltedSample(fld, 0.0, self.spec)
        pairing = float(self._coef @ fld.values.ravel()[self._flat])
        logw = -self.direction * pairing - 0.5 * self.norm2
        shifted = GridField(fld.grid, fld.values + self.shift, fld.seed, fld.trial,
                            {**fld.provenance, "tilt": self.spec})
        return TiltedSample(shifted, logw, self.spec)


def cameron_martin_tilt(sampler: FieldSampler, result: CapacityResult, amplitude: float, seed: int,
                        trial: int = 0, direction: int = 1) -> TiltedSample:
    """Draw one field and shift it by ``direction * amplitude * Cap * h_mu``."""
    return CameronMartinShift(sampler, result, amplitude, direction).apply(sampler.sample(seed, trial))
