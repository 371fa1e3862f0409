"""Excursion-set connectivity, connection events and Monte Carlo estimates.

Connectivity is site percolation on the sampling lattice: grid points with
``f <= level`` are open and open points sharing a face are connected.

Event geometry (``c`` the event centre, ``a`` the box corner, ``h`` the spacing):

``arm``      open path from the site nearest ``c`` (``r_in = 0``) or from
             ``B(c, r_in)`` to a site with ``|x - c| >= R``;
``ann``      open path inside ``R <= |x - c| <= 2R`` joining its inner and
             outer boundary layers;
``ann_inf``  open path outside ``B(c, R)`` from its boundary layer to the
             edge of the window;
``cross``    left-right open crossing of ``a + [0, R]^d``;
``tube``     left-right open crossing of ``a + [0, R] x [0, R^rho]^(d-1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist

from ._unionfind import component_boxes, label_flat
from ._validation import DomainError, check_in_open_interval
from .capacity import CapacityResult
from .sampler import CameronMartinShift, FieldSampler, Grid, GridField, shift_capacity

EVENT_KINDS = ("arm", "ann", "ann_inf", "cross", "tube")
Z95 = 1.959963984540054
PAIRWISE_LIMIT = 1000
MIN_ESS = 30.0


# --------------------------------------------------------------------------
# labeling


@dataclass
class ComponentLabeling:
    """Components of the open set of a field.

    ``labels`` has the grid shape, ``-1`` on closed sites and ids
    ``0 .. count - 1`` ordered by the first site of each component in
    row-major order.
    """

    labels: np.ndarray
    count: int
    sizes: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    spacing: float = 1.0
    level: Optional[float] = None
    grid: Optional[Grid] = None
    _members: Optional[list] = field(default=None, repr=False)

    @classmethod
    def from_mask(cls, mask, spacing=1.0, level=None, grid=None) -> "ComponentLabeling":
        mask = np.ascontiguousarray(mask, dtype=bool)
        shape = np.asarray(mask.shape, dtype=np.int64)
        flat, count = label_flat(mask.ravel(), shape)
        sizes, lo, hi = component_boxes(flat, shape, count)
        return cls(flat.reshape(mask.shape), int(count), sizes, lo, hi, spacing, level, grid)

    @property
    def open(self) -> np.ndarray:
        return self.labels >= 0

    def members(self, c: int) -> np.ndarray:
        """Index coordinates ``(k, dim)`` of the sites of component ``c``."""
        if self._members is None:
            flat = self.labels.ravel()
            order = np.argsort(flat, kind="stable")
            start = np.searchsorted(flat[order], np.arange(self.count + 1))
            self._members = [order[start[i]:start[i + 1]] for i in range(self.count)]
        return np.stack(np.unravel_index(self._members[c], self.labels.shape), axis=-1)

    def box_diagonals(self) -> np.ndarray:
        """Upper bounds on the diameters (bounding box diagonals, physical units)."""
        return self.spacing * np.sqrt(((self.hi - self.lo) ** 2).sum(axis=1))

    def diameter(self, c: int) -> float:
        """Euclidean diameter of the site centres of component ``c``."""
        pts = self.members(c).astype(float)
        return self.spacing * point_set_diameter(pts)

    def diameters(self) -> np.ndarray:
        return np.array([self.diameter(c) for c in range(self.count)])


def point_set_diameter(pts) -> float:
    """Largest pairwise distance; exact pairwise up to ``PAIRWISE_LIMIT`` points, else on hull vertices."""
    pts = np.asarray(pts, dtype=float)
    if len(pts) < 2:
        return 0.0
    if len(pts) > PAIRWISE_LIMIT:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except QhullError:
            # flat point sets: joggled hull still returns genuine extreme points
            pts = pts[ConvexHull(pts, qhull_options="QJ").vertices]
    return float(pdist(pts).max())


def excursion_components(fld, level: float, mask=None, spacing: Optional[float] = None) -> ComponentLabeling:
    """Label the components of ``{f <= level}`` (optionally intersected with ``mask``)."""
    grid = fld.grid if isinstance(fld, GridField) else None
    v = fld.values if isinstance(fld, GridField) else np.asarray(fld, dtype=float)
    if spacing is None:
        spacing = grid.spacing if grid is not None else 1.0
    if not np.all(np.isfinite(v)):
        raise DomainError("field contains non-finite values")
    open_ = v <= level
    if mask is not None:
        open_ &= mask
    return ComponentLabeling.from_mask(open_, spacing, float(level), grid)


def largest_diameter(labeling: ComponentLabeling) -> float:
    """Largest component diameter, visiting components by decreasing box diagonal."""
    if labeling.count == 0:
        return 0.0
    diag = labeling.box_diagonals()
    order = np.argsort(-diag, kind="stable")
    best = 0.0
    for c in order:
        if diag[c] <= best:
            break
        best = max(best, labeling.diameter(int(c)))
    return best


# --------------------------------------------------------------------------
# events


@dataclass(frozen=True)
class EventSpec:
    """Connection event of the open set ``{f <= level}``; see the module docstring."""

    kind: str
    level: float
    R: float
    r_in: float = 0.0
    rho: float = 0.25
    center: Optional[tuple] = None
    corner: Optional[tuple] = None
    dim: int = 2

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise DomainError(f"unknown event kind {self.kind!r}")
        if not self.R > 0:
            raise DomainError("R must be positive")
        if self.kind == "arm" and not 0 <= self.r_in < self.R:
            raise DomainError("need 0 <= r_in < R")
        if self.kind == "tube" and not self.rho > 0:
            raise DomainError("rho must be positive")

    @property
    def name(self) -> str:
        if self.kind == "arm" and self.r_in > 0:
            return f"arm({self.r_in:g},{self.R:g})"
        if self.kind == "tube":
            return f"tube({self.R:g};{self.rho:g})"
        return f"{self.kind}({self.R:g})"

    def at_level(self, level: float) -> "EventSpec":
        return replace(self, level=float(level))

    def with_R(self, R: float) -> "EventSpec":
        return replace(self, R=float(R))

    def _center(self):
        return np.zeros(self.dim) if self.center is None else np.asarray(self.center, dtype=float)

    def _corner(self):
        return np.zeros(self.dim) if self.corner is None else np.asarray(self.corner, dtype=float)

    def box_sides(self):
        if self.kind == "cross":
            return np.full(self.dim, self.R)
        side = self.R ** self.rho
        return np.array([self.R] + [side] * (self.dim - 1))

    def bounds(self):
        """Physical bounding box the window has to cover."""
        if self.kind in ("cross", "tube"):
            a = self._corner()
            return a, a + self.box_sides()
        c = self._center()
        reach = 2 * self.R if self.kind == "ann" else self.R
        if self.kind == "ann_inf":
            reach = 2 * self.R
        return c - reach, c + reach

    def window(self, spacing: float) -> Grid:
        """Smallest lattice window with spacing ``spacing`` covering the event."""
        lo, hi = self.bounds()
        lo = np.floor(lo / spacing + 1e-9) * spacing
        hi = np.ceil(hi / spacing - 1e-9) * spacing
        counts = np.round((hi - lo) / spacing).astype(int) + 1
        return Grid(tuple(counts), spacing, tuple(lo))


def _grid_box(grid: Grid, lo, hi):
    """Index slices of the grid points inside ``[lo, hi]``."""
    sl = []
    for i in range(grid.dim):
        a = int(math.ceil((lo[i] - grid.origin[i]) / grid.spacing - 1e-9))
        b = int(math.floor((hi[i] - grid.origin[i]) / grid.spacing + 1e-9))
        if a < 0 or b >= grid.shape[i] or b < a:
            raise DomainError("event geometry does not fit in the grid window")
        sl.append(slice(a, b + 1))
    return tuple(sl)


def _neighbour_any(pred):
    """Sites with at least one face neighbour where ``pred`` holds (off-grid counts as False)."""
    out = np.zeros_like(pred)
    for ax in range(pred.ndim):
        lo = [slice(None)] * pred.ndim
        hi = [slice(None)] * pred.ndim
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        out[tuple(lo)] |= pred[tuple(hi)]
        out[tuple(hi)] |= pred[tuple(lo)]
    return out


def _edge(shape):
    e = np.zeros(shape, dtype=bool)
    for ax in range(len(shape)):
        for k in (0, shape[ax] - 1):
            sl = [slice(None)] * len(shape)
            sl[ax] = k
            e[tuple(sl)] = True
    return e


class EventDetector:
    """Precomputed geometry of ``spec`` on ``grid``; evaluates the event at any level."""

    def __init__(self, spec: EventSpec, grid: Grid):
        if spec.dim != grid.dim:
            raise DomainError("event and grid dimensions differ")
        self.spec = spec
        self.grid = grid
        lo, hi = spec.bounds()
        h = grid.spacing
        if spec.kind in ("cross", "tube"):
            self.box = _grid_box(grid, lo, hi)
            shape = tuple(s.stop - s.start for s in self.box)
            self.region = None
            self.source = np.zeros(shape, dtype=bool)
            self.sink = np.zeros(shape, dtype=bool)
            self.source[0] = True
            self.sink[-1] = True
            return
        if spec.kind == "ann_inf":
            _grid_box(grid, lo, hi)
            self.box = tuple(slice(0, n) for n in grid.shape)
        else:
            self.box = _grid_box(grid, lo, hi)
            # one extra layer so the outer boundary of the ball is available
            self.box = tuple(slice(max(s.start - 1, 0), min(s.stop + 1, n))
                             for s, n in zip(self.box, grid.shape))
        c = spec._center()
        sub = Grid(tuple(s.stop - s.start for s in self.box), h,
                   tuple(grid.origin[i] + self.box[i].start * h for i in range(grid.dim)))
        r = sub.radius_from(c)
        tol = 1e-9 * h
        if spec.kind == "arm":
            inner = r < spec.R - tol
            self.sink = (r >= spec.R - tol) & _neighbour_any(inner)
            self.region = inner | self.sink
            if spec.r_in == 0:
                self.source = np.zeros(r.shape, dtype=bool)
                self.source[np.unravel_index(np.argmin(r), r.shape)] = True
            else:
                self.source = r <= spec.r_in + tol
        elif spec.kind == "ann":
            self.region = (r >= spec.R - tol) & (r <= 2 * spec.R + tol)
            self.source = self.region & _neighbour_any(r < spec.R - tol)
            self.sink = self.region & (_neighbour_any(r > 2 * spec.R + tol) | _edge(r.shape))
        else:
            self.region = r >= spec.R - tol
            self.source = self.region & _neighbour_any(r < spec.R - tol)
            self.sink = self.region & _edge(r.shape)
        self._src_idx = np.flatnonzero(self.source)

    def _open(self, values, level):
        v = values[self.box]
        op = v <= level
        if self.region is not None:
            op &= self.region
        return op

    def from_open(self, op) -> bool:
        if self.spec.kind == "arm" and self.spec.r_in == 0 and not op.ravel()[self._src_idx[0]]:
            return False
        if not (op & self.source).any() or not (op & self.sink).any():
            return False
        lab = ComponentLabeling.from_mask(op, self.grid.spacing).labels
        a = np.unique(lab[self.source & op])
        b = np.unique(lab[self.sink & op])
        return bool(np.intersect1d(a, b, assume_unique=True).size)

    def __call__(self, values, level: Optional[float] = None) -> bool:
        v = values.values if isinstance(values, GridField) else values
        return self.from_open(self._open(v, self.spec.level if level is None else level))


def detect_event(labeling: ComponentLabeling, spec: EventSpec, grid: Optional[Grid] = None) -> bool:
    """Whether one component of ``labeling`` (restricted to the event region) meets both terminal sets."""
    grid = grid or labeling.grid
    if grid is None:
        raise DomainError("labeling carries no grid; pass grid explicitly")
    if labeling.level is not None and labeling.level != spec.level:
        raise DomainError("labeling level differs from the event level")
    det = EventDetector(spec, grid)
    op = labeling.open[det.box]
    if det.region is not None:
        op = op & det.region
    return det.from_open(op)


def ball_mask(grid: Grid, R: float, center=None) -> np.ndarray:
    return grid.radius_from(center) <= R + 1e-9 * grid.spacing


def ball_diameter(fld: GridField, level: float, R: float, center=None) -> float:
    """``D_{R, level}``: largest component diameter of ``{f <= level}`` inside ``B(center, R)``."""
    lo = (np.zeros(fld.grid.dim) if center is None else np.asarray(center)) - R
    box = _grid_box(fld.grid, lo, lo + 2 * R)
    sub = Grid(tuple(s.stop - s.start for s in box), fld.grid.spacing,
               tuple(fld.grid.origin[i] + box[i].start * fld.grid.spacing for i in range(fld.grid.dim)))
    v = fld.values[box]
    return largest_diameter(excursion_components(v, level, ball_mask(sub, R, center), sub.spacing))


# --------------------------------------------------------------------------
# estimates


@dataclass(frozen=True)
class Estimate:
    event: EventSpec
    method: str
    trials: int
    hits: float
    p_hat: float
    se: float
    ci_lo: float
    ci_hi: float
    ess: float
    seed: int
    reliable: bool = True
    metadata: dict = field(default_factory=dict)

    @property
    def ci95(self):
        return self.ci_lo, self.ci_hi

    @property
    def rel_se(self) -> float:
        return self.se / self.p_hat if self.p_hat > 0 else math.inf


def wilson_interval(k: float, n: int, z: float = Z95):
    p = k / n
    denom = 1 + z * z / n
    mid = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    # the bounds at k = 0 and k = n are exactly 0 and 1; avoid rounding residue
    lo = 0.0 if k <= 0 else max(0.0, mid - half)
    hi = 1.0 if k >= n else min(1.0, mid + half)
    return lo, hi


def _summarise(event, method, values, seed, n, weights=None, **meta):
    """Mean, standard error and interval of per-trial contributions ``values``."""
    hits = math.fsum(values)
    p = hits / n
    m2 = math.fsum(v * v for v in values) / n
    se = math.sqrt(max(m2 - p * p, 0.0) / n)
    if method == "naive":
        lo, hi = wilson_interval(hits, n)
        return Estimate(event, method, n, hits, p, se, lo, hi, float(n), seed, True, meta)
    pos = [v for v in values if v > 0]
    ess = math.fsum(pos) ** 2 / math.fsum(v * v for v in pos) if pos else 0.0
    lo, hi = max(0.0, p - Z95 * se), p + Z95 * se
    return Estimate(event, method, n, hits, p, se, lo, hi, ess, seed, ess >= MIN_ESS, meta)


def _check_trials(trials):
    if trials < 100:
        raise DomainError("at least 100 trials are required")


def mc_estimates(sampler: FieldSampler, specs: Sequence[EventSpec], trials: int, seed: int,
                 first_trial: int = 0) -> list:
    """Naive estimates of several events from the same fields (coupled)."""
    _check_trials(trials)
    dets = [EventDetector(s, sampler.grid) for s in specs]
    hits = np.zeros((len(specs), trials))
    for t, fld in enumerate(sampler.iter_trials(seed, range(first_trial, first_trial + trials))):
        for j, det in enumerate(dets):
            hits[j, t] = det(fld.values)
    meta = {"sampling": sampler.provenance["method"], "spacing": sampler.grid.spacing}
    return [_summarise(s, "naive", list(hits[j]), seed, trials, **meta) for j, s in enumerate(specs)]


def mc_estimate(kernel, grid: Optional[Grid], spec: EventSpec, trials: int, seed: int,
                sampler: Optional[FieldSampler] = None) -> Estimate:
    """Naive Monte Carlo estimate of ``P[spec]`` with a Wilson 95% interval.

    ``grid`` defaults to the event window at spacing 0.25.
    """
    if sampler is None:
        sampler = FieldSampler(kernel, grid or spec.window(0.25))
    return mc_estimates(sampler, [spec], trials, seed)[0]


def default_shift_sites(spec: EventSpec, grid: Grid) -> np.ndarray:
    """Grid points on the straight segment joining the event's terminal sets."""
    h = grid.spacing
    e = np.zeros(grid.dim)
    e[0] = 1.0
    if spec.kind in ("cross", "tube"):
        a = spec._corner().copy()
        sides = spec.box_sides()
        for i in range(1, grid.dim):
            a[i] += h * round(sides[i] / 2 / h)
        t0, t1 = 0.0, spec.R
    else:
        a = spec._center()
        t0 = {"arm": spec.r_in, "ann": spec.R, "ann_inf": spec.R}[spec.kind]
        t1 = {"arm": spec.R, "ann": 2 * spec.R, "ann_inf": grid.origin[0] + grid.extent[0] - a[0]}[spec.kind]
    k0 = int(math.ceil(t0 / h - 1e-9))
    k1 = int(math.floor(t1 / h + 1e-9))
    pts = a + h * np.arange(k0, k1 + 1)[:, None] * e
    # snap onto the lattice
    idx = np.round((pts - np.asarray(grid.origin)) / h)
    return np.asarray(grid.origin) + h * idx


def is_estimate(kernel, grid: Optional[Grid], spec: EventSpec, trials: int, seed: int,
                shift_domain=None, target_level: float = 0.0, amplitude: Optional[float] = None,
                sampler: Optional[FieldSampler] = None) -> Estimate:
    """Importance-sampled estimate of ``P[spec]`` with a Cameron-Martin shift.

    The field is lowered by ``amplitude * Cap * h_mu`` on ``shift_domain``
    (default: the segment joining the terminal sets), where ``mu`` is the
    equilibrium measure of the shift sites under the sampled covariance and
    ``amplitude`` defaults to ``target_level - level``. Each trial contributes
    ``exp(log_weight) * 1_event``.

    ``shift_domain`` may be an array of grid points or a converged
    :class:`CapacityResult` on grid points.
    """
    _check_trials(trials)
    if sampler is None:
        sampler = FieldSampler(kernel, grid or spec.window(0.25))
    grid = sampler.grid
    if amplitude is None:
        amplitude = target_level - spec.level
    if amplitude < 0:
        raise DomainError("shift amplitude must be >= 0 (events are increasing in -f)")
    if isinstance(shift_domain, CapacityResult):
        result = shift_domain
    else:
        sites = default_shift_sites(spec, grid) if shift_domain is None else np.asarray(shift_domain)
        result = shift_capacity(sampler, sites)
    shift = CameronMartinShift(sampler, result, amplitude, direction=-1)
    det = EventDetector(spec, grid)
    vals = []
    for fld in sampler.iter_trials(seed, range(trials)):
        ts = shift.apply(fld)
        vals.append(math.exp(ts.log_weight) if det(ts.field.values) else 0.0)
    return _summarise(spec, "is", vals, seed, trials, amplitude=float(amplitude),
                      capacity=result.capacity, shift_sites=result.measure.domain.n,
                      sampling=sampler.provenance["method"], spacing=grid.spacing)


# --------------------------------------------------------------------------
# correlation length


@dataclass(frozen=True)
class CorrelationLength:
    level: float
    xi: float
    censored: bool
    bracket: tuple
    estimates: tuple

    def table(self):
        return [(e.event.R, e.p_hat, e.ci_hi) for e in self.estimates]


def r_schedule(r_min: float, r_max: float, refine: int, spacing: float) -> np.ndarray:
    """Doubling sequence ``r_min 2^k`` refined by ``refine`` binary subdivisions of each octave."""
    out = []
    k = 0
    while True:
        base = r_min * 2.0 ** k
        if base > r_max + 1e-9:
            break
        for j in range(2 ** refine):
            R = base * 2.0 ** (j / 2 ** refine)
            R = spacing * round(R / spacing)
            if R <= r_max + 1e-9:
                out.append(R)
        k += 1
    return np.unique(np.asarray(out))


def correlation_length(kernel, grid: Grid, eps: float, levels: Sequence[float], trials: int,
                       seed: int, r_min: float = 2.0, refine: int = 1,
                       sampler: Optional[FieldSampler] = None) -> list:
    """``xi(level) = min{R : P[Cross_level(R)] < eps}`` over a tested schedule of ``R``.

    All levels and all squares ``corner + [0, R]^2`` (``corner`` the grid
    origin) are evaluated on the same fields, so estimates are monotone in
    the level. ``R`` is tested on a doubling schedule from ``r_min`` refined
    by ``refine`` binary subdivisions per octave, up to the window extent. A
    value counts as below ``eps`` when the upper Wilson bound is. If no tested
    ``R`` qualifies the window extent is returned and flagged as censored (a
    lower bound).
    """
    check_in_open_interval("eps", eps, 0.0, 1.0 / (2.0 * math.e))
    levels = [float(l) for l in levels]
    if any(l >= 0 for l in levels):
        raise DomainError("levels must be negative")
    _check_trials(trials)
    sampler = sampler or FieldSampler(kernel, grid)
    r_max = min(grid.extent)
    Rs = r_schedule(r_min, r_max, refine, grid.spacing)
    specs = [EventSpec("cross", l, R, corner=grid.origin, dim=grid.dim) for l in levels for R in Rs]
    ests = mc_estimates(sampler, specs, trials, seed)
    out = []
    for i, l in enumerate(levels):
        row = ests[i * len(Rs):(i + 1) * len(Rs)]
        ok = [e.ci_hi < eps for e in row]
        if any(ok):
            j = ok.index(True)
            xi, cens = float(Rs[j]), False
            bracket = (float(Rs[j - 1]) if j else 0.0, xi)
        else:
            xi, cens = float(r_max), True
            bracket = (float(Rs[-1]), math.inf)
        out.append(CorrelationLength(l, xi, cens, bracket, tuple(row)))
    return out
