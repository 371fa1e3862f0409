"""Config-driven experiment pipeline.

Every experiment kind writes CSV tables plus ``summary.json`` into the output
directory. Jobs run one after another in a fixed order and each draws its
fields from explicit ``(seed, trial)`` streams, so reruns are byte-identical.
Failed jobs are listed in ``errors.csv``; the run as a whole fails only when
every job fails.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.fft as sfft

from .. import capacity as cap
from .._validation import ConfigError, DomainError, GaussPercError, NumericError, ResourceError
from ..kernels import make_cauchy, make_riesz
from ..percolation import (EventSpec, ball_diameter, correlation_length, is_estimate,
                           mc_estimates)
from ..sampler import (FieldSampler, Grid, empirical_covariance, local_global_split,
                       moving_average_from_kernel, sample_moving_average)
from .config import ExperimentConfig, parse_floats
from .fitting import FitError, fit_decay_rate
from .report import (CAPACITY_TABLE_COLUMNS, COVARIANCE_COLUMNS, DIAMETER_COLUMNS, ERROR_COLUMNS,
                     FIT_COLUMNS, PERCOLATE_COLUMNS, XI_COLUMNS, write_csv, write_json)

log = logging.getLogger(__name__)


class RunFailure(GaussPercError):
    """Every job of a run failed."""


@dataclass
class RunReport:
    out_dir: Path
    files: list = field(default_factory=list)
    jobs: int = 0
    failed: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def _error_code(exc) -> str:
    if isinstance(exc, ResourceError) or isinstance(exc, MemoryError):
        return "resource"
    if isinstance(exc, NumericError):
        return "numeric"
    if isinstance(exc, (DomainError, ConfigError)):
        return "domain"
    return "internal"


class _Jobs:
    """Run named jobs, collecting failures instead of raising."""

    def __init__(self):
        self.count = 0
        self.failed = []

    def run(self, name: str, fn: Callable, *args, **kwargs):
        self.count += 1
        try:
            return fn(*args, **kwargs)
        except (GaussPercError, ArithmeticError, MemoryError, ValueError) as exc:
            log.warning("job %s failed: %s", name, exc)
            self.failed.append({"job": name, "code": _error_code(exc), "message": str(exc),
                                "exc": exc})
            return None


def _kernel_cols(kernel):
    return {"kernel": kernel.family, "alpha": kernel.alpha, "gamma": kernel.gamma}


def _estimate_row(kernel, e):
    return {**_kernel_cols(kernel), "event": e.event.name, "level": e.event.level,
            "R": e.event.R, "method": e.method, "trials": e.trials, "ess": e.ess,
            "p_hat": e.p_hat, "se": e.se, "ci_lo": e.ci_lo, "ci_hi": e.ci_hi, "seed": e.seed}


def reference_rate(kernel, model: str, level: float):
    """Limiting ``(exponent, constant)`` of ``-log P[arm]`` for the model, when known."""
    a = kernel.alpha
    if model == "power" and 0 < a < 1:
        return a, cap.c_alpha(a) * level ** 2 / 2
    if model == "power_over_log" and a == 1:
        return 1.0, level ** 2 / 4
    if model == "log_power" and a == 0 and kernel.gamma is not None:
        return kernel.gamma, level ** 2 / 2
    return None, None


# --------------------------------------------------------------------------
# percolation estimates


def _event(cfg, level, R, dim):
    return EventSpec(cfg.event, float(level), float(R), r_in=cfg.r_in, rho=cfg.rho, dim=dim)


def _estimate_radius(cfg, kernel, R):
    specs = [_event(cfg, l, R, kernel.dim) for l in cfg.levels]
    sampler = FieldSampler(kernel, specs[0].window(cfg.spacing))
    if cfg.method == "naive":
        return mc_estimates(sampler, specs, cfg.trials, cfg.seed)
    return [is_estimate(kernel, None, s, cfg.trials, cfg.seed, target_level=cfg.target_level,
                        sampler=sampler) for s in specs]


def run_percolate(cfg: ExperimentConfig, out: Path, jobs: _Jobs, fit: bool = False) -> dict:
    kernel = cfg.build_kernel()
    ests = []
    for R in cfg.radii:
        got = jobs.run(f"R={R:g}", _estimate_radius, cfg, kernel, R)
        if got:
            ests.extend(got)
    ests.sort(key=lambda e: (e.event.level, e.event.R))
    files = [write_csv(out / "estimates.csv", [_estimate_row(kernel, e) for e in ests],
                       PERCOLATE_COLUMNS)]
    summary = {"estimates": len(ests),
               "unreliable": [(e.event.level, e.event.R) for e in ests if not e.reliable]}
    if fit:
        rows = []
        for level in cfg.levels:
            pts = [e for e in ests if e.event.level == level]
            f = jobs.run(f"fit level={level:g}", fit_decay_rate, pts, cfg.model)
            if f is None:
                continue
            ref_b, ref_c = reference_rate(kernel, cfg.model, level)
            rows.append({**_kernel_cols(kernel), "event": cfg.event, "level": level,
                         "model": cfg.model, "exponent": f.exponent, "exponent_se": f.exponent_se,
                         "constant": f.constant, "constant_se": f.constant_se,
                         "r_lo": f.R_range[0], "r_hi": f.R_range[1], "points": len(f.R_used),
                         "reference_exponent": ref_b, "reference_constant": ref_c})
        files.append(write_csv(out / "fits.csv", rows, FIT_COLUMNS))
        summary["fits"] = rows
    summary["files"] = [p.name for p in files]
    return summary


# --------------------------------------------------------------------------
# diameters


def diameter_table(kernel, levels, radii, trials, seed, spacing=0.25):
    """Per-trial ``D_{R, level}`` on coupled concentric balls (one window of radius ``max(radii)``)."""
    grid = Grid.centered(spacing * math.ceil(max(radii) / spacing), spacing, kernel.dim)
    sampler = FieldSampler(kernel, grid)
    D = np.zeros((len(levels), len(radii), trials))
    for t, fld in enumerate(sampler.iter_trials(seed, range(trials))):
        for i, l in enumerate(levels):
            for j, R in enumerate(radii):
                D[i, j, t] = ball_diameter(fld, l, R)
    return D


def diameter_rows(kernel, levels, radii, D, seed):
    a = kernel.alpha
    rows = []
    for i, l in enumerate(levels):
        for j, R in enumerate(radii):
            d = D[i, j]
            q25, med, q75 = np.percentile(d, [25, 50, 75])
            scale = math.log(R) ** (1 / a) if a > 0 else None
            ref = (4 / (cap.c_alpha(a) * l * l)) ** (1 / a) if 0 < a < 1 and l != 0 else None
            rows.append({**_kernel_cols(kernel), "level": l, "R": R, "trials": len(d),
                         "d_median": med, "d_q25": q25, "d_q75": q75, "log_scale": scale,
                         "ratio": med / scale if scale else None, "reference_ratio": ref,
                         "seed": seed})
    return rows


def run_diameter(cfg, out, jobs):
    kernel = cfg.build_kernel()
    D = jobs.run("diameter", diameter_table, kernel, cfg.levels, cfg.radii, cfg.trials, cfg.seed,
                 cfg.spacing)
    rows, raw = [], []
    if D is not None:
        rows = diameter_rows(kernel, cfg.levels, cfg.radii, D, cfg.seed)
        for i, l in enumerate(cfg.levels):
            for j, R in enumerate(cfg.radii):
                raw.extend({"trial": t, "level": l, "R": R, "diameter": D[i, j, t]}
                           for t in range(D.shape[2]))
    files = [write_csv(out / "diameter.csv", rows, DIAMETER_COLUMNS),
             write_csv(out / "diameters_raw.csv", raw, ("trial", "level", "R", "diameter"))]
    return {"rows": rows, "files": [p.name for p in files]}


# --------------------------------------------------------------------------
# correlation length


def xi_slope(table) -> Optional[float]:
    """Least-squares slope of ``log xi`` against ``log(1 / |level|)``."""
    if len(table) < 2:
        return None
    x = np.log(1 / np.abs([c.level for c in table]))
    y = np.log([c.xi for c in table])
    return float(np.polyfit(x, y, 1)[0])


def run_correlation_length(cfg, out, jobs):
    kernel = cfg.build_kernel()
    grid = Grid.from_extent((cfg.window,) * kernel.dim, cfg.spacing)
    table = jobs.run("correlation_length", correlation_length, kernel, grid, cfg.eps, cfg.levels,
                     cfg.trials, cfg.seed, cfg.r_min, cfg.refine) or []
    rows = [{**_kernel_cols(kernel), "level": c.level, "xi": c.xi, "censored": c.censored,
             "bracket_lo": c.bracket[0], "bracket_hi": c.bracket[1], "eps": cfg.eps,
             "trials": cfg.trials, "seed": cfg.seed} for c in table]
    cross = [_estimate_row(kernel, e) for c in table for e in c.estimates]
    files = [write_csv(out / "xi.csv", rows, XI_COLUMNS),
             write_csv(out / "crossing.csv", cross, PERCOLATE_COLUMNS)]
    return {"xi": rows, "slope": xi_slope(table), "files": [p.name for p in files]}


# --------------------------------------------------------------------------
# capacities


def capacity_row(family: str, alpha: float, n: int, tol: float = 1e-6) -> dict:
    make = make_riesz if family == "riesz" else make_cauchy
    kernel = make(alpha, 2)
    levels = [max(2, n // 4), max(2, n // 2), n]
    res = [cap.capacity(cap.segment(1.0, n=m), kernel, tol) for m in levels]
    caps = [r.capacity for r in res]
    ref = cap.c_alpha(alpha) if family == "riesz" else None
    ext = cap.extrapolate_limit(caps)
    last = res[-1]
    return {"family": family, "alpha": alpha, "n": n, "capacity": last.capacity, "c_alpha": ref,
            "rel_error": last.capacity / ref - 1 if ref else None, "extrapolated": ext,
            "extrapolated_rel_error": ext / ref - 1 if ref else None, "gap": last.duality_gap,
            "iterations": last.iterations, "converged": last.converged}


def run_capacity_table(cfg, out, jobs):
    family = cfg.kernel_section.get("family", cfg.family).lower()
    if family not in ("riesz", "cauchy"):
        raise ConfigError("capacity_table supports the riesz and cauchy families")
    rows = [r for r in (jobs.run(f"alpha={a:g}", capacity_row, family, a, cfg.cells, cfg.tol)
                        for a in cfg.alphas) if r]
    f = write_csv(out / "capacity_table.csv", rows, CAPACITY_TABLE_COLUMNS)
    return {"rows": rows, "files": [f.name]}


def _floats(sec, key, default=None):
    if key not in sec:
        if default is None:
            raise ConfigError(f"[domain] needs {key!r}")
        return default
    return parse_floats(sec[key])


def build_domain(sec: dict, dim: int = 2) -> cap.DiscretizedDomain:
    """Discretised domain from a ``[domain]`` section."""
    kind = sec.get("kind", "segment")
    h = float(sec.get("cell_size", 0.25))
    try:
        if kind == "segment":
            n = int(sec["n"]) if "n" in sec else None
            return cap.segment(float(sec["R"]), n=n, cell_size=h, start=float(sec.get("start", 0)),
                               dim=dim)
        if kind == "condensed_segment":
            return cap.condensed_segment(float(sec["s"]), float(sec["r"]), float(sec["R"]), h, dim)
        if kind == "box":
            return cap.box(_floats(sec, "sides"), h, dim=dim)
        if kind == "ball":
            return cap.ball(float(sec["radius"]), cell_size=h, dim=dim)
        if kind == "union_of_balls":
            c = np.array(_floats(sec, "centers")).reshape(-1, 2)
            return cap.union_of_balls(float(sec["s"]), c, h, dim)
    except KeyError as exc:
        raise ConfigError(f"[domain] missing key {exc}") from exc
    raise ConfigError(f"unknown domain kind {kind!r}")


def run_capacity(cfg, out, jobs):
    kernel = cfg.build_kernel()
    sec = cfg.domain
    if not sec:
        raise ConfigError("capacity needs a [domain] section")
    dom = build_domain(sec, kernel.dim)
    tol = float(sec.get("tol", cfg.tol))
    max_iter = int(sec["max_iter"]) if "max_iter" in sec else None
    res = jobs.run("capacity", cap.capacity, dom, kernel, tol, max_iter)
    if res is None:
        return {}
    cols = tuple(f"x{i}" for i in range(dom.dim)) + ("length", "weight")
    rows = [{**{f"x{i}": c[i] for i in range(dom.dim)}, "length": l, "weight": w}
            for c, l, w in zip(dom.centers, dom.lengths, res.measure.weights)]
    mpath = write_csv(out / "measure.csv", rows, cols)
    record = {"capacity": res.capacity, "gap": res.duality_gap, "iterations": res.iterations,
              "n": dom.n, "measure_csv_path": mpath.name, "converged": res.converged,
              "upper_bound": res.upper_bound, "energy": res.energy, "domain": dict(sec)}
    write_json(out / "capacity.json", record)
    return {**record, "files": ["capacity.json", mpath.name]}


# --------------------------------------------------------------------------
# sampling


def covariance_rows(kernel, grid, lags, trials, seed):
    sampler = FieldSampler(kernel, grid)
    mean, se = empirical_covariance(sampler.iter_trials(seed, range(trials)), lags,
                                    min_samples=min(100, trials))
    true = kernel(np.asarray(lags, dtype=float))
    return [{"lag": l, "k_true": float(k), "k_emp": float(m), "se": float(s),
             "z": float((m - k) / s) if s > 0 else None}
            for l, k, m, s in zip(lags, true, mean, se)]


def run_covariance_validation(cfg, out, jobs):
    kernel = cfg.build_kernel()
    grid = Grid.from_extent((cfg.window,) * kernel.dim, cfg.spacing)
    rows = jobs.run("covariance", covariance_rows, kernel, grid, cfg.lags, cfg.trials, cfg.seed) or []
    f = write_csv(out / "covariance.csv", rows, COVARIANCE_COLUMNS)
    return {"rows": rows, "max_abs_z": max((abs(r["z"]) for r in rows if r["z"] is not None),
                                           default=None), "files": [f.name]}


def write_field(path: Path, fld, extra: Optional[dict] = None) -> list:
    """Flat little-endian float64 (row-major) after one JSON header line, plus a sidecar."""
    header = {"shape": list(fld.grid.shape), "spacing": fld.grid.spacing,
              "origin": list(fld.grid.origin), "seed": fld.seed, "trial": fld.trial,
              "dtype": "<f8", "order": "C"}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        fh.write(np.ascontiguousarray(fld.values, dtype="<f8").tobytes(order="C"))
    meta = path.with_suffix(".meta.json")
    write_json(meta, {**header, "provenance": fld.provenance, **(extra or {})})
    return [path.name, meta.name]


def read_field(path):
    """Inverse of :func:`write_field`: ``(header, values)``."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return header, data.reshape(header["shape"])


def run_sample(cfg, out, jobs):
    kernel = cfg.build_kernel()
    sec = cfg.grid
    if "extent" not in sec:
        raise ConfigError("sample needs [grid] extent")
    spacing = float(sec.get("spacing", cfg.spacing))
    origin = _floats(sec, "origin", (0.0,) * kernel.dim)
    try:
        grid = Grid.from_extent(_floats(sec, "extent"), spacing, origin)
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    method = sec.get("method", "auto")
    trial = int(sec.get("trial", 0))
    files = []
    if method == "moving_average":
        ma = moving_average_from_kernel(kernel, spacing, float(sec.get("support_radius", 32)))
        if "L" in sec:
            got = jobs.run("local_global", local_global_split, ma, float(sec["L"]), grid,
                           cfg.seed, trial)
            if got:
                files += write_field(out / "field_local.bin", got[0])
                files += write_field(out / "field_global.bin", got[1])
        fld = jobs.run("sample", sample_moving_average, ma, grid, cfg.seed, trial)
    else:
        fld = jobs.run("sample", lambda: FieldSampler(kernel, grid, method=method).sample(cfg.seed, trial))
    if fld is not None:
        files += write_field(out / "field.bin", fld, {"kernel": kernel.ident})
    return {"files": files}


RUNNERS = {
    "percolate": lambda c, o, j: run_percolate(c, o, j, fit=False),
    "decay_rate": lambda c, o, j: run_percolate(c, o, j, fit=True),
    "diameter": run_diameter,
    "correlation_length": run_correlation_length,
    "capacity_table": run_capacity_table,
    "capacity": run_capacity,
    "covariance_validation": run_covariance_validation,
    "sample": run_sample,
}


def run_config(cfg: ExperimentConfig, out_dir, threads: int = 1) -> RunReport:
    """Execute ``cfg`` and write its report into ``out_dir``.

    Raises :class:`ResourceError` when every job failed for lack of memory
    and :class:`RunFailure` when every job failed otherwise.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = _Jobs()
    with sfft.set_workers(max(1, int(threads))):
        summary = RUNNERS[cfg.kind](cfg, out, jobs)
    errs = [{k: v for k, v in e.items() if k != "exc"} for e in jobs.failed]
    files = list(summary.get("files", []))
    if errs:
        files.append(write_csv(out / "errors.csv", errs, ERROR_COLUMNS).name)
    write_json(out / "summary.json", {"config": cfg.describe(), "jobs": jobs.count,
                                      "failed": errs, **{k: v for k, v in summary.items()
                                                          if k != "files"}, "files": files})
    report = RunReport(out, files + ["summary.json"], jobs.count, errs, summary)
    if jobs.count and len(errs) == jobs.count:
        if all(e["code"] == "resource" for e in errs):
            raise ResourceError(jobs.failed[0]["message"])
        raise RunFailure(f"all {jobs.count} jobs failed")
    return report
