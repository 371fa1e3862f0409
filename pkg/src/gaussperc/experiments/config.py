"""Experiment configuration files.

INI syntax read with :mod:`configparser`; ``;`` and ``#`` start comments and
lists are comma separated. Sections::

    [kernel]                 ; see gaussperc.kernels
    family = cauchy
    alpha  = 0.5

    [experiment]
    kind     = decay_rate    ; decay_rate | percolate | diameter | correlation_length
                             ; capacity_table | covariance_validation | capacity | sample
    seed     = 1
    trials   = 1000
    spacing  = 0.25
    method   = naive         ; naive | is
    event    = arm           ; arm | ann | ann_inf | cross | tube
    levels   = -1.0
    radii    = 8, 16, 32, 64 ; strictly increasing
    r_in     = 0
    rho      = 0.25
    model    = power         ; power | power_over_log | log_power
    target_level = 0
    eps      = 0.15          ; correlation_length
    r_min    = 2
    refine   = 1
    window   = 512           ; correlation_length / covariance_validation side
    lags     = 0, 1, 2, 4, 8 ; covariance_validation
    alphas   = 0.3, 0.5, 0.7 ; capacity_table
    cells    = 512

    [domain]                 ; capacity
    kind = segment           ; segment | box | ball | condensed_segment | union_of_balls
    R = 1
    n = 512

    [grid]                   ; sample
    extent  = 32, 32
    spacing = 0.25

Unknown keys are rejected. There are no environment overrides.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .._validation import ConfigError, GaussPercError
from ..kernels import Kernel, kernel_from_config
from ..percolation import EVENT_KINDS
from .fitting import MODELS

KINDS = ("decay_rate", "percolate", "diameter", "correlation_length", "capacity_table",
         "covariance_validation", "capacity", "sample")

_EXPERIMENT_KEYS = {
    "kind": str, "seed": int, "trials": int, "spacing": float, "method": str, "event": str,
    "levels": "floats", "radii": "floats", "r_in": float, "rho": float, "model": str,
    "target_level": float, "eps": float, "r_min": float, "refine": int, "window": float,
    "lags": "floats", "alphas": "floats", "cells": int, "family": str, "tol": float,
}
_KERNEL_KEYS = {"family", "alpha", "gamma", "dim", "join_radius"}
_DOMAIN_KEYS = {"kind", "R", "n", "cell_size", "s", "r", "radius", "sides", "centers", "tol",
                "max_iter", "start"}
_GRID_KEYS = {"extent", "spacing", "origin", "method", "trial", "support_radius", "L"}


def parse_floats(text: str) -> tuple:
    try:
        return tuple(float(t) for t in str(text).replace(";", ",").split(",") if t.strip())
    except ValueError as exc:
        raise ConfigError(f"bad number list {text!r}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    kernel_section: dict
    kind: str = "decay_rate"
    seed: int = 1
    trials: int = 1000
    spacing: float = 0.25
    method: str = "naive"
    event: str = "arm"
    levels: tuple = (-1.0,)
    radii: tuple = (16.0, 32.0, 64.0, 128.0)
    r_in: float = 0.0
    rho: float = 0.25
    model: str = "power"
    target_level: float = 0.0
    eps: float = 0.15
    r_min: float = 2.0
    refine: int = 1
    window: float = 32.0
    lags: tuple = (0.0, 1.0, 2.0, 4.0, 8.0)
    alphas: tuple = (0.3, 0.5, 0.7)
    cells: int = 512
    family: str = "riesz"
    tol: float = 1e-6
    domain: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    source: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if self.method not in ("naive", "is"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.event not in EVENT_KINDS:
            raise ConfigError(f"unknown event {self.event!r}")
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}")
        if self.trials < 1 or self.spacing <= 0:
            raise ConfigError("trials and spacing must be positive")
        r = self.radii
        if not r or any(b <= a for a, b in zip(r, r[1:])) or r[0] <= 0:
            raise ConfigError("radii must be positive and strictly increasing")
        if not self.levels:
            raise ConfigError("at least one level is required")

    def with_seed(self, seed: Optional[int]) -> "ExperimentConfig":
        return self if seed is None else replace(self, seed=int(seed))

    def with_kind(self, kind: str) -> "ExperimentConfig":
        return replace(self, kind=kind)

    def build_kernel(self) -> Kernel:
        try:
            return kernel_from_config(self.kernel_section)
        except (GaussPercError, KeyError, ValueError) as exc:
            raise ConfigError(f"invalid [kernel] section: {exc}") from exc

    def describe(self) -> dict:
        out = {k: getattr(self, k) for k in ("kind", "seed", "trials", "spacing", "method",
                                               "event", "model")}
        out.update({"kernel": dict(self.kernel_section), "levels": list(self.levels),
                    "radii": list(self.radii)})
        return out


def _convert(key, raw, kind):
    try:
        if kind == "floats":
            return parse_floats(raw)
        return kind(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def load_config(path, default_kind: Optional[str] = None) -> ExperimentConfig:
    """Read and validate an experiment config file."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_parser(parser, default_kind, str(path))


def config_from_string(text: str, default_kind: Optional[str] = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    return config_from_parser(parser, default_kind)


def config_from_parser(parser, default_kind=None, source=None) -> ExperimentConfig:
    known = {"kernel", "experiment", "domain", "grid"}
    extra = set(parser.sections()) - known
    if extra:
        raise ConfigError(f"unknown sections: {sorted(extra)}")
    kernel = dict(parser["kernel"]) if parser.has_section("kernel") else {}
    bad = set(kernel) - _KERNEL_KEYS
    if bad:
        raise ConfigError(f"unknown [kernel] keys: {sorted(bad)}")
    kwargs = {}
    if parser.has_section("experiment"):
        for key, raw in parser["experiment"].items():
            if key not in _EXPERIMENT_KEYS:
                raise ConfigError(f"unknown [experiment] key {key!r}")
            kwargs[key] = _convert(key, raw, _EXPERIMENT_KEYS[key])
    if "kind" not in kwargs and default_kind is not None:
        kwargs["kind"] = default_kind
    for name, keys in (("domain", _DOMAIN_KEYS), ("grid", _GRID_KEYS)):
        if parser.has_section(name):
            sec = dict(parser[name])
            bad = set(sec) - keys
            if bad:
                raise ConfigError(f"unknown [{name}] keys: {sorted(bad)}")
            kwargs[name] = sec
    try:
        return ExperimentConfig(kernel, source=source, **kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
