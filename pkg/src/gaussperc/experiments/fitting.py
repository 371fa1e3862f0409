"""Decay-rate fits of ``-log p`` against the radius.

Three models, all linear after taking logs (``y = -log p``):

* ``power``           ``y = C R^beta``
* ``power_over_log``  ``y = C (R / log R)^beta``
* ``log_power``       ``y = C (log R)^beta``

Points are weighted by ``1 / var(log y)`` with ``se(y) = se(p) / p`` (delta
method), so ``se(log y) = se(p) / (p y)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .._validation import NumericError

MODELS = ("power", "power_over_log", "log_power")
MAX_REL_SE = 0.3
MIN_POINTS = 4


class FitError(NumericError):
    """Too few usable points for a rate fit."""


def model_abscissa(model: str, R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if model == "power":
        return R
    if model == "power_over_log":
        return R / np.log(R)
    if model == "log_power":
        return np.log(R)
    raise ValueError(f"unknown model {model!r}")


@dataclass(frozen=True)
class RateFit:
    model: str
    exponent: float
    exponent_se: float
    constant: float
    constant_se: float
    residuals: np.ndarray
    R_used: np.ndarray
    excluded: tuple = ()
    metadata: dict = field(default_factory=dict)

    @property
    def R_range(self):
        return float(self.R_used.min()), float(self.R_used.max())

    def predict(self, R):
        return self.constant * model_abscissa(self.model, R) ** self.exponent


class DecayRateRegressor(BaseEstimator, RegressorMixin):
    """Weighted least squares of ``log y`` on ``log x(R)``.

    ``fit(R, y, sample_weight)`` takes the radii, the decay values
    ``y = -log p`` and weights ``1 / var(log y)``. Without weights the
    standard errors come from the residual scatter.
    """

    def __init__(self, model: str = "power"):
        self.model = model

    def fit(self, R, y, sample_weight=None):
        R = np.asarray(R, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")
        if len(R) < 2 or np.any(y <= 0) or np.any(R <= 1):
            raise FitError("need at least two points with R > 1 and y > 0")
        X = np.column_stack([np.ones_like(R), np.log(model_abscissa(self.model, R))])
        ly = np.log(y)
        known = sample_weight is not None
        w = np.ones_like(R) if not known else np.asarray(sample_weight, dtype=float)
        A = X.T @ (w[:, None] * X)
        coef = np.linalg.solve(A, X.T @ (w * ly))
        cov = np.linalg.inv(A)
        resid = ly - X @ coef
        if not known:
            dof = len(R) - 2
            s2 = float(resid @ resid) / dof if dof > 0 else math.nan
            cov = cov * s2
        self.intercept_, self.exponent_ = float(coef[0]), float(coef[1])
        self.cov_ = cov
        self.residuals_ = resid
        self.constant_ = math.exp(self.intercept_)
        self.exponent_se_ = float(math.sqrt(cov[1, 1]))
        self.constant_se_ = self.constant_ * float(math.sqrt(cov[0, 0]))
        return self

    def predict(self, R):
        check_is_fitted(self, "exponent_")
        return self.constant_ * model_abscissa(self.model, R) ** self.exponent_


def _as_points(estimates):
    """``(R, p_hat, se)`` arrays from estimates or tuples."""
    rows = []
    for e in estimates:
        if hasattr(e, "p_hat"):
            rows.append((e.event.R, e.p_hat, e.se))
        else:
            rows.append(tuple(e))
    return np.array(rows, dtype=float).reshape(-1, 3)


def fit_decay_rate(estimates: Sequence, model: str = "power", exclude_smallest: bool = True,
                   max_rel_se: float = MAX_REL_SE, min_points: int = MIN_POINTS) -> RateFit:
    """Fit ``-log p_hat`` against ``R`` under ``model``.

    Estimates with ``p_hat = 0``, ``p_hat = 1`` or ``se / p_hat > max_rel_se``
    are discarded; then the smallest remaining radius is dropped when
    ``exclude_smallest`` is set. At least ``min_points`` must remain.
    """
    pts = _as_points(estimates)
    pts = pts[np.argsort(pts[:, 0], kind="stable")]
    R, p, se = pts.T
    ok = (p > 0) & (p < 1) & (se <= max_rel_se * p)
    excluded = [float(r) for r in R[~ok]]
    R, p, se = R[ok], p[ok], se[ok]
    if exclude_smallest and len(R):
        excluded.append(float(R[0]))
        R, p, se = R[1:], p[1:], se[1:]
    if len(R) < min_points:
        raise FitError(f"{len(R)} usable points, need {min_points}")
    y = -np.log(p)
    sly = se / (p * y)
    weights = 1.0 / sly ** 2 if np.all(sly > 0) else None
    reg = DecayRateRegressor(model).fit(R, y, weights)
    return RateFit(model, reg.exponent_, reg.exponent_se_, reg.constant_, reg.constant_se_,
                   reg.residuals_, R, tuple(sorted(excluded)),
                   {"weighted": weights is not None, "points": len(R)})
