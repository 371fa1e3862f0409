"""Config-driven experiments, rate fits and reports."""
from .config import ExperimentConfig, config_from_string, load_config
from .fitting import DecayRateRegressor, FitError, RateFit, fit_decay_rate
from .report import emit_report
from .runner import RunFailure, RunReport, diameter_table, run_config

__all__ = ["ExperimentConfig", "config_from_string", "load_config", "DecayRateRegressor",
           "FitError", "RateFit", "fit_decay_rate", "emit_report", "RunFailure", "RunReport",
           "diameter_table", "run_config"]
