import json
import math

import numpy as np
import pytest

from gaussperc import cli
from gaussperc._validation import ConfigError
from gaussperc.experiments.config import config_from_string, load_config
from gaussperc.experiments.fitting import (DecayRateRegressor, FitError, fit_decay_rate,
                                           model_abscissa)
from gaussperc.experiments.report import (PERCOLATE_COLUMNS, emit_report, format_value, read_csv,
                                          write_csv)
from gaussperc.experiments.runner import read_field, reference_rate, run_config
from gaussperc.kernels import make_cauchy, make_log_kernel


# ---------------------------------------------------------------- fitting

def _synthetic(model, beta, C, radii, rel=0.02, seed=0):
    """Probabilities with known decay and noise of relative size ``rel`` on p."""
    rng = np.random.default_rng(seed)
    y = C * model_abscissa(model, radii) ** beta
    p = np.exp(-y)
    se = rel * p
    return [(R, pi * (1 + rel * rng.standard_normal()), s) for R, pi, s in zip(radii, p, se)]


@pytest.mark.parametrize("model,beta,C", [("power", 0.5, 0.19), ("power_over_log", 1.0, 0.25),
                                          ("log_power", 2.0, 0.5)])
def test_fit_recovers_parameters(model, beta, C):
    radii = np.array([8.0, 16, 32, 64, 128, 256])
    hits = 0
    for seed in range(20):
        f = fit_decay_rate(_synthetic(model, beta, C, radii, seed=seed), model)
        hits += abs(f.exponent - beta) <= 2 * f.exponent_se
        assert f.excluded == (8.0,) and len(f.R_used) == 5
    assert hits >= 15                          # ~95% coverage expected


def test_fit_exact_data():
    radii = np.array([4.0, 8, 16, 32, 64])
    pts = [(R, math.exp(-0.3 * R ** 0.7), 1e-3 * math.exp(-0.3 * R ** 0.7)) for R in radii]
    f = fit_decay_rate(pts, exclude_smallest=False)
    assert f.exponent == pytest.approx(0.7, abs=1e-10)
    assert f.constant == pytest.approx(0.3, rel=1e-10)
    assert f.predict(10.0) == pytest.approx(0.3 * 10 ** 0.7)


def test_fit_point_rules():
    pts = [(8.0, 0.3, 0.01), (16.0, 0.1, 0.01), (32.0, 0.02, 0.009), (64.0, 0.0, 0.0),
           (128.0, 0.01, 0.001)]
    with pytest.raises(FitError):
        fit_decay_rate(pts)                    # 32 (rel se 0.45) and 64 (p = 0) drop out
    f = fit_decay_rate(pts, exclude_smallest=False, min_points=3)
    assert f.excluded == (32.0, 64.0)


def test_regressor_api():
    R = np.array([2.0, 4, 8, 16])
    reg = DecayRateRegressor("power").fit(R, 0.5 * R ** 0.4)
    assert reg.exponent_ == pytest.approx(0.4) and reg.get_params() == {"model": "power"}
    assert reg.score(R, 0.5 * R ** 0.4) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        DecayRateRegressor("exp").fit(R, R)
    with pytest.raises(FitError):
        DecayRateRegressor().fit(R, -R)


def test_reference_rates():
    b, c = reference_rate(make_cauchy(0.5), "power", -1.0)
    assert b == 0.5 and c == pytest.approx(0.3813799 / 2, abs=1e-6)
    assert reference_rate(make_cauchy(1.0), "power_over_log", -2.0) == (1.0, 1.0)
    assert reference_rate(make_log_kernel(1.0), "log_power", -1.0) == (1.0, 0.5)
    assert reference_rate(make_cauchy(1.0), "power", -1.0) == (None, None)


# ---------------------------------------------------------------- config

GOOD = """
[kernel]
family = cauchy
alpha = 0.5
[experiment]
trials = 100
radii = 2, 4   ; comment
"""


def test_config_parsing(tmp_path):
    cfg = config_from_string(GOOD, default_kind="percolate")
    assert cfg.kind == "percolate" and cfg.radii == (2.0, 4.0) and cfg.trials == 100
    assert cfg.with_seed(9).seed == 9 and cfg.with_seed(None) is cfg
    assert cfg.build_kernel().alpha == 0.5
    p = tmp_path / "c.ini"
    p.write_text(GOOD)
    from_file = load_config(p, "percolate")
    assert from_file.radii == cfg.radii and from_file.source == str(p)


@pytest.mark.parametrize("text", [
    GOOD + "bogus = 1\n",
    GOOD + "[extra]\nx = 1\n",
    GOOD.replace("radii = 2, 4", "radii = 4, 2"),
    GOOD.replace("radii = 2, 4", "radii = 2, x"),
    GOOD.replace("trials = 100", "trials = many"),
    GOOD + "method = fancy\n",
    GOOD + "kind = nothing\n",
    GOOD.replace("alpha = 0.5", "alpha = 0.5\nbeta = 1"),
    "[kernel\nfamily = cauchy\n",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        config_from_string(text, "percolate")


def test_config_bad_kernel():
    cfg = config_from_string(GOOD.replace("alpha = 0.5", "alpha = 3"), "percolate")
    with pytest.raises(ConfigError):
        cfg.build_kernel()
    with pytest.raises(ConfigError):
        load_config("/nonexistent/file.ini")


# ---------------------------------------------------------------- reports

def test_format_value():
    assert format_value(0.1) == "0.10000000000000001"
    assert float(format_value(math.pi)) == math.pi
    assert format_value(None) == "" and format_value(True) == "true"
    assert format_value(np.int64(3)) == "3" and format_value(float("inf")) == "inf"
    assert format_value("a,b") == '"a,b"'


def test_csv_roundtrip_and_header_only(tmp_path):
    p = write_csv(tmp_path / "e.csv", [], PERCOLATE_COLUMNS)
    assert p.read_text() == ",".join(PERCOLATE_COLUMNS) + "\n"
    assert PERCOLATE_COLUMNS[:6] == ("kernel", "alpha", "gamma", "event", "level", "R")
    rows = [{"kernel": "cauchy", "alpha": 0.5, "p_hat": 1 / 3, "seed": 1}]
    back = read_csv(write_csv(tmp_path / "r.csv", rows, PERCOLATE_COLUMNS))
    assert float(back[0]["p_hat"]) == 1 / 3 and back[0]["gamma"] == ""


def test_emit_report(tmp_path):
    obj = {"a": np.float64(0.1), "b": [np.int64(2)], "c": float("nan")}
    back = json.loads(emit_report(obj, "json", tmp_path / "x.json").read_text())
    assert back == {"a": 0.1, "b": [2], "c": "nan"}
    with pytest.raises(ValueError):
        emit_report([], "csv", tmp_path / "y.csv")
    with pytest.raises(ValueError):
        emit_report([], "xml", tmp_path / "y.xml")


# ---------------------------------------------------------------- runner / CLI

PERC = """
[kernel]
family = cauchy
alpha = 0.5
[experiment]
event = arm
levels = -0.5, -1
radii = 1, 2, 3, 4, 5
trials = 100
spacing = 0.5
"""


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_runner_reproducible(tmp_path):
    cfg = config_from_string(PERC, "decay_rate")
    run_config(cfg, tmp_path / "a")
    run_config(cfg, tmp_path / "b")
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a == b and {"estimates.csv", "fits.csv", "summary.json"} <= set(a)
    rows = read_csv(tmp_path / "a" / "estimates.csv")
    assert len(rows) == 10 and list(rows[0]) == list(PERCOLATE_COLUMNS)
    run_config(cfg.with_seed(2), tmp_path / "c")
    assert _files(tmp_path / "c")["estimates.csv"] != a["estimates.csv"]


def test_runner_partial_failure(tmp_path):
    # r_in = 2 is invalid for R <= 2 only, so two of the five radii fail
    cfg = config_from_string(PERC + "r_in = 2\n", "percolate")
    rep = run_config(cfg, tmp_path)
    assert len(rep.failed) == 2 and rep.jobs == 5
    errs = read_csv(tmp_path / "errors.csv")
    assert {e["code"] for e in errs} == {"domain"}


def _cli(tmp_path, text, cmd, *extra):
    cfg = tmp_path / "cfg.ini"
    cfg.write_text(text)
    return cli.main([cmd, "--config", str(cfg), "--out", str(tmp_path / "out"), *extra])


def test_cli_exit_codes(tmp_path, capsys):
    assert _cli(tmp_path, PERC, "percolate", "--seed", "3") == 0
    assert (tmp_path / "out" / "estimates.csv").exists()
    assert _cli(tmp_path, PERC + "bogus = 1\n", "percolate") == 2
    assert _cli(tmp_path, PERC, "capacity") == 2          # kind mismatch
    assert _cli(tmp_path, PERC, "percolate", "--threads", "0") == 2
    assert _cli(tmp_path, PERC + "r_in = 9\n", "percolate") == 4
    huge = PERC.replace("radii = 1, 2, 3, 4, 5", "radii = 40000").replace("spacing = 0.5",
                                                                           "spacing = 0.25")
    assert _cli(tmp_path, huge, "percolate") == 3
    assert cli.main(["percolate", "--config", str(tmp_path / "none.ini"), "--out",
                     str(tmp_path)]) == 2


def test_cli_capacity(tmp_path):
    text = "[kernel]\nfamily = riesz\nalpha = 0.5\n[domain]\nkind = segment\nR = 1\nn = 64\n"
    assert _cli(tmp_path, text, "capacity") == 0
    rec = json.loads((tmp_path / "out" / "capacity.json").read_text())
    assert {"capacity", "gap", "iterations", "n", "measure_csv_path"} <= set(rec)
    assert rec["n"] == 64 and rec["gap"] <= 1e-6
    w = [float(r["weight"]) for r in read_csv(tmp_path / "out" / rec["measure_csv_path"])]
    assert len(w) == 64 and sum(w) == pytest.approx(1.0)


def test_cli_sample_field_roundtrip(tmp_path):
    text = ("[kernel]\nfamily = cauchy\nalpha = 1\n[experiment]\nseed = 4\n"
            "[grid]\nextent = 4, 2\nspacing = 0.25\n")
    assert _cli(tmp_path, text, "sample") == 0
    header, vals = read_field(tmp_path / "out" / "field.bin")
    assert vals.shape == (17, 9) and header["seed"] == 4
    from gaussperc.sampler import FieldSampler, Grid
    direct = FieldSampler(make_cauchy(1.0), Grid.from_extent((4, 2), 0.25)).sample(4, 0)
    assert np.array_equal(vals, direct.values)
    meta = json.loads((tmp_path / "out" / "field.meta.json").read_text())
    assert meta["shape"] == [17, 9] and "provenance" in meta


def test_cli_sample_local_global(tmp_path):
    text = ("[kernel]\nfamily = cauchy\nalpha = 1\n[grid]\nextent = 8, 8\nspacing = 0.25\n"
            "method = moving_average\nsupport_radius = 8\nL = 2\n")
    assert _cli(tmp_path, text, "sample") == 0
    _, f = read_field(tmp_path / "out" / "field.bin")
    _, fl = read_field(tmp_path / "out" / "field_local.bin")
    _, gl = read_field(tmp_path / "out" / "field_global.bin")
    assert np.array_equal(fl + gl, f)
