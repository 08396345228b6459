"""Command-line front end.

Subcommands ``gen``, ``detrend``, ``dependence``, ``cse`` and ``simulate``
write CSV/JSON plot data plus a ``manifest.json`` into ``--out``.  Settings
come from built-in defaults, then the ``[general]`` and per-command sections
of an INI file given by ``--config``, then command-line flags.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 fit failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import math
import platform
import re
import sys
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from ._backend import BACKEND
from .cse import (
    TABLE1_COLUMNS,
    CseConfig,
    CseFit,
    conditional_exceedance_pct,
    fit_cse,
    model_chi,
    simulate_cse,
)
from .data import _window_bounds, load_covariates, load_field, write_covariates, write_field
from .dependence import distance_blocks, pairwise_dependence, period_difference, site_averages
from .errors import (
    AlignmentError,
    BasisError,
    CovarianceError,
    CovariateGap,
    DegenerateYear,
    FitFailure,
    IncompleteGrid,
    NoJointExceedances,
    ParseError,
    SelectionFailure,
    WindowTooShort,
)
from .gpd import DEFAULT_EQD_GRID
from .pipelines import PIPELINES, EqdConfig, run_pipeline, threshold_histogram
from .synthetic import SyntheticSpec, gen_field

class ConfigError(Exception):
    pass


class InputError(Exception):
    """Input file content that cannot be used as requested."""


EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_FIT = 4

DATA_ERRORS = (
    ParseError, IncompleteGrid, CovariateGap, AlignmentError, DegenerateYear,
    WindowTooShort, NoJointExceedances, InputError, FileNotFoundError, IsADirectoryError,
)
FIT_ERRORS = (FitFailure, SelectionFailure, CovarianceError, BasisError)


# --- settings -----------------------------------------------------------------------

# name -> (type, default); every name is also a flag ``--name-with-dashes``
SETTINGS = {
    "gen": {
        "nx": (int, 5), "ny": (int, 5), "spacing": (float, 1.0), "n_years": (int, 31),
        "season_length": (int, 92), "start_year": (int, 1985), "gmt_range": (str, "0,0.3"), "gmt_daily_sd": (float, 0.0),
        "mu0": (float, 0.0), "gmt_slope": (float, 0.0), "seasonal_amplitude": (float, 0.0),
        "sigma0": (float, 1.0), "log_sigma_gmt_slope": (float, 0.0), "year_effect_sd": (str, "0"),
        "corr_range": (float, 0.0), "corr_shape": (float, 1.0), "seed": (int, 0),
    },
    "detrend": {
        "input": (str, None), "covariates": (str, None), "pipeline": (str, "all"),
        "threshold_q": (float, 0.90), "lrt_level": (float, 0.05), "seed": (int, 0),
        "site": (int, None), "gmt_dim": (int, 10), "day_dim": (int, 92),
        "eqd_grid": (str, ",".join(str(q) for q in DEFAULT_EQD_GRID)), "eqd_n_boot": (int, 100),
        "n_jobs": (int, 1),
    },
    "dependence": {
        "input": (str, None), "scale": (str, "uniform"), "label": (str, "input"),
        "detrended_dir": (str, None), "pipeline": (str, "all"), "u": (float, 0.95),
        "window1": (str, "1985-1989"), "window2": (str, "2011-2015"), "n_blocks": (int, 10),
    },
    "cse": {
        "input": (str, None), "label": (str, "input"), "detrended_dir": (str, None),
        "pipeline": (str, "all"), "threshold_q": (float, 0.95), "u": (float, 0.95),
        "conditioning_sites": (str, None), "remote_subsample": (int, 50), "seed": (int, 0),
        "n_starts": (int, 3), "beta_max": (float, 1.0), "n_sim": (int, 50),
        "fields_per_sim": (int, 1000), "chi_fields": (int, 10000), "n_bins": (int, 10),
        "s0": (int, None),
    },
    "simulate": {
        "fit": (str, None), "n_fields": (int, 1000), "s0": (str, "uniform"), "seed": (int, 0),
    },
}
PROBABILITIES = ("threshold_q", "lrt_level", "u")


def _read_config(path):
    if path is None:
        return None
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    return cp


def resolve(command, args) -> dict:
    """Merge defaults, config file sections and flags for ``command``."""
    cp = _read_config(args.config)
    out = {}
    for name, (typ, default) in SETTINGS[command].items():
        value = default
        for section in ("general", command):
            if cp is not None and cp.has_option(section, name):
                raw = cp.get(section, name)
                try:
                    value = typ(raw)
                except ValueError:
                    raise ConfigError(f"[{section}] {name} = {raw!r} is not a valid {typ.__name__}") from None
        flag = getattr(args, name, None)
        if flag is not None:
            value = flag
        out[name] = value
    for name in PROBABILITIES:
        if name in out and not (0.0 < out[name] < 1.0):
            raise ConfigError(f"{name} must lie in (0, 1), got {out[name]}")
    return out


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command, cfg, seeds, inputs, outputs):
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seeds": seeds,
        "inputs": [{"path": str(p), "sha256": _file_sha256(p)} for p in inputs],
        "outputs": sorted(outputs),
        "versions": {
            "margsens": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
            "backend": BACKEND,
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --- writers ------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([_fmt(v) for v in row] for row in rows)


def write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- parsing helpers ------------------------------------------------------------------


def _pipelines(spec):
    spec = spec.strip().upper()
    if spec == "ALL":
        return list(PIPELINES)
    names = [s.strip() for s in spec.split(",") if s.strip()]
    bad = [n for n in names if n not in PIPELINES]
    if bad or not names:
        raise ConfigError(f"unknown pipeline selection {spec!r}; use A, B, C, D or all")
    return names


def _floats(text, name):
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{name} must be a comma-separated list of numbers") from None


def parse_window(text):
    """``YYYY-YYYY`` or ``START:END`` with ISO dates or years."""
    text = text.strip()
    m = re.fullmatch(r"(\d{4})-(\d{4})", text)
    if m:
        return int(m.group(1)), int(m.group(2))
    if ":" in text:
        a, b = text.split(":", 1)
        return a.strip(), b.strip()
    raise ConfigError(f"cannot parse window {text!r}; use 1985-1989 or 1985-06-01:1989-08-31")


def _check_window(fld, window, name):
    try:
        first, last = _window_bounds(*window)
    except ValueError:
        raise ConfigError(f"{name} {window} is not a valid date range") from None
    years = fld.years
    y0, y1 = (int(str(d)[:4]) for d in (first, last))
    if first > last or y0 < years[0] or y1 > years[-1] or fld.window(first, last).n_times == 0:
        raise ConfigError(f"{name} {window} lies outside the data range {fld.dates[0]}..{fld.dates[-1]}")


def _need(cfg, name):
    if cfg[name] is None:
        raise ConfigError(f"--{name.replace('_', '-')} is required")
    return cfg[name]


def _prepare_out(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands -----------------------------------------------------------------------


def cmd_gen(cfg, out: Path):
    gmt_range = _floats(cfg["gmt_range"], "gmt_range")
    ye = _floats(cfg["year_effect_sd"], "year_effect_sd")
    if len(gmt_range) != 2 or len(ye) not in (1, 2):
        raise ConfigError("gmt_range needs two values and year_effect_sd one or two")
    spec = SyntheticSpec(
        nx=cfg["nx"], ny=cfg["ny"], spacing=cfg["spacing"], n_years=cfg["n_years"],
        season_length=cfg["season_length"], start_year=cfg["start_year"], gmt_range=gmt_range,
        gmt_daily_sd=cfg["gmt_daily_sd"],
        mu0=cfg["mu0"], gmt_slope=cfg["gmt_slope"], seasonal_amplitude=cfg["seasonal_amplitude"],
        sigma0=cfg["sigma0"], log_sigma_gmt_slope=cfg["log_sigma_gmt_slope"],
        year_effect_sd=ye[0] if len(ye) == 1 else ye, corr_range=cfg["corr_range"],
        corr_shape=cfg["corr_shape"], seed=cfg["seed"],
    )
    try:
        sf = gen_field(spec)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    write_field(sf.field, out / "field.csv")
    write_covariates(sf.covariates, out / "covariates.csv")
    write_field(sf.field.with_values(sf.true_uniform, "uniform"), out / "truth_uniform.csv")
    return ["field.csv", "covariates.csv", "truth_uniform.csv"], {"gen": cfg["seed"]}, []


def cmd_detrend(cfg, out: Path):
    inp = Path(_need(cfg, "input"))
    fld = load_field(inp)
    inputs = [inp]
    names = _pipelines(cfg["pipeline"])
    cov = None
    if any(p != "A" for p in names):
        cov_path = Path(_need(cfg, "covariates"))
        cov = load_covariates(cov_path, fld.dates)
        inputs.append(cov_path)
    site = cfg["site"] if cfg["site"] is not None else int(fld.sites.ids[0])
    if site not in set(int(s) for s in fld.sites.ids):
        raise ConfigError(f"site {site} is not in the field")
    row = int(np.flatnonzero(fld.sites.ids == site)[0])
    grid = _floats(cfg["eqd_grid"], "eqd_grid")
    if not grid or any(not (0 < q < 1) for q in grid):
        raise ConfigError("eqd_grid levels must lie in (0, 1)")
    outputs = []
    for p in names:
        kw = {}
        if p != "A":
            kw = dict(lrt_level=cfg["lrt_level"], seed=cfg["seed"], gmt_dim=cfg["gmt_dim"],
                      day_dim=cfg["day_dim"], n_jobs=cfg["n_jobs"])
            if p in ("B", "C"):
                kw["threshold_q"] = cfg["threshold_q"]
            else:
                kw["eqd_config"] = EqdConfig(candidate_grid=grid, n_boot=cfg["eqd_n_boot"])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            det = run_pipeline(p, fld, cov, **kw)
        stem = f"margins_{p}"
        write_field(det.uniform, out / f"{stem}_uniform.csv")
        write_field(det.laplace, out / f"{stem}_laplace.csv")
        prov = det.provenance()
        prov["warnings"] = sorted({str(w.message) for w in caught})
        write_json(out / f"{stem}_provenance.json", prov)
        write_csv(
            out / f"{stem}_site_{site}.csv", ["date", "raw", "uniform", "laplace"],
            zip([str(d) for d in fld.dates], fld.values[row], det.uniform.values[row], det.laplace.values[row]),
        )
        outputs += [f"{stem}_uniform.csv", f"{stem}_laplace.csv", f"{stem}_provenance.json",
                    f"{stem}_site_{site}.csv"]
        if p == "D":
            write_csv(out / f"{stem}_thresholds.csv", ["site_id", "threshold_q"],
                      zip(det.sites.ids, det.thresholds()))
            counts, edges = threshold_histogram(det)
            write_csv(out / f"{stem}_threshold_hist.csv", ["lower", "upper", "count"],
                      zip(edges[:-1], edges[1:], counts))
            outputs += [f"{stem}_thresholds.csv", f"{stem}_threshold_hist.csv"]
    return outputs, {"pipelines": cfg["seed"]}, inputs


def _retag(fld, scale, path):
    try:
        return fld.with_values(fld.values, scale)
    except ValueError as err:
        raise InputError(f"{path}: {err}") from None


def _detrended_inputs(cfg, suffix, default_scale):
    """``[(label, field, path)]`` from ``--input`` or ``--detrended-dir``."""
    if cfg["input"] is not None:
        path = Path(cfg["input"])
        scale = cfg.get("scale", default_scale)
        if scale not in ("raw", "uniform", "laplace"):
            raise ConfigError(f"unknown scale {scale!r}")
        fld = load_field(path)
        if scale != "raw":
            fld = _retag(fld, scale, path)
        return [(cfg["label"], fld, path)]
    if cfg["detrended_dir"] is None:
        raise ConfigError("give --input or --detrended-dir")
    base = Path(cfg["detrended_dir"])
    found = []
    for p in _pipelines(cfg["pipeline"]):
        path = base / f"margins_{p}_{suffix}.csv"
        if cfg["pipeline"].strip().lower() == "all" and not path.exists():
            continue
        fld = load_field(path)
        found.append((f"margins_{p}", _retag(fld, suffix, path), path))
    if not found:
        raise FileNotFoundError(f"no margins_*_{suffix}.csv files in {base}")
    return found


def cmd_dependence(cfg, out: Path):
    w1, w2 = parse_window(cfg["window1"]), parse_window(cfg["window2"])
    if cfg["n_blocks"] < 1:
        raise ConfigError("n_blocks must be at least 1")
    outputs, inputs = [], []
    for label, fld, path in _detrended_inputs(cfg, "uniform", "uniform"):
        inputs.append(path)
        _check_window(fld, w1, "window1")
        _check_window(fld, w2, "window2")
        u = cfg["u"]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            pw = pairwise_dependence(fld, u)
            avg = site_averages(fld, u)
            diff = period_difference(fld, u, w1, w2)
        write_csv(out / f"{label}_pairwise.csv", ["site_j", "site_k", "distance", "chi", "eta"], pw.rows())
        write_csv(out / f"{label}_site_averages.csv", ["site_id", "lon", "lat", "chi_bar", "eta_bar"],
                  zip(avg.site_ids, avg.lon, avg.lat, avg.chi_bar, avg.eta_bar))
        write_csv(
            out / f"{label}_period_difference.csv",
            ["site_id", "lon", "lat", "d_chi", "d_eta", "chi_bar_1", "chi_bar_2", "eta_bar_1", "eta_bar_2"],
            zip(diff.site_ids, diff.lon, diff.lat, diff.d_chi, diff.d_eta, diff.first.chi_bar,
                diff.second.chi_bar, diff.first.eta_bar, diff.second.eta_bar),
        )
        blocks = distance_blocks(pw, cfg["n_blocks"])
        write_csv(
            out / f"{label}_distance_blocks.csv", ["lower", "upper", "count", "min", "q1", "median", "q3", "max"],
            ([lo, hi, n, *s] for lo, hi, n, s in zip(blocks.edges[:-1], blocks.edges[1:], blocks.counts, blocks.summary)),
        )
        outputs += [f"{label}_{k}.csv" for k in ("pairwise", "site_averages", "period_difference", "distance_blocks")]
    return outputs, {}, inputs


def _centre_site(fit):
    c = fit.coords
    return int(fit.site_ids[np.argmin(np.linalg.norm(c - c.mean(axis=0), axis=1))])


def cmd_cse(cfg, out: Path):
    cond = None
    if cfg["conditioning_sites"]:
        try:
            cond = tuple(int(s) for s in str(cfg["conditioning_sites"]).split(",") if s.strip())
        except ValueError:
            raise ConfigError("conditioning_sites must be a comma-separated list of site ids") from None
    if cfg["u"] < cfg["threshold_q"]:
        raise ConfigError("u must not be below threshold_q")
    sub = cfg["remote_subsample"] if cfg["remote_subsample"] > 0 else None
    conf = CseConfig(conditioning_sites=cond, remote_subsample=sub, seed=cfg["seed"],
                     n_starts=cfg["n_starts"], beta_max=cfg["beta_max"])
    rows, outputs, inputs = [], [], []
    for label, fld, path in _detrended_inputs(cfg, "laplace", "laplace"):
        inputs.append(path)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                fit = fit_cse(fld, cfg["threshold_q"], conf)
        except ValueError as err:
            raise ConfigError(str(err)) from None
        rows.append([label, *fit.params.table_row(), fit.nll, fit.converged])
        write_json(out / f"{label}_cse_fit.json", fit.to_dict())
        s0 = cfg["s0"] if cfg["s0"] is not None else _centre_site(fit)
        if s0 not in set(int(s) for s in fit.site_ids):
            raise ConfigError(f"s0 site {s0} is not in the field")
        curve = model_chi(fit, cfg["u"], cfg["chi_fields"], seed=cfg["seed"], n_bins=cfg["n_bins"])
        write_csv(out / f"{label}_chi_curve.csv", ["lower", "upper", "centre", "chi", "count"],
                  zip(curve.edges[:-1], curve.edges[1:], curve.centers, curve.chi, curve.counts))
        pct = conditional_exceedance_pct(fit, s0, cfg["u"], cfg["n_sim"], cfg["fields_per_sim"], seed=cfg["seed"])
        write_csv(out / f"{label}_exceedance_pct.csv", ["sim", "s0", "mean_pct"],
                  ((i, s0, v) for i, v in enumerate(pct.per_sim)))
        outputs += [f"{label}_cse_fit.json", f"{label}_chi_curve.csv", f"{label}_exceedance_pct.csv"]
    write_csv(out / "cse_coefficients.csv", ["label", *TABLE1_COLUMNS, "nll", "converged"], rows)
    outputs.append("cse_coefficients.csv")
    return outputs, {"cse": cfg["seed"]}, inputs


def cmd_simulate(cfg, out: Path):
    path = Path(_need(cfg, "fit"))
    try:
        fit = CseFit.from_dict(json.loads(path.read_text()))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
        raise ConfigError(f"cannot read fit {path}: {err}") from None
    ids = [int(s) for s in fit.site_ids]
    if cfg["s0"] == "uniform":
        policy = "uniform"
    else:
        try:
            policy = ids.index(int(cfg["s0"]))
        except ValueError:
            raise ConfigError(f"s0 must be 'uniform' or a site id, got {cfg['s0']!r}") from None
    if cfg["n_fields"] < 1:
        raise ConfigError("n_fields must be positive")
    sim = simulate_cse(fit, s0_policy=policy, n_fields=cfg["n_fields"], seed=cfg["seed"])
    write_csv(out / "simulated_fields.csv", ["field", "s0", *[f"site_{i}" for i in ids]],
              ([k, ids[s], *vals] for k, (s, vals) in enumerate(zip(sim.s0, sim.values))))
    return ["simulated_fields.csv"], {"simulate": cfg["seed"]}, [path]


COMMANDS = {
    "gen": (cmd_gen, "generate a synthetic raw field and covariates"),
    "detrend": (cmd_detrend, "run marginal pipelines A-D"),
    "dependence": (cmd_dependence, "empirical chi/eta diagnostics"),
    "cse": (cmd_cse, "fit the conditional spatial extremes model and summarise it"),
    "simulate": (cmd_simulate, "simulate fields from a saved CSE fit"),
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="margsens",
        description="Marginal detrending, extremal dependence diagnostics and conditional "
                    "spatial extremes fitting. Outputs are CSV/JSON plot data plus manifest.json.",
        epilog="exit codes: 0 success, 2 configuration error, 3 data error, 4 fit failure",
    )
    parser.add_argument("--version", action="version", version=f"margsens {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI file with [general] and [%s] sections" % name)
        p.add_argument("--out", required=True, help="output directory")
        for key, (typ, default) in SETTINGS[name].items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None,
                           help=f"default: {default}")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    fn = COMMANDS[args.command][0]
    try:
        cfg = resolve(args.command, args)
        out = _prepare_out(args.out)
        outputs, seeds, inputs = fn(cfg, out)
        write_manifest(out, args.command, cfg, seeds, inputs, outputs)
    except ConfigError as err:
        print(f"margsens: configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as err:
        print(f"margsens: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except FIT_ERRORS as err:
        print(f"margsens: fit failure: {err}", file=sys.stderr)
        return EXIT_FIT
    return 0


if __name__ == "__main__":
    sys.exit(main())
