"""Command-line front end: ``deepspar fit|diagnose|probs|bootstrap|synth``.

Configuration is a TOML file; command-line flags override it. Every output
records the master seed. Outputs are written atomically, so a failing
command leaves no partial files. Errors are reported on stderr as one JSON
object and mapped to distinct exit codes (see ``EXIT_CODES``).
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from . import dataio, diagnostics, inference
from .bootstrap import SUMMARY_HEADER, bootstrap_fit, summary_row
from .errors import (
    BootstrapFailure,
    ConfigError,
    ParseError,
    ShapeError,
    SparError,
)
from .neural import TrainSchedule
from .spar import SparConfig, SparModel, spar_fit

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("deepspar")

EXIT_CODES = {
    "ok": 0,
    "internal": 1,
    "config": 2,
    "parse": 3,
    "data": 4,
    "file": 5,
    "bootstrap": 6,
    "dimension": 7,
}

_SPAR_KEYS = {"alpha", "threshold_hidden", "gpd_hidden", "reparam", "min_points", "min_exceedances"}
_SCHEDULE_KEYS = set(TrainSchedule.__dataclass_fields__)


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    series: str = ""
    windows: list = field(default_factory=lambda: [f"{a}-{b}" for a, b in dataio.DEFAULT_WINDOWS])
    members: list = field(default_factory=list)
    spar: SparConfig = SparConfig()
    m_tail: int = inference.DEFAULT_M_TAIL
    blocks_per_year: float = inference.BLOCKS_PER_YEAR_WEEKLY
    return_period_years: float = 10.0
    sum_upper: float = 1000.0
    sum_lower: float = 30.0
    diag_periods: list = field(default_factory=lambda: [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0])
    chi_m_tail: int = 100_000
    bootstrap_B: int = 100
    bootstrap_level: float = 0.95
    n_jobs: int = 1
    synth: dict = field(default_factory=dict)


def _schedule(base, table, where):
    unknown = set(table) - _SCHEDULE_KEYS
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return replace(base, **table)


def _spar_config(table):
    table = dict(table)
    base = SparConfig()
    thr = _schedule(base.threshold_schedule, table.pop("threshold_schedule", {}), "spar.threshold_schedule")
    gp = _schedule(base.gpd_schedule, table.pop("gpd_schedule", {}), "spar.gpd_schedule")
    unknown = set(table) - _SPAR_KEYS
    if unknown:
        raise ConfigError(f"unknown keys in [spar]: {sorted(unknown)}")
    return SparConfig(threshold_schedule=thr, gpd_schedule=gp, **table)


def _take(table, key, kind, default):
    if key not in table:
        return default
    value = table[key]
    try:
        if kind is list:
            if not isinstance(value, list):
                raise TypeError
            return value
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r} has the wrong type") from None


def load_config(path=None):
    """Parse and validate a TOML run configuration (defaults if ``path`` is None)."""
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    known = {"seed", "out", "data", "spar", "inference", "diagnostics", "bootstrap", "synth"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = RunConfig()
    data = raw.get("data", {})
    inf_t = raw.get("inference", {})
    diag_t = raw.get("diagnostics", {})
    boot_t = raw.get("bootstrap", {})
    try:
        cfg = replace(
            cfg,
            seed=_take(raw, "seed", int, cfg.seed),
            out=_take(raw, "out", str, cfg.out),
            series=_take(data, "series", str, cfg.series),
            windows=[str(w) for w in _take(data, "windows", list, cfg.windows)],
            members=[int(k) for k in _take(data, "members", list, cfg.members)],
            spar=_spar_config(raw.get("spar", {})),
            m_tail=_take(inf_t, "m_tail", int, cfg.m_tail),
            blocks_per_year=_take(inf_t, "blocks_per_year", float, cfg.blocks_per_year),
            return_period_years=_take(inf_t, "return_period_years", float, cfg.return_period_years),
            sum_upper=_take(inf_t, "sum_upper", float, cfg.sum_upper),
            sum_lower=_take(inf_t, "sum_lower", float, cfg.sum_lower),
            diag_periods=[float(p) for p in _take(diag_t, "return_periods", list, cfg.diag_periods)],
            chi_m_tail=_take(diag_t, "chi_m_tail", int, cfg.chi_m_tail),
            bootstrap_B=_take(boot_t, "B", int, cfg.bootstrap_B),
            bootstrap_level=_take(boot_t, "level", float, cfg.bootstrap_level),
            n_jobs=_take(boot_t, "n_jobs", int, cfg.n_jobs),
            synth=dict(raw.get("synth", {})),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    for w in cfg.windows:
        try:
            dataio.parse_window_label(w)
        except ValueError:
            raise ConfigError(f"bad window label {w!r}; expected 'YYYY-YYYY'") from None
    return cfg


def apply_overrides(cfg, args):
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    if args.window is not None:
        cfg = replace(cfg, windows=[args.window])
    if args.members is not None:
        cfg = replace(cfg, members=[args.members])
    if args.bootstrap is not None:
        cfg = replace(cfg, bootstrap_B=args.bootstrap)
    if args.m_tail is not None:
        cfg = replace(cfg, m_tail=args.m_tail)
    if args.series is not None:
        cfg = replace(cfg, series=args.series)
    if cfg.m_tail < 1 or cfg.bootstrap_B < 1:
        raise ConfigError("m_tail and bootstrap B must be positive")
    return replace(cfg, spar=replace(cfg.spar, seed=cfg.seed))


# -- helpers ------------------------------------------------------------------

def _header_line(cfg, command, **extra):
    fields = {"seed": cfg.seed, "command": command, **extra}
    return "# " + " ".join(f"{k}={v}" for k, v in fields.items()) + "\n"


def _write_csv(path, header, rows, cfg, command, **extra):
    dataio.atomic_write_text(path, _header_line(cfg, command, **extra) + dataio.csv_text(header, rows))


def _write_json(path, obj):
    dataio.atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _cell_label(window, k):
    return window if k is None else f"{window}_m{k}"


def _load_series(cfg):
    if not cfg.series:
        raise ConfigError("no series file configured ([data] series or --series)")
    return dataio.read_series_csv(cfg.series)


def _cells(cfg, series):
    """``(label, ObservationMatrix)`` for every (window, member-subsample) cell."""
    out = []
    for w in cfg.windows:
        obs = dataio.weekly_maxima(series, dataio.parse_window_label(w))
        for k in (cfg.members or [None]):
            out.append((_cell_label(w, k), obs if k is None else dataio.subsample_members(obs, k)))
    return out


def _fit_cell(obs, cfg, label):
    model = spar_fit(obs.values, cfg.spar)
    model.metadata.update({"window": label, "site_names": list(obs.site_names), "master_seed": cfg.seed})
    return model


def _rng(cfg, *keys):
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, *keys]))


def _probability_reports(model, cfg, rng):
    n_years = cfg.return_period_years
    reports = {
        "sum_upper": inference.sum_tail_probability(model, cfg.sum_upper, "upper", cfg.m_tail, rng,
                                                    cfg.blocks_per_year),
        "sum_lower": inference.sum_tail_probability(model, cfg.sum_lower, "lower", cfg.m_tail, rng,
                                                    cfg.blocks_per_year),
        "joint_upper": inference.joint_tail_probability(model, n_years, "upper", cfg.blocks_per_year,
                                                        cfg.m_tail, rng),
        "joint_lower": inference.joint_tail_probability(model, n_years, "lower", cfg.blocks_per_year,
                                                        cfg.m_tail, rng),
    }
    return {k: r.to_dict() for k, r in reports.items()}


def _load_model(path):
    if path is None:
        raise ConfigError("--model is required")
    return SparModel.load(path)


def _observations_for(model, cfg, args):
    series = _load_series(cfg)
    label = args.window or model.metadata.get("window", cfg.windows[0])
    window, _, member_part = label.partition("_m")
    obs = dataio.weekly_maxima(series, dataio.parse_window_label(window))
    if member_part:
        obs = dataio.subsample_members(obs, int(member_part))
    if obs.dim != model.dim:
        raise ShapeError(f"model has dimension {model.dim} but the data have {obs.dim} sites")
    return label, obs


# -- commands -----------------------------------------------------------------

def cmd_fit(cfg, args):
    series = _load_series(cfg)
    summary = []
    for label, obs in _cells(cfg, series):
        model = _fit_cell(obs, cfg, label)
        os.makedirs(cfg.out, exist_ok=True)
        path = os.path.join(cfg.out, f"model_{label}.json")
        model.save(path)
        md = model.metadata
        log.info("fitted %s: n=%d exceedance fraction %.4f", label, md["n"], md["exceedance_fraction"])
        summary.append({
            "cell": label,
            "path": path,
            "n": md["n"],
            "exceedance_fraction": md["exceedance_fraction"],
            "threshold_training": md["threshold_training"],
            "gpd_training": md["gpd_training"],
        })
    return {"command": "fit", "seed": cfg.seed, "models": summary}


def cmd_diagnose(cfg, args):
    model = _load_model(args.model)
    label, obs = _observations_for(model, cfg, args)
    outdir = os.path.join(cfg.out, f"diagnostics_{label}")
    os.makedirs(outdir, exist_ok=True)
    files = []

    def emit(name, header, rows):
        path = os.path.join(outdir, name)
        _write_csv(path, header, rows, cfg, "diagnose", model=os.path.basename(args.model))
        files.append(path)

    centred = model.to_centred(obs.values)
    qq = diagnostics.gpd_qq(model, centred)
    emit("gpd_qq_radial.csv", qq.header, qq.rows())
    for j, site in enumerate(obs.site_names):
        mq = diagnostics.marginal_qq_tail(model, obs, j, cfg.m_tail, _rng(cfg, 1, j))
        emit(f"marginal_qq_{site}.csv", mq.header, mq.rows())
    curves = {}
    for tail in ("upper", "lower"):
        for c in diagnostics.tail_chi(model, obs, cfg.chi_m_tail, _rng(cfg, 2), tail=tail):
            curves.setdefault(c.pair, []).append(c)
    for pair, group in curves.items():
        emit(f"chi_{pair[0]}_{pair[1]}.csv", diagnostics.ChiCurve.header, [r for c in group for r in c.rows()])
    rl_rows = [[] for _ in obs.site_names]
    for k, side in enumerate(("lower", "upper")):
        rl = diagnostics.return_level_curve(model, obs, cfg.diag_periods, side, cfg.blocks_per_year,
                                            cfg.m_tail, _rng(cfg, 3, k))
        for j, curve in enumerate(rl):
            rl_rows[j].extend(curve.rows())
    for site, rows in zip(obs.site_names, rl_rows):
        emit(f"return_levels_{site}.csv", diagnostics.ReturnLevelCurve.header, rows)
    return {"command": "diagnose", "seed": cfg.seed, "files": files,
            "gpd_ks_pvalue": diagnostics.gpd_ks_pvalue(model, centred)}


def cmd_probs(cfg, args):
    model = _load_model(args.model)
    label = model.metadata.get("window", "model")
    report = {
        "command": "probs",
        "seed": cfg.seed,
        "model": os.path.basename(args.model),
        "window": label,
        "return_period_years": cfg.return_period_years,
        "probabilities": _probability_reports(model, cfg, _rng(cfg, 4)),
    }
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, f"probs_{label}.json")
    _write_json(path, report)
    report["path"] = path
    return report


def _replicate_statistics(model, cfg, rng):
    stats_ = {k: v["probability"] for k, v in _probability_reports(model, cfg, rng).items()}
    names = model.metadata.get("site_names") or [f"site{j + 1}" for j in range(model.dim)]
    for side in ("upper", "lower"):
        levels = inference.marginal_return_level(model, cfg.return_period_years, side, cfg.blocks_per_year,
                                                 cfg.m_tail, rng)
        for name, v in zip(names, levels):
            stats_[f"return_level_{side}_{name}"] = float(v)
    return stats_


def cmd_bootstrap(cfg, args):
    series = _load_series(cfg)
    outputs = []
    for label, obs in _cells(cfg, series):
        outdir = os.path.join(cfg.out, f"bootstrap_{label}")
        point_model = _fit_cell(obs, cfg, label)
        point = _replicate_statistics(point_model, cfg, _rng(cfg, 5))
        ens = bootstrap_fit(obs.values, cfg.spar, cfg.bootstrap_B, cfg.seed, n_jobs=cfg.n_jobs)
        os.makedirs(outdir, exist_ok=True)
        reps = []
        for b, model in enumerate(ens.models):
            model.metadata.update({"window": label, "site_names": list(obs.site_names), "master_seed": cfg.seed})
            model.save(os.path.join(outdir, f"replicate_{b:03d}.json"))
            reps.append(_replicate_statistics(model, cfg, _rng(cfg, 6, b)))
        rows, flagged = [], []
        for name, est in point.items():
            row = summary_row(name, est, [r[name] for r in reps], cfg.bootstrap_level)
            outside = not row[2] <= est <= row[3]
            if outside:
                flagged.append(name)
            rows.append((*row, int(outside)))
        path = os.path.join(outdir, "summary.csv")
        _write_csv(path, (*SUMMARY_HEADER, "point_outside_ci"), rows, cfg, "bootstrap",
                   B=cfg.bootstrap_B, failures=len(ens.failures))
        outputs.append({"cell": label, "summary": path, "replicates": len(ens.models),
                        "failures": len(ens.failures), "point_outside_ci": flagged})
    return {"command": "bootstrap", "seed": cfg.seed, "cells": outputs}


def cmd_synth(cfg, args):
    s = dict(cfg.synth)
    d = int(s.pop("d", 2))
    rho = float(s.pop("rho", 0.5))
    corr = np.full((d, d), rho) + (1.0 - rho) * np.eye(d)
    margin = dataio.margin_from_dict(s.pop("margin", {"kind": "lognormal"}))
    members = int(s.pop("members", 2))
    start, end = int(s.pop("start_year", 1980)), int(s.pop("end_year", 2009))
    if s:
        raise ConfigError(f"unknown keys in [synth]: {sorted(s)}")
    series = dataio.synth_series(members, start, end, d, corr, margin, seed=cfg.seed)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "synthetic_series.csv")
    dataio.write_series_csv(path, series)
    return {"command": "synth", "seed": cfg.seed, "path": path, "rows": len(series)}


COMMANDS = {
    "fit": cmd_fit,
    "diagnose": cmd_diagnose,
    "probs": cmd_probs,
    "bootstrap": cmd_bootstrap,
    "synth": cmd_synth,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="deepspar", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--window", help="time window label, e.g. 1980-2009")
    parser.add_argument("--members", type=int, help="keep the first K ensemble members")
    parser.add_argument("--bootstrap", type=int, help="number of bootstrap replicates")
    parser.add_argument("--m-tail", dest="m_tail", type=int, help="tail Monte Carlo sample size")
    parser.add_argument("--series", help="series CSV (overrides [data] series)")
    parser.add_argument("--model", help="model file for diagnose and probs")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _classify(exc):
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, ParseError):
        return "parse"
    if isinstance(exc, ShapeError):
        return "dimension"
    if isinstance(exc, BootstrapFailure):
        return "bootstrap"
    if isinstance(exc, (FileNotFoundError, IsADirectoryError, PermissionError)):
        return "file"
    if isinstance(exc, (SparError, ValueError)):
        return "data"
    return "internal"


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        result = COMMANDS[args.command](cfg, args)
    except Exception as exc:
        kind = _classify(exc)
        error = {"error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": EXIT_CODES[kind]}
        print(json.dumps(error), file=sys.stderr)
        if kind == "internal" and args.verbose:
            raise
        return EXIT_CODES[kind]
    print(json.dumps(result, sort_keys=True))
    return EXIT_CODES["ok"]


if __name__ == "__main__":
    sys.exit(main())
