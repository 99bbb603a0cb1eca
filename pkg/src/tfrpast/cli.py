"""Command-line interface: fit-bias, estimate, project, validate, simulate, plot.

Every flag can also come from a ``TFRPAST_<FLAG>`` environment variable or
a flat ``key = value`` config file (``--config``).  Precedence: command
line, then environment, then config file, then built-in defaults.

Exit codes: 0 success, 1 data or input error, 2 usage error, 3 outputs
written but some PSRF exceeds 1.1.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .bias_model import BiasSettings, fit_bias_model, read_table, write_table
from .data_model import (
    DataError,
    GlobalParams,
    TimeGrid,
    group_by_country,
    parse_observations,
    parse_reference,
    write_observations,
    write_reference,
)
from .inference import (
    EstimationData,
    InitError,
    McmcConfig,
    Priors,
    diagnostics,
    read_posterior,
    run_mcmc,
    warm_start_from,
    write_posterior,
)
from .plotting import fan_chart
from .projection import DEFAULT_PROBS, QuantileTable, project, summarize_past
from .validation import CalibrationConfig, calibration_study, score, split, synthetic_corpus

logger = logging.getLogger("tfrpast")

ENV_PREFIX = "TFRPAST_"
EXIT_OK, EXIT_DATA, EXIT_USAGE, EXIT_DIAGNOSTICS = 0, 1, 2, 3


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off", ""):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _probs(text: str) -> tuple[float, ...]:
    return tuple(sorted(float(x) for x in str(text).split(",") if x.strip()))


@dataclass(frozen=True)
class Option:
    flag: str
    type: Callable[[str], Any]
    default: Any
    help: str
    is_flag: bool = False

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


OPTIONS = {o.dest: o for o in (
    Option("--obs", str, None, "observation CSV"),
    Option("--ref", str, None, "reference-series CSV"),
    Option("--out", str, ".", "output directory"),
    Option("--seed", int, 0, "random seed"),
    Option("--chains", int, 3, "number of MCMC chains"),
    Option("--iter", int, 12000, "iterations per chain"),
    Option("--burnin", int, 2000, "burn-in iterations"),
    Option("--thin", int, 10, "thinning interval"),
    Option("--cutoff", int, None, "validation cutoff year (period boundary)"),
    Option("--countries", str, None, "comma-separated country filter"),
    Option("--final-sample", int, None, "evenly subsample the retained draws to this size"),
    Option("--start-year", int, 1950, "first period start year (t0)"),
    Option("--end-year", int, 2015, "end of the estimation window (t1)"),
    Option("--horizon", int, 2100, "projection horizon (t2)"),
    Option("--bias", str, None, "bias table CSV from fit-bias"),
    Option("--posterior", str, None, "directory written by estimate"),
    Option("--projection", str, None, "directory written by project"),
    Option("--warm-start", str, None, "posterior directory whose last draw initialises the sampler"),
    Option("--truth", str, None, "held-out truth in the reference-series schema (default: --ref)"),
    Option("--probs", _probs, DEFAULT_PROBS, "comma-separated quantile probabilities"),
    Option("--per-country", _bool, False, "fit the bias model separately per country", True),
    Option("--design", str, "saturated", "bias design: saturated or additive"),
    Option("--rho-min", float, 0.05, "floor for the fitted error SD"),
    Option("--vr-countries", str, "", "countries with high-quality vital registration"),
    Option("--vr-rho", float, 0.025, "error SD for high-quality vital registration"),
    Option("--max-value", float, 12.0, "upper sanity bound for observed TFR"),
    Option("--lenient", _bool, False, "skip invalid observation rows instead of failing", True),
    Option("--m-tau", float, 1.0, "SD multiplier on the first transition step"),
    Option("--synthetic-reps", int, None, "run the synthetic calibration study with this many replications"),
    Option("--n-countries", int, 3, "number of synthetic countries"),
    Option("--n-jobs", int, 1, "worker processes for chains"),
    Option("--no-charts", _bool, False, "skip SVG fan charts", True),
)}

COMMON = ("out", "seed", "start_year", "end_year", "horizon", "countries")
MCMC = ("chains", "iter", "burnin", "thin", "final_sample", "m_tau", "n_jobs", "warm_start")
BIAS = ("per_country", "design", "rho_min", "vr_countries", "vr_rho")
INPUT = ("obs", "ref", "max_value", "lenient")

COMMANDS = {
    "fit-bias": ("fit the stage-1 bias and error-SD model", COMMON + INPUT + BIAS),
    "estimate": ("sample the posterior of past TFR and model parameters", COMMON + INPUT + BIAS + MCMC + ("bias", "probs")),
    "project": ("simulate future TFR from a posterior sample",
                COMMON + ("posterior", "obs", "ref", "probs", "no_charts", "max_value", "lenient")),
    "validate": ("out-of-sample validation or synthetic calibration study",
                 COMMON + INPUT + BIAS + MCMC + ("cutoff", "truth", "probs", "synthetic_reps")),
    "simulate": ("write a synthetic corpus", COMMON + ("n_countries", "vr_countries")),
    "plot": ("render SVG fan charts", COMMON + ("posterior", "projection", "obs", "ref", "max_value", "lenient")),
}


# --------------------------------------------------------------------------
# option resolution


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tfrpast", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, keys) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("-v", "--verbose", action="count", default=0)
        for key in keys:
            o = OPTIONS[key]
            if o.is_flag:
                p.add_argument(o.flag, dest=o.dest, action="store_const", const=True, default=None, help=o.help)
            else:
                p.add_argument(o.flag, dest=o.dest, default=None, metavar=o.dest.upper(), help=o.help)
    return parser


def read_config(path) -> dict[str, str]:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    cp.optionxform = lambda s: s.strip().replace("-", "_")
    text = Path(path).read_text(encoding="utf-8")
    cp.read_string("[run]\n" + text)
    return dict(cp["run"])


def resolve(args: argparse.Namespace, environ=os.environ) -> tuple[dict[str, Any], set[str]]:
    """Merge command line, environment, config file and defaults.

    Returns (values, keys that were set explicitly).
    """
    keys = COMMANDS[args.command][1]
    cfg = read_config(args.config) if args.config else {}
    unknown = sorted(set(cfg) - set(OPTIONS))
    if unknown:
        raise DataError(f"unknown config keys: {', '.join(unknown)}")
    values, explicit = {}, set()
    for key in keys:
        o = OPTIONS[key]
        raw = getattr(args, key, None)
        env = environ.get(ENV_PREFIX + key.upper())
        for candidate in (raw, env, cfg.get(key)):
            if candidate is not None:
                try:
                    values[key] = candidate if candidate is True else o.type(candidate)
                except ValueError as exc:
                    raise DataError(f"{o.flag}: {exc}") from None
                explicit.add(key)
                break
        else:
            values[key] = o.default
    return values, explicit


def _grid(v) -> TimeGrid:
    try:
        return TimeGrid.from_bounds(v["start_year"], v["end_year"], v["horizon"])
    except ValueError as exc:
        raise DataError(str(exc)) from None


def _country_filter(v) -> set[str] | None:
    if not v.get("countries"):
        return None
    return {c.strip() for c in v["countries"].split(",") if c.strip()}


def _csv_list(text: str) -> frozenset[str]:
    return frozenset(c.strip() for c in (text or "").split(",") if c.strip())


def _require(v, *keys):
    for k in keys:
        if not v.get(k):
            raise DataError(f"{OPTIONS[k].flag} is required")


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _load_inputs(v, grid: TimeGrid, need_ref: bool = True):
    obs, refs = [], {}
    if v.get("obs"):
        path = _existing(v["obs"], "observation file")
        with open(path, encoding="utf-8", newline="") as fh:
            obs = parse_observations(fh, grid, max_value=v.get("max_value", 12.0),
                                     strict=not v.get("lenient", False))
    if v.get("ref"):
        with open(_existing(v["ref"], "reference file"), encoding="utf-8", newline="") as fh:
            refs = parse_reference(fh)
    elif need_ref:
        raise DataError("--ref is required")
    keep = _country_filter(v)
    if keep is not None:
        obs = [o for o in obs if o.country in keep]
        refs = {c: r for c, r in refs.items() if c in keep}
    return obs, refs


def _bias_settings(v) -> BiasSettings:
    return BiasSettings(rho_min=v["rho_min"], design=v["design"], per_country=v["per_country"],
                        vr_countries=_csv_list(v["vr_countries"]), vr_rho=v["vr_rho"])


def _mcmc_config(v) -> McmcConfig:
    try:
        return McmcConfig(n_chains=v["chains"], n_iter=v["iter"], burn_in=v["burnin"], thin=v["thin"],
                          seed=v["seed"])
    except ValueError as exc:
        raise DataError(str(exc)) from None


def write_run_config(path: Path, command: str, v: dict[str, Any]) -> None:
    lines = [f"# tfrpast {__version__} {command}"]
    for key in sorted(v):
        val = v[key]
        if val is None:
            continue
        if isinstance(val, tuple):
            val = ",".join(f"{x:g}" for x in val)
        lines.append(f"{key} = {val}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _grid_from_run(directory: Path, v, explicit) -> TimeGrid:
    """Grid recorded next to a posterior, with explicitly given flags taking precedence."""
    run = directory / "run.cfg"
    rec = read_config(run) if run.exists() else {}
    merged = dict(v)
    for key in ("start_year", "end_year", "horizon"):
        if key not in explicit and key in rec:
            merged[key] = int(rec[key])
    return _grid(merged)


def _open_out(v) -> Path:
    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, writer: Callable) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer(fh)


# --------------------------------------------------------------------------
# commands


def cmd_fit_bias(v, explicit) -> int:
    grid = _grid(v)
    obs, refs = _load_inputs(v, grid)
    if not obs:
        raise DataError("no observations")
    fit = fit_bias_model(obs, refs, grid, _bias_settings(v))
    out = _open_out(v)
    _write(out / "bias_table.csv", lambda fh: write_table(fit, fh))
    write_run_config(out / "run.cfg", "fit-bias", v)
    logger.info("wrote %s", out / "bias_table.csv")
    return EXIT_OK


def _estimate(v, grid, obs, refs, out: Path, bias_path: str | None):
    settings = _bias_settings(v)
    if bias_path:
        with open(_existing(bias_path, "bias table"), encoding="utf-8", newline="") as fh:
            fit = read_table(fh, settings)
    else:
        if not obs:
            raise DataError("no observations")
        fit = fit_bias_model(obs, refs, grid, settings)
        _write(out / "bias_table.csv", lambda fh: write_table(fit, fh))
    data = EstimationData(grid, obs, refs)
    init = None
    if v.get("warm_start"):
        prev = read_posterior(_existing(v["warm_start"], "warm-start directory"), grid)
        init = warm_start_from(prev)
    priors = Priors(m_tau=v["m_tau"])
    sample = run_mcmc(data, fit, _mcmc_config(v), init, priors, n_jobs=v["n_jobs"])
    if v.get("final_sample"):
        sample = sample.subsample(v["final_sample"])
    report = diagnostics(sample)
    write_posterior(sample, out)
    _write(out / "diagnostics.csv", report.write_csv)
    (out / "diagnostics.txt").write_text(report.summary(), encoding="utf-8")
    _write(out / "estimates.csv", lambda fh: summarize_past(sample, v["probs"]).write_csv(fh))
    return sample, report


def cmd_estimate(v, explicit) -> int:
    grid = _grid(v)
    obs, refs = _load_inputs(v, grid)
    out = _open_out(v)
    _, report = _estimate(v, grid, obs, refs, out, v.get("bias"))
    write_run_config(out / "run.cfg", "estimate", v)
    if not report.ok:
        logger.warning("%d parameters have PSRF > %.2f; see %s", len(report.flagged), report.threshold,
                       out / "diagnostics.txt")
        return EXIT_DIAGNOSTICS
    return EXIT_OK


def _charts(out: Path, countries, future: QuantileTable | None, past: QuantileTable | None, grid: TimeGrid,
            obs=(), refs=None) -> None:
    charts = out / "charts"
    charts.mkdir(exist_ok=True)
    by_country = group_by_country(obs)
    for c in countries:
        svg = fan_chart(c, future=future, past=past, present=grid.center(grid.n_periods - 1),
                        observations=by_country.get(c, ()), reference=(refs or {}).get(c))
        (charts / f"{c}.svg").write_text(svg, encoding="utf-8")


def cmd_project(v, explicit) -> int:
    _require(v, "posterior")
    post_dir = _existing(v["posterior"], "posterior directory")
    grid = _grid_from_run(post_dir, v, explicit)
    sample = read_posterior(post_dir, grid)
    keep = _country_filter(v)
    if keep is not None:
        idx = [i for i, c in enumerate(sample.countries) if c in keep]
        sample = replace(sample, countries=tuple(sample.countries[i] for i in idx), f=sample.f[:, idx],
                         delta=sample.delta[:, idx], d=sample.d[:, idx], mu=sample.mu[:, idx], ar=sample.ar[:, idx])
    result = project(sample, grid, seed=v["seed"], probs=v["probs"])
    out = _open_out(v)
    future = result.table()
    _write(out / "projection_quantiles.csv", future.write_csv)
    _write(out / "projection_trajectories.csv", result.write_trajectories)
    _write(out / "phase_at_present.csv", lambda fh: _write_phase_share(fh, result))
    if not v["no_charts"]:
        obs, refs = _load_inputs(v, grid, need_ref=False)
        _charts(out, sample.countries, future, summarize_past(sample, v["probs"]), grid, obs, refs)
    write_run_config(out / "run.cfg", "project", {**v, "start_year": grid.t0, "end_year": grid.t1,
                                                  "horizon": grid.t2})
    return EXIT_OK


def _write_phase_share(fh, result) -> None:
    fh.write("country,phase_I,phase_II,phase_III\n")
    for ci, c in enumerate(result.countries):
        fh.write(c + "," + ",".join(f"{x:.4f}" for x in result.phase_at_present[ci]) + "\n")


def cmd_validate(v, explicit) -> int:
    out = _open_out(v)
    if v.get("synthetic_reps"):
        return _validate_synthetic(v, explicit, out)
    _require(v, "cutoff")
    grid = _grid(v)
    cutoff = v["cutoff"]
    if not grid.t0 < cutoff < grid.t1:
        raise DataError(f"cutoff {cutoff} must lie inside ({grid.t0}, {grid.t1})")
    obs, refs = _load_inputs(v, grid)
    truth = refs
    if v.get("truth"):
        with open(_existing(v["truth"], "truth file"), encoding="utf-8", newline="") as fh:
            truth = parse_reference(fh)
    try:
        parts = split(obs, cutoff, refs, truth)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if parts.flagged:
        logger.warning("no training data for %s; excluded", ", ".join(parts.flagged))
    keep = {o.country for o in parts.train}
    train_ref = {c: r for c, r in parts.train_reference.items() if c in keep}
    train_grid = TimeGrid.from_bounds(grid.t0, cutoff, max(grid.t1, cutoff + 5))
    sample, report = _estimate(v, train_grid, parts.train, train_ref, out, v.get("bias"))
    result = project(sample, train_grid, seed=v["seed"], probs=v["probs"])
    table = result.table()
    heldout = {c: r for c, r in parts.heldout.items() if c in keep}
    missing = sorted(keep - set(heldout))
    if missing:
        raise DataError(f"no held-out truth for {', '.join(missing)}")
    pred = QuantileTable.from_rows(table.probs, ((c, p, q) for (c, p), q in sorted(table.rows.items())
                                                 if p in heldout[c].period_starts))
    rep = score(pred, heldout)
    rep.excluded = list(parts.flagged)
    _write(out / "projection_quantiles.csv", pred.write_csv)
    _write(out / "validation_report.csv", rep.write_csv)
    (out / "validation_summary.txt").write_text(rep.summary(), encoding="utf-8")
    write_run_config(out / "run.cfg", "validate", v)
    sys.stdout.write(rep.summary())
    return EXIT_OK if report.ok else EXIT_DIAGNOSTICS


def _validate_synthetic(v, explicit, out: Path) -> int:
    cfg = CalibrationConfig(seed=v["seed"])
    if {"start_year", "end_year"} & explicit:
        cfg = replace(cfg, grid=TimeGrid.from_bounds(v["start_year"], v["end_year"], v["end_year"] + 5))
    mc = {k: v[k] for k in ("chains", "iter", "burnin", "thin") if k in explicit}
    if mc:
        try:
            cfg = replace(cfg, mcmc=replace(cfg.mcmc, **{
                {"chains": "n_chains", "iter": "n_iter", "burnin": "burn_in", "thin": "thin"}[k]: x
                for k, x in mc.items()}))
        except ValueError as exc:
            raise DataError(str(exc)) from None

    def progress(done, total):
        logger.info("replication %d/%d", done, total)

    try:
        rep = calibration_study(v["synthetic_reps"], cfg, progress, n_jobs=v["n_jobs"])
    except ValueError as exc:
        raise DataError(str(exc)) from None
    _write(out / "calibration.csv", rep.write_csv)
    (out / "calibration_summary.txt").write_text(rep.summary(), encoding="utf-8")
    write_run_config(out / "run.cfg", "validate", v)
    sys.stdout.write(rep.summary())
    return EXIT_OK


def cmd_simulate(v, explicit) -> int:
    grid = _grid(v)
    keep = _country_filter(v)
    countries = sorted(keep) if keep else [f"SYN{i + 1}" for i in range(v["n_countries"])]
    obs, refs, truth = synthetic_corpus(countries, grid, v["seed"], GlobalParams(),
                                        vr_countries=_csv_list(v["vr_countries"]))
    out = _open_out(v)
    past_refs = {c: r.subset(lambda p: p < grid.t1) for c, r in refs.items()}
    _write(out / "observations.csv", lambda fh: write_observations(obs, fh))
    _write(out / "reference.csv", lambda fh: write_reference(past_refs, fh))
    _write(out / "truth.csv", lambda fh: write_reference(truth, fh))
    write_run_config(out / "run.cfg", "simulate", v)
    return EXIT_OK


def cmd_plot(v, explicit) -> int:
    if not v.get("posterior") and not v.get("projection"):
        raise DataError("--posterior or --projection is required")
    past = future = None
    countries: set[str] = set()
    grid = _grid(v)
    if v.get("posterior"):
        post_dir = _existing(v["posterior"], "posterior directory")
        grid = _grid_from_run(post_dir, v, explicit)
        est = post_dir / "estimates.csv"
        if est.exists():
            with open(est, encoding="utf-8", newline="") as fh:
                past = QuantileTable.read_csv(fh)
        else:
            past = summarize_past(read_posterior(post_dir, grid))
        countries |= set(past.countries)
    if v.get("projection"):
        proj_dir = _existing(v["projection"], "projection directory")
        if not v.get("posterior"):
            grid = _grid_from_run(proj_dir, v, explicit)
        with open(_existing(str(proj_dir / "projection_quantiles.csv"), "projection quantiles"),
                  encoding="utf-8", newline="") as fh:
            future = QuantileTable.read_csv(fh)
        countries |= set(future.countries)
    keep = _country_filter(v)
    if keep is not None:
        countries &= keep
    obs, refs = _load_inputs({**v, "countries": None}, grid, need_ref=False)
    _charts(_open_out(v), sorted(countries), future, past, grid, obs, refs)
    return EXIT_OK


HANDLERS = {
    "fit-bias": cmd_fit_bias,
    "estimate": cmd_estimate,
    "project": cmd_project,
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "plot": cmd_plot,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 1)
    logging.basicConfig(level=level, format="%(levelname)s: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    warnings.simplefilter("default")
    try:
        values, explicit = resolve(args)
        return HANDLERS[args.command](values, explicit)
    except (DataError, InitError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
