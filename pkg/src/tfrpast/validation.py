"""Out-of-sample validation and simulation-based calibration."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .bias_model import BiasModelFit, BiasSettings, CellEstimate
from .data_model import (
    CountryParams,
    DataError,
    GlobalParams,
    LatentTrajectory,
    Method,
    Observation,
    ReferenceSeries,
    Source,
    TimeGrid,
    interpolation_weights,
)
from .fertility_model import TFR_FLOOR, detect_phases
from .inference import EstimationData, McmcConfig, Priors, diagnostics, run_mcmc, _tn_draw
from .projection import QuantileTable, simulate_forward, summarize_past

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# data splitting


@dataclass
class Split:
    train: list[Observation]
    train_reference: dict[str, ReferenceSeries]
    heldout: dict[str, ReferenceSeries]
    flagged: list[str] = field(default_factory=list)


def split(
    observations: Sequence[Observation],
    cutoff_year: int,
    reference: Mapping[str, ReferenceSeries] | None = None,
    truth: Mapping[str, ReferenceSeries] | None = None,
) -> Split:
    """Keep observations from studies that ended before ``cutoff_year``.

    A study ending at or after the cutoff is dropped entirely, including its
    estimates for earlier years.  Reference periods starting before the
    cutoff form the training reference; periods from the cutoff onward of
    ``truth`` (default: ``reference``) are held out.  Countries left without
    training observations are flagged.
    """
    if cutoff_year % 5:
        raise ValueError(f"cutoff {cutoff_year} is not on a five-year period boundary")
    late_studies = {o.study_id for o in observations if o.study_end_year >= cutoff_year}
    train = [o for o in observations if o.study_id not in late_studies]
    reference = reference or {}
    truth = reference if truth is None else truth
    train_ref = {c: r.subset(lambda p: p < cutoff_year) for c, r in reference.items()}
    heldout = {c: r.subset(lambda p: p >= cutoff_year) for c, r in truth.items()}
    heldout = {c: r for c, r in heldout.items() if r.values}
    have = {o.country for o in train}
    countries = sorted(set(reference) | {o.country for o in observations})
    flagged = [c for c in countries if c not in have]
    return Split(train, train_ref, heldout, flagged)


# --------------------------------------------------------------------------
# scoring


@dataclass
class ValidationReport:
    errors: dict[tuple[str, int], float]
    inside80: dict[tuple[str, int], bool]
    inside95: dict[tuple[str, int], bool]
    excluded: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.errors)

    @property
    def mae(self) -> float:
        return float(np.mean(list(self.errors.values()))) if self.errors else float("nan")

    @property
    def coverage80(self) -> float:
        return float(np.mean(list(self.inside80.values()))) if self.inside80 else float("nan")

    @property
    def coverage95(self) -> float:
        return float(np.mean(list(self.inside95.values()))) if self.inside95 else float("nan")

    def by_period(self) -> dict[int, tuple[float, float, float, int]]:
        """period -> (MAE, 80% coverage, 95% coverage, count)."""
        out = {}
        for p in sorted({p for _, p in self.errors}):
            keys = [k for k in self.errors if k[1] == p]
            out[p] = (float(np.mean([self.errors[k] for k in keys])),
                      float(np.mean([self.inside80[k] for k in keys])),
                      float(np.mean([self.inside95[k] for k in keys])), len(keys))
        return out

    def write_csv(self, file) -> None:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(["country", "period", "abs_error", "in80", "in95"])
        for key in sorted(self.errors):
            writer.writerow([key[0], key[1], f"{self.errors[key]:.6f}", int(self.inside80[key]), int(self.inside95[key])])

    def summary(self) -> str:
        lines = [f"cases: {self.n}", f"MAE: {self.mae:.4f}",
                 f"coverage 80%: {self.coverage80:.4f}", f"coverage 95%: {self.coverage95:.4f}"]
        if self.excluded:
            lines.append("excluded countries: " + ", ".join(self.excluded))
        return "\n".join(lines) + "\n"


def score(predictions: QuantileTable, truth: Mapping[str, ReferenceSeries],
          exclude: Sequence[str] = ()) -> ValidationReport:
    """MAE of the predictive median and coverage of the central 80%/95% intervals."""
    i50, i10, i90 = predictions.column(0.5), predictions.column(0.1), predictions.column(0.9)
    i025, i975 = predictions.column(0.025), predictions.column(0.975)
    missing = sorted({c for c, _ in predictions.rows} - set(truth))
    if missing:
        raise DataError(f"no truth for predicted countries: {', '.join(missing)}")
    errors, in80, in95 = {}, {}, {}
    skip = set(exclude)
    for (c, p) in sorted(predictions.rows):
        if c in skip:
            continue
        ref = truth[c]
        if p not in ref.period_starts:
            raise DataError(f"no truth value for {c} period {p}")
        y = ref.values[ref.period_starts.index(p)]
        q = predictions.rows[(c, p)]
        errors[(c, p)] = abs(q[i50] - y)
        in80[(c, p)] = bool(q[i10] <= y <= q[i90])
        in95[(c, p)] = bool(q[i025] <= y <= q[i975])
    return ValidationReport(errors, in80, in95, sorted(skip))


# --------------------------------------------------------------------------
# synthetic data


# Nigeria-like source mix: (source, method, delta_hat, rho_hat)
DEFAULT_CELLS = (
    (Source.DHS, Method.DIRECT, 0.11, 0.38),
    (Source.DHS, Method.COHORT, -0.48, 0.46),
    (Source.CENSUS, Method.DIRECT, -0.43, 0.50),
    (Source.MICS, Method.INDIRECT, 0.20, 1.35),
    (Source.MIS, Method.INDIRECT, 0.75, 1.09),
    (Source.SURVEY, Method.INDIRECT, 0.06, 0.95),
    (Source.VR, Method.DIRECT, 0.0, 0.1),
)


def synthetic_fit(cells=DEFAULT_CELLS) -> BiasModelFit:
    """A lookup-only bias fit with the given per-cell values."""
    return BiasModelFit.from_table([(None, CellEstimate(s, m, d, r, 0)) for s, m, d, r in cells], BiasSettings())


@dataclass(frozen=True)
class Slot:
    ref_date: float
    source: Source
    method: Method
    study_id: str = ""
    study_end_year: float | None = None


def default_design(grid: TimeGrid, survey_every: int = 5, first_survey: int | None = None,
                   vital_registration: bool = False) -> list[Slot]:
    """Observation schedule resembling a survey-based country.

    Each DHS round yields direct estimates for the three five-year windows
    before the survey and one cohort estimate; censuses every ten years;
    MICS/MIS indirect estimates in between.
    """
    slots: list[Slot] = []
    t0, t1 = grid.t0, grid.t1
    first = first_survey if first_survey is not None else t0 + 20
    year = first
    i = 0
    while year <= t1:
        sid = f"DHS-{year}"
        end = float(min(year, t1))
        for back in (1.5, 6.5, 11.5):
            if end - back >= t0:
                slots.append(Slot(end - back, Source.DHS, Method.DIRECT, sid, end))
        slots.append(Slot(end - 3.0, Source.DHS, Method.COHORT, sid, end))
        mid = year + 2.5
        if mid <= t1:
            kind = (Source.MICS, Source.MIS, Source.SURVEY)[i % 3]
            slots.append(Slot(mid - 1.0, kind, Method.INDIRECT, f"{kind.value}-{year}", mid))
        year += survey_every
        i += 1
    for census in range(t0 + 3, t1, 10):
        slots.append(Slot(census - 0.5, Source.CENSUS, Method.DIRECT, f"Census-{census}", float(census)))
    if vital_registration:
        for y in range(t0, t1):
            slots.append(Slot(y + 0.5, Source.VR, Method.DIRECT, f"VR-{y}", y + 0.5))
    return sorted(slots, key=lambda s: (s.ref_date, s.source.value, s.method.value, s.study_id))


def simulate_trajectory(params: CountryParams, globals_: GlobalParams, grid: TimeGrid, f_start: float,
                        rng: np.random.Generator, country: str = "SYN") -> LatentTrajectory:
    """Draw a trajectory over the estimation periods from the process model."""
    past = np.array([[max(f_start, TFR_FLOOR * 1.01)]])
    if grid.n_periods > 1:
        fut, _, _ = simulate_forward(
            past, np.array([params.delta]), np.array([params.d]), np.array([params.mu]),
            np.array([params.ar]), np.array([globals_.sigma_eps]), grid.n_periods - 1, rng, globals_.m_tau)
        f = np.concatenate([past[0], fut[0]])
    else:
        f = past[0]
    tau, lam, labels = detect_phases(f)
    return LatentTrajectory(country, grid.centers, f, tuple(labels), tau, lam)


def simulate_observations(traj: LatentTrajectory, fit: BiasModelFit, design: Sequence[Slot],
                          rng: np.random.Generator) -> list[Observation]:
    """``y = f(t) + delta_hat + rho_hat * N(0, 1)`` for every design slot."""
    if not design:
        return []
    t = np.array([s.ref_date for s in design])
    lo, w, _ = interpolation_weights(traj.centers, t)
    f = traj.f
    true = f[lo] if f.size == 1 else (1.0 - w) * f[lo] + w * f[lo + 1]
    z = rng.standard_normal(len(design))
    out = []
    for i, s in enumerate(design):
        proto = Observation(traj.country, s.ref_date, 1.0, s.source, s.method, s.study_id,
                            s.study_end_year if s.study_end_year is not None else s.ref_date)
        dh, rh = fit.lookup(proto)
        y = float(true[i] + dh + rh * z[i])
        out.append(replace(proto, value=max(y, 0.05)))
    return out


def simulate_synthetic(params: CountryParams, globals_: GlobalParams, fit: BiasModelFit,
                       design: Sequence[Slot], grid: TimeGrid, seed: int, f_start: float = 6.3,
                       country: str = "SYN") -> tuple[LatentTrajectory, list[Observation]]:
    """True trajectory from the process model plus noisy biased observations of it."""
    rng = np.random.default_rng(seed)
    traj = simulate_trajectory(params, globals_, grid, f_start, rng, country)
    return traj, simulate_observations(traj, fit, design, rng)


def draw_country_params(globals_: GlobalParams, rng: np.random.Generator,
                        theta_upper=(math.inf,) * 4 + (2.5,)) -> CountryParams:
    """Country parameters from the world distribution."""
    th = [_tn_draw(globals_.psi_loc[j], globals_.psi_scale[j], 0.0, theta_upper[j], rng.random())
          for j in range(5)]
    mu = _tn_draw(globals_.mu_bar, globals_.sigma_mu, 0.0, math.inf, rng.random())
    ar = _tn_draw(globals_.rho_bar, globals_.sigma_rho, 0.0, 1.0, rng.random())
    return CountryParams(tuple(th[:4]), max(th[4], 1e-3), mu, min(max(ar, 1e-3), 1 - 1e-3))


def synthetic_corpus(countries: Sequence[str], grid: TimeGrid, seed: int,
                     globals_: GlobalParams | None = None, fit: BiasModelFit | None = None,
                     ref_noise: float = 0.05, vr_countries: Sequence[str] = (),
                     f_start: tuple[float, float] = (5.8, 7.0), horizon_truth: bool = True):
    """Multi-country synthetic corpus.

    Returns (observations, reference series, true trajectories).  The
    reference series is the truth plus small noise and, when
    ``horizon_truth``, extends over the projection periods (so it can serve
    as held-out truth).
    """
    globals_ = globals_ or GlobalParams()
    fit = fit or synthetic_fit()
    seq = np.random.SeedSequence(seed).spawn(len(countries))
    full = TimeGrid(grid.t0, grid.n_periods + grid.n_future, grid.t2 + 5) if horizon_truth else grid
    obs, refs, truth = [], {}, {}
    for c, ss in zip(countries, seq):
        rng = np.random.default_rng(ss)
        params = draw_country_params(globals_, rng)
        start = float(rng.uniform(*f_start))
        traj = simulate_trajectory(params, globals_, full, start, rng, c)
        est = LatentTrajectory(c, grid.centers, traj.f[: grid.n_periods])
        design = default_design(grid, first_survey=grid.t0 + 15 + int(rng.integers(0, 10)),
                                vital_registration=c in vr_countries)
        design = [replace(s, study_id=f"{c}-{s.study_id}") for s in design]
        obs += simulate_observations(est, fit, design, rng)
        u = traj.f + ref_noise * rng.standard_normal(traj.f.size)
        u = np.maximum(u, TFR_FLOOR)
        starts = [full.period_start(k) for k in range(full.n_periods)]
        refs[c] = ReferenceSeries(c, tuple(starts), tuple(float(x) for x in u))
        truth[c] = ReferenceSeries(c, tuple(starts), tuple(float(x) for x in traj.f))
    return obs, refs, truth


# --------------------------------------------------------------------------
# calibration study


@dataclass(frozen=True)
class CalibrationConfig:
    """Settings for repeated simulate -> fit -> score runs on one country.

    The true world parameters are held fixed in the sampler, and each
    replication draws the country parameters and the starting TFR from the
    same distributions the model uses as priors, so the model is correctly
    specified.
    """

    grid: TimeGrid = TimeGrid(1950, 13, 2020)
    globals: GlobalParams = GlobalParams()
    priors: Priors = Priors(f0_mean=6.3, f0_sd=0.4)
    mcmc: McmcConfig = McmcConfig(n_chains=3, n_iter=1500, burn_in=500, thin=10)
    cells: tuple = DEFAULT_CELLS
    design: tuple[Slot, ...] | None = None
    seed: int = 2018
    psrf_limit: float = 1.2


@dataclass
class CalibrationReport:
    periods: list[int]
    inside80: np.ndarray       # (reps, periods) bool
    inside95: np.ndarray
    abs_error: np.ndarray      # (reps, periods)
    n_requested: int
    n_excluded: int

    @property
    def coverage80(self) -> float:
        return float(self.inside80.mean())

    @property
    def coverage95(self) -> float:
        return float(self.inside95.mean())

    @property
    def mae(self) -> float:
        return float(self.abs_error.mean())

    def write_csv(self, file) -> None:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(["period", "coverage80", "coverage95", "mae"])
        for k, p in enumerate(self.periods):
            writer.writerow([p, f"{self.inside80[:, k].mean():.4f}", f"{self.inside95[:, k].mean():.4f}",
                             f"{self.abs_error[:, k].mean():.4f}"])
        writer.writerow(["overall", f"{self.coverage80:.4f}", f"{self.coverage95:.4f}", f"{self.mae:.4f}"])

    def summary(self) -> str:
        return (f"replications: {self.n_requested} ({self.n_excluded} excluded, PSRF limit)\n"
                f"coverage 80%: {self.coverage80:.4f}\ncoverage 95%: {self.coverage95:.4f}\nMAE: {self.mae:.4f}\n")


def _replication(rep_seed: np.random.SeedSequence, cfg: CalibrationConfig):
    grid = cfg.grid
    rng = np.random.default_rng(rep_seed)
    fit = synthetic_fit(cfg.cells)
    params = draw_country_params(cfg.globals, rng, cfg.priors.theta_upper)
    f_start = _tn_draw(cfg.priors.f0_mean, cfg.priors.f0_sd, TFR_FLOOR, math.inf, rng.random())
    design = cfg.design if cfg.design is not None else default_design(grid, first_survey=grid.t0 + 5)
    traj = simulate_trajectory(params, cfg.globals, grid, f_start, rng)
    obs = simulate_observations(traj, fit, design, rng)
    # start the sampler from the observations' smoothed level, not the truth
    ref = ReferenceSeries("SYN", tuple(int(p) for p in grid.period_starts),
                          tuple(float(x) for x in _crude_start(obs, grid, fit)))
    data = EstimationData(grid, obs, {"SYN": ref})
    mcmc = replace(cfg.mcmc, seed=int(rng.integers(2 ** 63)))
    sample = run_mcmc(data, fit, mcmc, priors=cfg.priors, fixed_globals=cfg.globals)
    rep = diagnostics(sample, prefix="f[")
    q = summarize_past(sample)
    truth = {"SYN": ReferenceSeries("SYN", ref.period_starts, tuple(float(x) for x in traj.f))}
    return rep.max_psrf("f["), score(q, truth)


def _crude_start(obs: Sequence[Observation], grid: TimeGrid, fit: BiasModelFit) -> np.ndarray:
    """Per-period mean of bias-corrected observations, filled forward/backward."""
    n = grid.n_periods
    sums, counts = np.zeros(n), np.zeros(n)
    for o in obs:
        dh, _ = fit.lookup(o)
        k = int(np.clip(np.floor((o.ref_date - grid.t0) / 5), 0, n - 1))
        sums[k] += o.value - dh
        counts[k] += 1
    out = np.full(n, np.nan)
    out[counts > 0] = sums[counts > 0] / counts[counts > 0]
    if np.all(np.isnan(out)):
        return np.full(n, 5.0)
    idx = np.arange(n)
    good = ~np.isnan(out)
    out = np.interp(idx, idx[good], out[good])
    return np.maximum(out, 1.0)


def calibration_study(n_reps: int, config: CalibrationConfig | None = None, progress=None,
                      n_jobs: int = 1) -> CalibrationReport:
    """Repeat simulate -> estimate -> score and aggregate interval coverage of the true TFR.

    Each replication has its own seed stream spawned from ``config.seed``,
    so results do not depend on ``n_jobs``.
    """
    if n_reps < 50:
        raise ValueError("calibration study needs at least 50 replications")
    cfg = config or CalibrationConfig()
    seeds = np.random.SeedSequence(cfg.seed).spawn(n_reps)
    periods = [int(p) for p in cfg.grid.period_starts]
    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = pool.map(_replication, seeds, [cfg] * n_reps)
            results = _collect(results, n_reps, progress)
    else:
        results = _collect((_replication(ss, cfg) for ss in seeds), n_reps, progress)
    in80, in95, err = [], [], []
    excluded = 0
    for r, (max_psrf, report) in enumerate(results):
        if not (max_psrf <= cfg.psrf_limit):
            excluded += 1
            logger.info("replication %d excluded (max PSRF %.3f)", r, max_psrf)
            continue
        in80.append([report.inside80[("SYN", p)] for p in periods])
        in95.append([report.inside95[("SYN", p)] for p in periods])
        err.append([report.errors[("SYN", p)] for p in periods])
    return CalibrationReport(periods, np.array(in80, dtype=bool).reshape(-1, len(periods)),
                             np.array(in95, dtype=bool).reshape(-1, len(periods)),
                             np.array(err, dtype=float).reshape(-1, len(periods)), n_reps, excluded)


def _collect(results, n_reps: int, progress) -> list:
    out = []
    for r, res in enumerate(results):
        out.append(res)
        if progress is not None:
            progress(r + 1, n_reps)
    return out
