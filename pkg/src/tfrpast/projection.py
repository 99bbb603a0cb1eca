"""Forward simulation of TFR from each posterior draw and quantile summaries."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data_model import DataError, TimeGrid
from .fertility_model import TFR_FLOOR, PhaseTracker, decline_g_vec
from .inference import PosteriorSample

logger = logging.getLogger(__name__)

DEFAULT_PROBS = (0.025, 0.1, 0.5, 0.9, 0.975)
MAX_REDRAWS = 100


def quantile_label(p: float) -> str:
    """Column name for a probability: 0.025 -> q025, 0.1 -> q10, 0.975 -> q975."""
    s = f"{p * 100:g}".replace(".", "")
    return "q" + ("0" + s if p < 0.1 else s)


def parse_quantile_label(name: str) -> float:
    """Inverse of :func:`quantile_label`."""
    s = name[1:]
    if not name.startswith("q") or not s.isdigit():
        raise DataError(f"bad quantile column {name!r}")
    # a leading zero marks a one-digit integer percentage
    whole, frac = (s[1], s[2:]) if s.startswith("0") else (s[:2], s[2:])
    return float(f"{whole}.{frac or '0'}") / 100.0


@dataclass
class QuantileTable:
    """Pointwise quantiles keyed by (country, period start year)."""

    probs: tuple[float, ...]
    rows: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_rows(cls, probs, rows: Iterable[tuple[str, int, Sequence[float]]]) -> "QuantileTable":
        table = cls(tuple(probs))
        for country, period, values in rows:
            key = (country, int(period))
            v = np.asarray(values, dtype=float)
            if key in table.rows and not np.array_equal(table.rows[key], v):
                raise DataError(f"conflicting quantile rows for {key}")
            table.rows[key] = v
        return table

    def column(self, p: float) -> int:
        for i, q in enumerate(self.probs):
            if abs(q - p) < 1e-12:
                return i
        raise KeyError(f"quantile {p} not in table")

    def get(self, country: str, period: int, p: float) -> float:
        return float(self.rows[(country, int(period))][self.column(p)])

    @property
    def countries(self) -> list[str]:
        return sorted({c for c, _ in self.rows})

    def periods(self, country: str) -> list[int]:
        return sorted(p for c, p in self.rows if c == country)

    def merged(self, other: "QuantileTable") -> "QuantileTable":
        if tuple(other.probs) != tuple(self.probs):
            raise ValueError("quantile tables use different probabilities")
        out = QuantileTable(self.probs, dict(self.rows))
        out.rows.update(other.rows)
        return out

    def write_csv(self, file) -> None:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(["country", "period"] + [quantile_label(p) for p in self.probs])
        for (c, p) in sorted(self.rows):
            writer.writerow([c, p] + [f"{v:.6f}" for v in self.rows[(c, p)]])

    @classmethod
    def read_csv(cls, file) -> "QuantileTable":
        reader = csv.reader(file)
        header = next(reader)
        if header[:2] != ["country", "period"]:
            raise DataError("quantile table must start with country,period")
        probs = [parse_quantile_label(name) for name in header[2:]]
        return cls.from_rows(probs, ((r[0], int(r[1]), [float(x) for x in r[2:]]) for r in reader if r))


@dataclass
class ProjectionResult:
    grid: TimeGrid
    countries: tuple[str, ...]
    trajectories: np.ndarray          # (draws, countries, future periods)
    probs: tuple[float, ...]
    quantiles: np.ndarray             # (countries, future periods, probs)
    phase_at_present: np.ndarray      # (countries, 3) share of draws in Phase I/II/III at t1
    n_clamped: int = 0

    def table(self) -> QuantileTable:
        starts = self.grid.future_period_starts
        return QuantileTable.from_rows(self.probs, (
            (c, int(starts[k]), self.quantiles[ci, k])
            for ci, c in enumerate(self.countries) for k in range(len(starts))))

    def write_trajectories(self, file) -> None:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(["country", "draw", "period", "f"])
        starts = self.grid.future_period_starts
        for ci, c in enumerate(self.countries):
            for i in range(self.trajectories.shape[0]):
                for k, p in enumerate(starts):
                    writer.writerow([c, i, int(p), f"{self.trajectories[i, ci, k]:.6f}"])


def _quantiles(x: np.ndarray, probs: Sequence[float]) -> np.ndarray:
    # x: (draws, ...) -> (..., probs); linear interpolation between order statistics
    return np.moveaxis(np.quantile(x, probs, axis=0, method="linear"), 0, -1)


def _draw_truncated(rng, mean, sd, floor=TFR_FLOOR):
    x = mean + sd * rng.standard_normal(mean.shape)
    bad = x <= floor
    tries = 0
    while bad.any() and tries < MAX_REDRAWS:
        x[bad] = mean[bad] + sd[bad] * rng.standard_normal(int(bad.sum()))
        bad = x <= floor
        tries += 1
    n_clamped = int(bad.sum())
    if n_clamped:
        x[bad] = floor
    return x, n_clamped


def simulate_forward(
    past: np.ndarray,
    delta: np.ndarray,
    d: np.ndarray,
    mu: np.ndarray,
    ar: np.ndarray,
    sigma: np.ndarray,
    n_steps: int,
    rng: np.random.Generator,
    m_tau: float = 1.0,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Continue ``past`` (draws x periods) for ``n_steps`` five-year steps.

    Returns (future values, phase at the last past period, number of clamps).
    """
    tracker = PhaseTracker(past)
    phase0 = tracker.phase.copy()
    cur = past[:, -1].copy()
    out = np.empty((past.shape[0], n_steps))
    clamped = 0
    for k in range(n_steps):
        ph = tracker.phase
        g = decline_g_vec(cur, delta, d)
        mean = np.where(ph == 0, cur, np.where(ph == 1, cur - g, mu + ar * (cur - mu)))
        sd = sigma[np.arange(len(ph)), ph]
        sd = np.where((ph == 1) & (tracker.tau == tracker.k), sd * m_tau, sd)
        new, n_bad = _draw_truncated(rng, mean, sd)
        clamped += n_bad
        out[:, k] = new
        tracker.update(new)
        cur = new
    return out, phase0, clamped


def project(
    sample: PosteriorSample,
    grid: TimeGrid | None = None,
    seed: int = 0,
    probs: Sequence[float] = DEFAULT_PROBS,
    sigma_override: Sequence[float] | None = None,
) -> ProjectionResult:
    """Simulate one future trajectory per posterior draw, for every country.

    The phase at ``t1`` comes from applying the phase rules to that draw's
    past trajectory, and the rules keep running along the simulated path.
    """
    grid = grid or sample.grid
    if grid.t1 != sample.grid.t1 or grid.t0 != sample.grid.t0:
        raise DataError("projection grid must share the sample's estimation window")
    n_steps = grid.n_future
    rng = np.random.default_rng(seed)
    nd, nc = sample.n_draws, len(sample.countries)
    traj = np.empty((nd, nc, n_steps))
    phase_share = np.zeros((nc, 3))
    sigma = sample.sigma_eps if sigma_override is None else np.tile(np.asarray(sigma_override, float), (nd, 1))
    total_clamped = 0
    for ci in range(nc):
        past = sample.f[:, ci, :]
        if not np.all(np.isfinite(past)) or np.any(past <= 0):
            raise DataError(f"non-positive or non-finite past trajectory for {sample.countries[ci]}")
        fut, phase0, n_bad = simulate_forward(past, sample.delta[:, ci], sample.d[:, ci], sample.mu[:, ci],
                                              sample.ar[:, ci], sigma, n_steps, rng, sample.m_tau)
        traj[:, ci] = fut
        phase_share[ci] = np.bincount(phase0, minlength=3) / nd
        total_clamped += n_bad
    if total_clamped:
        logger.warning("%d projected values hit the TFR floor %.1f after %d redraws", total_clamped, TFR_FLOOR,
                       MAX_REDRAWS)
    quant = _quantiles(traj, probs) if nd else np.full((nc, n_steps, len(probs)), np.nan)
    return ProjectionResult(grid, sample.countries, traj, tuple(probs), quant, phase_share, total_clamped)


def summarize(result: ProjectionResult, probs: Sequence[float] = DEFAULT_PROBS) -> QuantileTable:
    """Empirical quantiles of the projected trajectories per country and period."""
    if result.trajectories.shape[0] < 2:
        raise DataError("need at least two trajectories to summarise")
    q = _quantiles(result.trajectories, probs)
    starts = result.grid.future_period_starts
    return QuantileTable.from_rows(probs, ((c, int(starts[k]), q[ci, k])
                                           for ci, c in enumerate(result.countries) for k in range(len(starts))))


def summarize_past(sample: PosteriorSample, probs: Sequence[float] = DEFAULT_PROBS) -> QuantileTable:
    """Posterior quantiles of the latent TFR over the estimation periods."""
    if sample.n_draws < 2:
        raise DataError("need at least two draws to summarise")
    q = _quantiles(sample.f, probs)
    starts = sample.grid.period_starts
    return QuantileTable.from_rows(probs, ((c, int(starts[k]), q[ci, k])
                                           for ci, c in enumerate(sample.countries) for k in range(len(starts))))


def summarize_array(values: np.ndarray, probs: Sequence[float] = DEFAULT_PROBS) -> np.ndarray:
    """Quantiles along axis 0 of an arbitrary draws array."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] < 2:
        raise DataError("need at least two trajectories to summarise")
    return _quantiles(values, probs)
