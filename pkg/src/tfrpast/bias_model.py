"""First-stage estimates of per-source bias and measurement-error SD.

Deviations ``z = y - u`` of each observation from the reference series are
regressed on data-quality covariates (source x method indicators).  The
fitted values give the bias; the error SD comes from regressing the
absolute centred deviations ``|z - delta_hat|`` on the same covariates and
scaling by ``sqrt(pi / 2)`` (for a normal error, ``E|e| = sigma*sqrt(2/pi)``).
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data_model import DataError, Method, Observation, ReferenceSeries, Source, TimeGrid

HALF_NORMAL_SCALE = math.sqrt(math.pi / 2.0)
TABLE_COLUMNS = ("source", "method", "delta_hat", "rho_hat", "rmse", "n")

Cell = tuple[Source, Method]


class RankDeficientError(DataError):
    def __init__(self, aliased: Sequence[str]):
        self.aliased = list(aliased)
        super().__init__("design matrix is rank deficient; aliased columns: " + ", ".join(self.aliased))


@dataclass(frozen=True)
class BiasSettings:
    rho_min: float = 0.05
    min_cell_n: int = 2
    design: str = "saturated"           # or "additive" (source + method main effects)
    covariates: tuple[str, ...] = ()    # extra numeric columns from the observation file
    per_country: bool = False
    vr_countries: frozenset[str] = frozenset()
    vr_rho: float = 0.025


@dataclass
class CellEstimate:
    source: Source
    method: Method
    delta_hat: float
    rho_hat: float
    n: int

    @property
    def rmse(self) -> float:
        return math.hypot(self.delta_hat, self.rho_hat)


@dataclass
class BiasModelFit:
    """Fitted bias/error-SD model.

    ``beta`` and ``gamma`` are keyed by fit group (``None`` for the pooled fit,
    a country code for per-country fits).  ``table`` lists one row per
    retained design cell.  Use :meth:`lookup` to resolve an observation.
    """

    beta: dict[str | None, np.ndarray]
    gamma: dict[str | None, np.ndarray]
    columns: dict[str | None, tuple[str, ...]]
    table: dict[str | None, list[CellEstimate]]
    settings: BiasSettings = field(default_factory=BiasSettings)
    # per-observation fitted values when extra covariates vary within a cell
    _obs_values: dict = field(default_factory=dict, repr=False)

    def _cells(self, country: str) -> tuple[str | None, dict[Cell, CellEstimate]]:
        key = country if self.settings.per_country else None
        if key not in self.table:
            raise DataError(f"no bias fit for country {country!r}")
        return key, {(r.source, r.method): r for r in self.table[key]}

    def lookup(self, obs: Observation) -> tuple[float, float]:
        """(delta_hat, rho_hat) for one observation."""
        s = self.settings
        if obs.source is Source.VR and obs.country in s.vr_countries:
            return 0.0, s.vr_rho
        if obs.sort_key() in self._obs_values:
            return self._obs_values[obs.sort_key()]
        key, cells = self._cells(obs.country)
        cell = (obs.source, obs.method)
        if cell not in cells:
            pooled = (Source.OTHER, obs.method)
            if pooled not in cells:
                raise DataError(f"no fitted cell for {obs.source.value}/{obs.method.value} ({obs.country})")
            cell = pooled
        r = cells[cell]
        return r.delta_hat, r.rho_hat

    def resolve(self, obs: Sequence[Observation]) -> tuple[np.ndarray, np.ndarray]:
        pairs = [self.lookup(o) for o in obs]
        if not pairs:
            return np.zeros(0), np.zeros(0)
        d, r = zip(*pairs)
        return np.array(d), np.array(r)

    def rows(self) -> list[tuple[str | None, CellEstimate]]:
        return [(k, r) for k in sorted(self.table, key=lambda k: k or "") for r in self.table[k]]

    @classmethod
    def from_table(cls, rows: Iterable[tuple[str | None, CellEstimate]], settings: BiasSettings | None = None):
        """Rebuild a lookup-only fit from emitted table rows."""
        table: dict[str | None, list[CellEstimate]] = {}
        for key, r in rows:
            table.setdefault(key, []).append(r)
        settings = settings or BiasSettings(per_country=any(k is not None for k in table))
        return cls({}, {}, {}, table, settings)


def residuals(
    obs: Sequence[Observation], refs: Mapping[str, ReferenceSeries], grid: TimeGrid | None = None
) -> list[tuple[Observation, float]]:
    """Pair every observation with ``z = y - u``.

    ``u`` at a non-centre date is the convex combination of the two nearest
    reference values (flat beyond the first/last centre).
    """
    out = []
    for o in obs:
        ref = refs.get(o.country)
        if ref is None:
            raise DataError(f"no reference series for country {o.country!r}")
        if grid is not None:
            ref.on_grid(grid)
        out.append((o, o.value - ref.value_at(o.ref_date)))
    return out


def _pool_cells(obs: Sequence[Observation], min_n: int) -> dict[Cell, Cell]:
    counts = Counter((o.source, o.method) for o in obs)
    return {c: ((Source.OTHER, c[1]) if n < min_n else c) for c, n in counts.items()}


def _design(cells: Sequence[Cell], obs: Sequence[Observation], settings: BiasSettings):
    """Design matrix rows for ``obs`` given their (pooled) ``cells``."""
    uniq = sorted(set(cells), key=lambda c: (c[0].value, c[1].value))
    cols = ["intercept"]
    if settings.design == "saturated":
        levels = uniq[1:]
        cols += [f"{s.value}:{m.value}" for s, m in levels]
        index = {c: i + 1 for i, c in enumerate(levels)}
        X = np.zeros((len(obs), len(cols)))
        X[:, 0] = 1.0
        for i, c in enumerate(cells):
            if c in index:
                X[i, index[c]] = 1.0
    elif settings.design == "additive":
        sources = sorted({c[0] for c in uniq}, key=lambda s: s.value)[1:]
        methods = sorted({c[1] for c in uniq}, key=lambda m: m.value)[1:]
        cols += [f"source:{s.value}" for s in sources] + [f"method:{m.value}" for m in methods]
        X = np.zeros((len(obs), len(cols)))
        X[:, 0] = 1.0
        for i, (s, m) in enumerate(cells):
            if s in sources:
                X[i, 1 + sources.index(s)] = 1.0
            if m in methods:
                X[i, 1 + len(sources) + methods.index(m)] = 1.0
    else:
        raise ValueError(f"unknown design {settings.design!r}")
    if settings.covariates:
        extra = np.zeros((len(obs), len(settings.covariates)))
        for i, o in enumerate(obs):
            cov = dict(o.covariates)
            for j, name in enumerate(settings.covariates):
                if name not in cov:
                    raise DataError(f"observation lacks covariate {name!r}")
                extra[i, j] = cov[name]
        X = np.hstack([X, extra])
        cols += list(settings.covariates)
    _check_rank(X, cols)
    return X, tuple(cols), uniq


def _check_rank(X: np.ndarray, cols: Sequence[str]) -> None:
    if X.shape[0] == 0:
        raise DataError("no observations")
    rank = np.linalg.matrix_rank(X)
    if rank == X.shape[1]:
        return
    aliased, kept = [], []
    for j in range(X.shape[1]):
        trial = kept + [j]
        if np.linalg.matrix_rank(X[:, trial]) == len(trial):
            kept = trial
        else:
            aliased.append(cols[j])
    raise RankDeficientError(aliased)


def _ols(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return coef


def fit_bias(z: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """OLS of deviations on the design; returns (beta, fitted delta_hat)."""
    beta = _ols(X, np.asarray(z, dtype=float))
    return beta, X @ beta


def fit_error_sd(z: np.ndarray, delta_hat: np.ndarray, X: np.ndarray, rho_min: float = 0.05):
    """Regress ``|z - delta_hat|`` on the design; returns (gamma, rho_hat).

    ``rho_hat = sqrt(pi/2) * fitted`` floored at ``rho_min``.
    """
    a = np.abs(np.asarray(z, dtype=float) - delta_hat)
    gamma = _ols(X, a)
    return gamma, np.maximum(HALF_NORMAL_SCALE * (X @ gamma), rho_min)


def _fit_group(pairs, settings: BiasSettings):
    obs = [o for o, _ in pairs]
    z = np.array([zz for _, zz in pairs])
    mapping = _pool_cells(obs, settings.min_cell_n)
    cells = [mapping[(o.source, o.method)] for o in obs]
    X, cols, uniq = _design(cells, obs, settings)
    beta, delta_hat = fit_bias(z, X)
    gamma, rho_hat = fit_error_sd(z, delta_hat, X, settings.rho_min)
    counts = Counter(cells)
    table = []
    for c in uniq:
        idx = [i for i, ci in enumerate(cells) if ci == c]
        # with extra covariates the fitted value varies within a cell; report the cell mean
        table.append(CellEstimate(c[0], c[1], float(np.mean(delta_hat[idx])),
                                  float(np.mean(rho_hat[idx])), counts[c]))
    per_obs = {}
    if settings.covariates:
        per_obs = {o.sort_key(): (float(d), float(r)) for o, d, r in zip(obs, delta_hat, rho_hat)}
    return beta, gamma, cols, table, per_obs


def fit_bias_model(
    obs: Sequence[Observation],
    refs: Mapping[str, ReferenceSeries],
    grid: TimeGrid | None = None,
    settings: BiasSettings | None = None,
) -> BiasModelFit:
    """Full first stage: residuals, bias regression and error-SD regression."""
    settings = settings or BiasSettings()
    if not obs:
        raise DataError("no observations")
    ordered = sorted(obs, key=Observation.sort_key)
    fit_obs = [o for o in ordered if not (o.source is Source.VR and o.country in settings.vr_countries)]
    pairs = residuals(fit_obs, refs, grid)
    groups: dict[str | None, list] = {}
    for o, z in pairs:
        groups.setdefault(o.country if settings.per_country else None, []).append((o, z))
    result = BiasModelFit({}, {}, {}, {}, settings)
    for key, group in sorted(groups.items(), key=lambda kv: kv[0] or ""):
        beta, gamma, cols, table, per_obs = _fit_group(group, settings)
        result.beta[key], result.gamma[key] = beta, gamma
        result.columns[key], result.table[key] = cols, table
        result._obs_values.update(per_obs)
    return result


def write_table(fit: BiasModelFit, file) -> None:
    """Emit ``source,method,delta_hat,rho_hat,rmse,n`` (prefixed by ``country`` for per-country fits)."""
    per_country = fit.settings.per_country
    writer = csv.writer(file, lineterminator="\n")
    writer.writerow((("country",) if per_country else ()) + TABLE_COLUMNS)
    for key, r in fit.rows():
        row = [r.source.value, r.method.value, f"{r.delta_hat:.6f}", f"{r.rho_hat:.6f}", f"{r.rmse:.6f}", r.n]
        writer.writerow(([key] if per_country else []) + row)


def read_table(file, settings: BiasSettings | None = None) -> BiasModelFit:
    reader = csv.DictReader(file)
    if reader.fieldnames is None or not set(TABLE_COLUMNS) <= set(reader.fieldnames):
        raise DataError(f"bias table must have columns {','.join(TABLE_COLUMNS)}")
    per_country = "country" in reader.fieldnames
    rows = []
    for rec in reader:
        try:
            est = CellEstimate(Source(rec["source"]), Method(rec["method"]), float(rec["delta_hat"]),
                               float(rec["rho_hat"]), int(rec["n"]))
        except ValueError as exc:
            raise DataError(f"bad bias table row {rec}: {exc}") from None
        rows.append((rec["country"] if per_country else None, est))
    settings = replace(settings or BiasSettings(), per_country=per_country)
    return BiasModelFit.from_table(rows, settings)
