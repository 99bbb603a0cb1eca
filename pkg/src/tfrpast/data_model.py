"""Domain types, five-year grid arithmetic and CSV ingestion.

Observations and reference series are read from plain UTF-8 CSV files::

    country,ref_date,value,source,method,study_id,study_end_year
    country,period_start_year,value

Any additional numeric columns in the observation file are kept as
user-declared quality covariates.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
import warnings
from dataclasses import dataclass
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PERIOD_LEN = 5
# a five-year period (t, t+5) is centred on January 1 of year t+3
CENTER_OFFSET = 3

OBS_COLUMNS = ("country", "ref_date", "value", "source", "method", "study_id", "study_end_year")
REF_COLUMNS = ("country", "period_start_year", "value")


class DataError(ValueError):
    """Input data failed validation."""


class ParseError(DataError):
    """Malformed CSV input; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ClampWarning(UserWarning):
    """A time outside the span of period centres was clamped to the nearest centre."""


class Source(str, enum.Enum):
    VR = "VR"
    DHS = "DHS"
    MICS = "MICS"
    MIS = "MIS"
    CENSUS = "Census"
    SURVEY = "Survey"
    SURVEY_NATIONAL = "Survey-National"
    OTHER = "Other"


class Method(str, enum.Enum):
    DIRECT = "Direct"
    COHORT = "Cohort"
    INDIRECT = "Indirect"


class Phase(enum.IntEnum):
    I = 0
    II = 1
    III = 2


@dataclass(frozen=True)
class TimeGrid:
    """Five-year period grid from ``start_year`` to ``horizon_year``.

    The first ``n_periods`` periods form the estimation window
    ``[t0, t1]``; the remaining ones up to ``horizon_year`` are projected.
    """

    start_year: int = 1950
    n_periods: int = 13
    horizon_year: int = 2100
    period_len: int = PERIOD_LEN

    def __post_init__(self):
        if self.period_len != PERIOD_LEN:
            raise ValueError("period_len is fixed at 5 years")
        if self.n_periods < 1:
            raise ValueError("n_periods must be positive")
        if self.horizon_year <= self.t1 or (self.horizon_year - self.t1) % PERIOD_LEN:
            raise ValueError(
                f"horizon {self.horizon_year} must be a period boundary after t1={self.t1}"
            )

    @classmethod
    def from_bounds(cls, t0: int, t1: int, t2: int) -> "TimeGrid":
        if not t0 < t1 < t2:
            raise ValueError(f"need t0 < t1 < t2, got {t0}, {t1}, {t2}")
        if (t1 - t0) % PERIOD_LEN:
            raise ValueError(f"t1={t1} is not a period boundary from t0={t0}")
        return cls(start_year=t0, n_periods=(t1 - t0) // PERIOD_LEN, horizon_year=t2)

    @property
    def t0(self) -> int:
        return self.start_year

    @property
    def t1(self) -> int:
        return self.start_year + PERIOD_LEN * self.n_periods

    @property
    def t2(self) -> int:
        return self.horizon_year

    @property
    def n_future(self) -> int:
        return (self.horizon_year - self.t1) // PERIOD_LEN

    def center(self, k: int) -> int:
        return self.start_year + PERIOD_LEN * k + CENTER_OFFSET

    def period_start(self, k: int) -> int:
        return self.start_year + PERIOD_LEN * k

    @property
    def centers(self) -> np.ndarray:
        """Centres of the estimation periods."""
        return self.start_year + CENTER_OFFSET + PERIOD_LEN * np.arange(self.n_periods, dtype=float)

    @property
    def future_centers(self) -> np.ndarray:
        k = np.arange(self.n_periods, self.n_periods + self.n_future)
        return self.start_year + CENTER_OFFSET + PERIOD_LEN * k.astype(float)

    @property
    def period_starts(self) -> np.ndarray:
        return self.start_year + PERIOD_LEN * np.arange(self.n_periods)

    @property
    def future_period_starts(self) -> np.ndarray:
        return self.t1 + PERIOD_LEN * np.arange(self.n_future)

    def period_index(self, period_start_year: int) -> int:
        k, rem = divmod(int(period_start_year) - self.start_year, PERIOD_LEN)
        if rem:
            raise ValueError(f"{period_start_year} is not a period start on this grid")
        return k

    def with_estimation_end(self, t1: int) -> "TimeGrid":
        return TimeGrid.from_bounds(self.t0, t1, self.horizon_year)


@dataclass(frozen=True)
class Observation:
    country: str
    ref_date: float
    value: float
    source: Source
    method: Method
    study_id: str
    study_end_year: float
    covariates: tuple[tuple[str, float], ...] = ()

    def sort_key(self):
        return (self.country, self.ref_date, self.source.value, self.method.value,
                self.study_id, self.value, self.study_end_year)


@dataclass(frozen=True)
class ReferenceSeries:
    """Baseline five-year estimates for one country (treated as unbiased)."""

    country: str
    period_starts: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.period_starts) != len(self.values):
            raise DataError(f"{self.country}: period/value length mismatch")
        if any(not v > 0 for v in self.values):
            raise DataError(f"{self.country}: reference values must be positive")
        if any(b - a != PERIOD_LEN for a, b in zip(self.period_starts, self.period_starts[1:])):
            raise DataError(f"{self.country}: reference periods must be consecutive five-year periods")

    @property
    def centers(self) -> np.ndarray:
        return np.asarray(self.period_starts, dtype=float) + CENTER_OFFSET

    def on_grid(self, grid: TimeGrid) -> np.ndarray:
        """Values for the estimation periods of ``grid``; errors if any are missing."""
        lookup = dict(zip(self.period_starts, self.values))
        missing = [int(p) for p in grid.period_starts if int(p) not in lookup]
        if missing:
            raise DataError(f"{self.country}: reference series lacks periods {missing}")
        return np.array([lookup[int(p)] for p in grid.period_starts])

    def value_at(self, t: float) -> float:
        return interpolate_values(self.centers, np.asarray(self.values, dtype=float), t)

    def subset(self, keep) -> "ReferenceSeries":
        pairs = [(p, v) for p, v in zip(self.period_starts, self.values) if keep(p)]
        return ReferenceSeries(self.country, tuple(p for p, _ in pairs), tuple(v for _, v in pairs))


@dataclass(frozen=True)
class LatentTrajectory:
    """One joint draw of a country's TFR on the period centres, with phase labels.

    ``phase[k]`` is the regime governing the step from period ``k`` to ``k+1``.
    ``tau`` / ``lam`` are the first indices in Phase II / III (``None`` if never
    reached; ``tau == 0`` means the transition began at or before the grid start).
    """

    country: str
    centers: np.ndarray
    f: np.ndarray
    phase: tuple[Phase, ...] = ()
    tau: int | None = None
    lam: int | None = None

    def __post_init__(self):
        f = np.array(self.f, dtype=float)
        centers = np.array(self.centers, dtype=float)
        if f.shape != centers.shape:
            raise ValueError("f and centers must have the same length")
        if f.size and not np.all(f > 0):
            raise ValueError("trajectory values must be positive")
        if self.phase and any(b < a for a, b in zip(self.phase, self.phase[1:])):
            raise ValueError("phase labels must be non-decreasing (I -> II -> III)")
        f.setflags(write=False)
        centers.setflags(write=False)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "centers", centers)


@dataclass(frozen=True)
class CountryParams:
    """Country-level process parameters.

    ``delta`` are the four double-logistic widths (their sum is the level at
    which the transition starts), ``d`` the maximum five-year decrement, ``mu``
    the post-transition long-run mean and ``ar`` its autoregressive coefficient.
    """

    delta: tuple[float, float, float, float]
    d: float
    mu: float
    ar: float

    def __post_init__(self):
        if len(self.delta) != 4 or any(x < 0 for x in self.delta):
            raise ValueError(f"delta must be four non-negative widths, got {self.delta}")
        if not self.d > 0:
            raise ValueError("d must be positive")
        if not 0 < self.ar < 1:
            raise ValueError("ar must lie in (0, 1)")
        if not self.mu > 0:
            raise ValueError("mu must be positive")

    @property
    def start_level(self) -> float:
        return float(sum(self.delta))


@dataclass(frozen=True)
class GlobalParams:
    """World-level parameters.

    ``psi_loc``/``psi_scale`` parameterise independent truncated normals for
    (delta1..delta4, d).  ``sigma_eps`` holds the Phase I/II/III error SDs and
    ``m_tau`` inflates the SD of the first transition step.
    """

    psi_loc: tuple[float, ...] = (1.0, 2.0, 1.5, 1.5, 0.6)
    psi_scale: tuple[float, ...] = (0.5, 0.5, 0.5, 0.5, 0.3)
    mu_bar: float = 2.1
    sigma_mu: float = 0.3
    rho_bar: float = 0.8
    sigma_rho: float = 0.1
    sigma_eps: tuple[float, float, float] = (0.15, 0.2, 0.1)
    m_tau: float = 1.0

    def __post_init__(self):
        scales = (*self.psi_scale, self.sigma_mu, self.sigma_rho, *self.sigma_eps)
        if any(not s > 0 for s in scales):
            raise ValueError("all scale parameters must be positive")
        if not 0 < self.rho_bar < 1:
            raise ValueError("rho_bar must lie in (0, 1)")
        if self.m_tau < 1:
            raise ValueError("m_tau must be >= 1")


# --------------------------------------------------------------------------
# interpolation


def interpolation_weights(centers: np.ndarray, t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Segment index ``lo`` and weight ``w`` so that the value at ``t`` is
    ``(1 - w) * f[lo] + w * f[lo + 1]``.

    Times outside the span of ``centers`` are held flat at the nearest end
    and reported in the returned ``clamped`` mask.
    """
    centers = np.asarray(centers, dtype=float)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    n = centers.size
    if n == 0:
        raise ValueError("empty trajectory")
    clamped = (t < centers[0]) | (t > centers[-1])
    if n == 1:
        return np.zeros(t.shape, dtype=int), np.zeros(t.shape), clamped
    tc = np.clip(t, centers[0], centers[-1])
    lo = np.clip(np.searchsorted(centers, tc, side="right") - 1, 0, n - 2)
    w = (tc - centers[lo]) / (centers[lo + 1] - centers[lo])
    return lo, w, clamped


def interpolate_values(centers, values, t: float, warn: bool = False) -> float:
    values = np.asarray(values, dtype=float)
    lo, w, clamped = interpolation_weights(centers, t)
    if warn and clamped[0]:
        warnings.warn(f"t={t} outside [{centers[0]}, {centers[-1]}]; clamped", ClampWarning, stacklevel=3)
    lo, w = lo[0], w[0]
    if values.size == 1:
        return float(values[0])
    if w == 0.0:
        return float(values[lo])
    if w == 1.0:
        return float(values[lo + 1])
    return float((1.0 - w) * values[lo] + w * values[lo + 1])


def interpolate(traj: LatentTrajectory, t: float) -> float:
    """TFR at decimal year ``t``, linear between successive period centres.

    For ``t`` in ``[c_l, c_l + 5]`` this is
    ``((c_l + 5 - t) * f[l] + (t - c_l) * f[l + 1]) / 5``; exact at centres.
    Outside the centre span the nearest value is returned and a
    :class:`ClampWarning` is issued.
    """
    if traj.f.size == 0:
        raise ValueError("empty trajectory")
    return interpolate_values(traj.centers, traj.f, t, warn=True)


# --------------------------------------------------------------------------
# CSV ingestion


def _open_text(file) -> IO[str]:
    if isinstance(file, (bytes, bytearray)):
        return io.StringIO(file.decode("utf-8"))
    if isinstance(file, io.BufferedIOBase) or (hasattr(file, "mode") and "b" in getattr(file, "mode", "")):
        return io.TextIOWrapper(file, encoding="utf-8", newline="")
    if isinstance(file, str):
        return open(file, encoding="utf-8", newline="")
    if hasattr(file, "__fspath__"):
        return open(file, encoding="utf-8", newline="")
    return file


def _float(text: str, name: str, line: int) -> float:
    try:
        x = float(text)
    except ValueError:
        raise ParseError(f"{name}={text!r} is not a number", line) from None
    if not math.isfinite(x):
        raise ParseError(f"{name}={text!r} is not finite", line)
    return x


def _read_rows(file, required: Sequence[str]):
    fh = _open_text(file)
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file", 1) from None
    except csv.Error as exc:
        raise ParseError(str(exc), 1) from None
    header = [h.strip() for h in header]
    if header and header[0].startswith("﻿"):
        header[0] = header[0][1:]
    if tuple(header[: len(required)]) != tuple(required):
        raise ParseError(f"expected header starting with {','.join(required)}, got {','.join(header)}", 1)
    try:
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
            yield header, [c.strip() for c in row], line
    except csv.Error as exc:
        raise ParseError(str(exc), reader.line_num) from None


def parse_observations(
    file,
    grid: TimeGrid,
    *,
    max_value: float = 12.0,
    strict: bool = True,
    diagnostics: list[str] | None = None,
) -> list[Observation]:
    """Read and validate an observation CSV.

    Malformed input raises :class:`ParseError`.  Rows violating the domain
    invariants (value range, enums, dates) raise :class:`DataError` listing
    every bad row when ``strict``; otherwise they are skipped and their
    messages appended to ``diagnostics``.
    """
    out: list[Observation] = []
    problems: list[str] = []
    n_outside_centers = 0
    first_c, last_c = grid.centers[0], grid.centers[-1]
    for header, row, line in _read_rows(file, OBS_COLUMNS):
        rec = dict(zip(header, row))
        ref_date = _float(rec["ref_date"], "ref_date", line)
        value = _float(rec["value"], "value", line)
        end = _float(rec["study_end_year"], "study_end_year", line)
        extra = tuple((k, _float(rec[k], k, line)) for k in header[len(OBS_COLUMNS):])
        errs = []
        if not rec["country"]:
            errs.append("empty country")
        if not 0 < value < max_value:
            errs.append(f"value out of range ({value})")
        try:
            source = Source(rec["source"])
        except ValueError:
            errs.append(f"unknown source {rec['source']!r}")
        try:
            method = Method(rec["method"])
        except ValueError:
            errs.append(f"unknown method {rec['method']!r}")
        if not grid.t0 <= ref_date <= grid.t1:
            errs.append(f"ref_date {ref_date} outside [{grid.t0}, {grid.t1}]")
        if ref_date > end:
            errs.append(f"ref_date {ref_date} after study_end_year {end}")
        if errs:
            problems.append(f"row {line}: " + "; ".join(errs))
            continue
        if ref_date < first_c or ref_date > last_c:
            n_outside_centers += 1
        out.append(Observation(rec["country"], ref_date, value, source, method,
                               rec["study_id"], end, extra))
    if problems:
        if strict:
            raise DataError("invalid observations:\n" + "\n".join(problems))
        for msg in problems:
            logger.warning("rejected %s", msg)
        if diagnostics is not None:
            diagnostics.extend(problems)
    if n_outside_centers:
        logger.warning("%d observations lie outside the period centres and are attached to the nearest one",
                       n_outside_centers)
    return out


def parse_reference(file) -> dict[str, ReferenceSeries]:
    """Read a reference-series CSV into one :class:`ReferenceSeries` per country."""
    rows: dict[str, list[tuple[int, float]]] = {}
    for _, row, line in _read_rows(file, REF_COLUMNS):
        country, start, value = row[0], row[1], row[2]
        try:
            start_year = int(start)
        except ValueError:
            raise ParseError(f"period_start_year={start!r} is not an integer", line) from None
        v = _float(value, "value", line)
        if not v > 0:
            raise DataError(f"line {line}: reference value must be positive, got {v}")
        rows.setdefault(country, []).append((start_year, v))
    out = {}
    for country, pairs in sorted(rows.items()):
        pairs.sort()
        starts = [p for p, _ in pairs]
        if len(set(starts)) != len(starts):
            raise DataError(f"{country}: duplicate reference periods")
        out[country] = ReferenceSeries(country, tuple(starts), tuple(v for _, v in pairs))
    return out


def _fmt(x: float) -> str:
    return repr(float(x))


def write_observations(obs: Iterable[Observation], file) -> None:
    obs = list(obs)
    extra_names = list(dict.fromkeys(k for o in obs for k, _ in o.covariates))
    writer = csv.writer(file, lineterminator="\n")
    writer.writerow(list(OBS_COLUMNS) + extra_names)
    for o in obs:
        cov = dict(o.covariates)
        writer.writerow([o.country, _fmt(o.ref_date), _fmt(o.value), o.source.value, o.method.value,
                         o.study_id, _fmt(o.study_end_year)] + [_fmt(cov[k]) for k in extra_names])


def write_reference(refs: Mapping[str, ReferenceSeries] | Iterable[ReferenceSeries], file) -> None:
    series = refs.values() if isinstance(refs, Mapping) else refs
    writer = csv.writer(file, lineterminator="\n")
    writer.writerow(REF_COLUMNS)
    for r in sorted(series, key=lambda r: r.country):
        for p, v in zip(r.period_starts, r.values):
            writer.writerow([r.country, p, _fmt(v)])


def group_by_country(obs: Iterable[Observation]) -> dict[str, list[Observation]]:
    out: dict[str, list[Observation]] = {}
    for o in obs:
        out.setdefault(o.country, []).append(o)
    return {c: sorted(v, key=Observation.sort_key) for c, v in sorted(out.items())}
