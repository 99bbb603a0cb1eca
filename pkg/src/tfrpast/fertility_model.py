"""Three-phase TFR process model.

Phase I (pre-transition) is a driftless random walk, Phase II (transition)
a random walk whose drift is the double-logistic decrement ``g``, and
Phase III (post-transition) an AR(1) around a long-run mean.

Phase labels follow the convention ``phase[k]`` = regime that generates
``f[k+1]`` from ``f[k]``.  They are assigned by a causal rule, so labels up
to period ``k`` only depend on ``f[0..k]``:

* the trajectory starts in Phase II when ``f[0] <= 5.5``, otherwise in
  Phase I; Phase II begins at the first period whose value falls below the
  running maximum (i.e. the period after the peak);
* Phase III begins at the first period ending two successive increases,
  both occurring in Phase II and below 2.0 children.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data_model import CountryParams, GlobalParams, Phase

LN9_2 = 2.0 * math.log(9.0)
START_THRESHOLD = 5.5
END_THRESHOLD = 2.0
LOG_2PI = math.log(2.0 * math.pi)
TFR_FLOOR = 0.5


def _logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _rate(width: float) -> float:
    return LN9_2 / max(width, 1e-12)


def decline_g(f, delta: Sequence[float], d: float):
    """Expected five-year decrement at TFR ``f``.

    ``g = d * [L((f - D4/2) * 2ln9/D4) - L((f - S + D1/2) * 2ln9/D1)]`` with
    ``L`` the logistic and ``S = D1 + D2 + D3 + D4``, clipped to ``[0, d]``.
    Each logistic rises from 10% to 90% over its width.  Accepts scalars or
    arrays.
    """
    d1, _, _, d4 = delta
    s = float(sum(delta))
    if np.ndim(f) == 0:
        f = float(f)
        if not math.isfinite(f):
            raise ValueError(f"non-finite TFR {f}")
        g = d * (_logistic((f - 0.5 * d4) * _rate(d4)) - _logistic((f - s + 0.5 * d1) * _rate(d1)))
        return min(max(g, 0.0), d)
    f = np.asarray(f, dtype=float)
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite TFR")
    g = d * (expit((f - 0.5 * d4) * _rate(d4)) - expit((f - s + 0.5 * d1) * _rate(d1)))
    return np.clip(g, 0.0, d)


def decline_g_vec(f: np.ndarray, delta: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Elementwise ``g`` with per-element parameters (``delta`` has shape (n, 4))."""
    s = delta.sum(axis=1)
    d1, d4 = delta[:, 0], delta[:, 3]
    up = expit((f - 0.5 * d4) * (LN9_2 / np.maximum(d4, 1e-12)))
    down = expit((f - s + 0.5 * d1) * (LN9_2 / np.maximum(d1, 1e-12)))
    return np.clip(d * (up - down), 0.0, d)


def step_mean(f_prev: float, phase: Phase, params: CountryParams) -> float:
    if phase == Phase.I:
        return f_prev
    if phase == Phase.II:
        return f_prev - decline_g(f_prev, params.delta, params.d)
    return params.mu + params.ar * (f_prev - params.mu)


def step_density(
    f_prev: float,
    f_next: float,
    phase: Phase,
    params: CountryParams,
    globals_: GlobalParams,
    first_transition: bool = False,
) -> float:
    """Log-density of ``f_next`` given ``f_prev`` under ``phase``."""
    if not (f_prev > 0 and f_next > 0):
        raise ValueError("TFR values must be positive")
    sd = globals_.sigma_eps[int(phase)]
    if first_transition and phase == Phase.II:
        sd *= globals_.m_tau
    if not sd > 0:
        raise ValueError(f"non-positive error SD {sd}")
    r = (f_next - step_mean(f_prev, phase, params)) / sd
    return -0.5 * r * r - math.log(sd) - 0.5 * LOG_2PI


def detect_phases(f: Sequence[float]) -> tuple[int | None, int | None, list[Phase]]:
    """Phase labels for a trajectory; returns ``(tau, lam, labels)``.

    ``tau``/``lam`` are the first indices in Phase II/III, or ``None``.
    """
    labels = [int(x) for x in phase_codes(f)]
    tau = next((k for k, p in enumerate(labels) if p >= 1), None)
    lam = next((k for k, p in enumerate(labels) if p == 2), None)
    return tau, lam, [Phase(p) for p in labels]


def phase_codes(f: Sequence[float]) -> list[int]:
    """Integer phase codes (0, 1, 2); the fast path used inside the sampler."""
    n = len(f)
    if n == 0:
        return []
    out = [0] * n
    prev = float(f[0])
    phase = 1 if prev <= START_THRESHOLD else 0
    run_max = prev
    n_inc = 0
    out[0] = phase
    for k in range(1, n):
        x = float(f[k])
        if phase == 0:
            if x < run_max:
                phase = 1
                n_inc = 0
            elif x > run_max:
                run_max = x
        elif phase == 1:
            if x > prev and x < END_THRESHOLD:
                n_inc += 1
                if n_inc >= 2:
                    phase = 2
            else:
                n_inc = 0
        out[k] = phase
        prev = x
    return out


class PhaseTracker:
    """Vectorised continuation of :func:`phase_codes` across many trajectories.

    Initialise from past trajectories (shape ``(n_draws, n_periods)``), then
    call :meth:`update` with each newly simulated value.
    """

    def __init__(self, past: np.ndarray):
        past = np.atleast_2d(np.asarray(past, dtype=float))
        m, n = past.shape
        self.phase = np.where(past[:, 0] <= START_THRESHOLD, 1, 0)
        self.run_max = past[:, 0].copy()
        self.n_inc = np.zeros(m, dtype=int)
        self.prev = past[:, 0].copy()
        self.tau = np.where(self.phase >= 1, 0, -1)
        self.lam = np.full(m, -1)
        self.k = 0
        for k in range(1, n):
            self.update(past[:, k])

    def update(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        self.k += 1
        in1 = self.phase == 0
        decline = in1 & (x < self.run_max)
        self.run_max = np.where(in1 & (x > self.run_max), x, self.run_max)
        in2 = self.phase == 1
        inc = in2 & (x > self.prev) & (x < END_THRESHOLD)
        self.n_inc = np.where(inc, self.n_inc + 1, 0)
        to3 = in2 & (self.n_inc >= 2)
        self.phase = np.where(decline, 1, np.where(to3, 2, self.phase))
        self.n_inc = np.where(decline, 0, self.n_inc)
        self.tau = np.where(decline, self.k, self.tau)
        self.lam = np.where(to3, self.k, self.lam)
        self.prev = x
        return self.phase


def process_logpdf(
    f: Sequence[float],
    codes: Sequence[int],
    delta: Sequence[float],
    d: float,
    mu: float,
    ar: float,
    sigma: Sequence[float],
    m_tau: float = 1.0,
    only: int | None = None,
) -> float:
    """Sum of step log-densities along a trajectory.

    ``only`` restricts the sum to steps of one phase code.  The first
    Phase II step (out of ``tau``) uses ``sigma[1] * m_tau``.
    """
    n = len(f)
    d1, _, _, d4 = delta
    s = d1 + delta[1] + delta[2] + d4
    r1, r4 = _rate(d1), _rate(d4)
    total = 0.0
    prev_code = -1
    for k in range(n - 1):
        c = codes[k]
        first_ii = c == 1 and prev_code != 1
        prev_code = c
        if only is not None and c != only:
            continue
        x = f[k]
        if c == 0:
            mean = x
            sd = sigma[0]
        elif c == 1:
            g = d * (_logistic((x - 0.5 * d4) * r4) - _logistic((x - s + 0.5 * d1) * r1))
            mean = x - min(max(g, 0.0), d)
            sd = sigma[1] * m_tau if first_ii else sigma[1]
        else:
            mean = mu + ar * (x - mu)
            sd = sigma[2]
        r = (f[k + 1] - mean) / sd
        total += -0.5 * r * r - math.log(sd)
    n_terms = (n - 1) if only is None else sum(1 for c in codes[: n - 1] if c == only)
    return total - 0.5 * LOG_2PI * n_terms
