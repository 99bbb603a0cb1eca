"""Fixture builders and independent oracles shared by the test modules."""

from __future__ import annotations

import math

import numpy as np

from tfrpast.data_model import Method, Observation, ReferenceSeries, Source, TimeGrid

# Nigeria cell table: (source, method, delta_hat, rho_hat, rmse, n)
NIGERIA_CELLS = (
    (Source.DHS, Method.DIRECT, 0.11, 0.38, 0.40, 28),
    (Source.DHS, Method.COHORT, -0.48, 0.46, 0.66, 10),
    (Source.CENSUS, Method.DIRECT, -0.43, 0.50, 0.66, 2),
    (Source.CENSUS, Method.COHORT, -1.02, 0.58, 1.17, 2),
    (Source.MICS, Method.DIRECT, -0.33, 0.81, 0.87, 2),
    (Source.MICS, Method.COHORT, -0.92, 0.89, 1.28, 2),
    (Source.MICS, Method.INDIRECT, 0.20, 1.35, 1.36, 15),
    (Source.MIS, Method.DIRECT, 0.22, 0.56, 0.60, 5),
    (Source.MIS, Method.INDIRECT, 0.75, 1.09, 1.32, 30),
    (Source.SURVEY, Method.DIRECT, -0.47, 0.42, 0.63, 4),
    (Source.SURVEY, Method.COHORT, -1.06, 0.49, 1.17, 8),
    (Source.SURVEY, Method.INDIRECT, 0.06, 0.95, 0.95, 15),
    (Source.SURVEY_NATIONAL, Method.DIRECT, -0.60, 0.21, 0.64, 3),
    (Source.SURVEY_NATIONAL, Method.COHORT, -1.18, 0.29, 1.22, 2),
)

GRID = TimeGrid(1950, 13, 2100)
REF_LEVEL = 6.0


def cell_residuals(delta: float, rho: float, n: int) -> np.ndarray:
    """``n`` residuals with mean ``delta`` and mean absolute deviation ``rho * sqrt(2/pi)``."""
    a = rho * math.sqrt(2.0 / math.pi)
    if n % 2 == 0:
        return np.array([delta - a, delta + a] * (n // 2))
    b = a * n / (n - 1)
    return np.array([delta] + [delta - b, delta + b] * ((n - 1) // 2))


def nigeria_fixture(country: str = "NGA", grid: TimeGrid = GRID):
    """Observations whose cell means and mean absolute deviations reproduce NIGERIA_CELLS.

    The reference series is flat at 6.0 so ``z = y - 6``; observation dates
    cycle over the period centres.
    """
    centers = grid.centers
    obs = []
    for source, method, delta, rho, _, n in NIGERIA_CELLS:
        for i, z in enumerate(cell_residuals(delta, rho, n)):
            t = float(centers[i % len(centers)])
            sid = f"{country}-{source.value}-{method.value}-{i}"
            obs.append(Observation(country, t, REF_LEVEL + float(z), source, method, sid, t))
    ref = ReferenceSeries(country, tuple(int(p) for p in grid.period_starts), (REF_LEVEL,) * grid.n_periods)
    return obs, {country: ref}


def rts_smoother(y: list[list[float]], obs_var: list[list[float]], q: float):
    """Posterior means and SDs of a Gaussian random walk with a flat initial prior.

    ``y[k]`` / ``obs_var[k]`` list the (bias-corrected) observations of period
    ``k`` and their variances; ``q`` is the step variance.  Forward Kalman
    filter in information form for the first step, then Rauch-Tung-Striebel.
    """
    n = len(y)
    m_f, p_f, m_p, p_p = [0.0] * n, [0.0] * n, [0.0] * n, [0.0] * n
    for k in range(n):
        if k == 0:
            prec, num = 0.0, 0.0        # flat prior
        else:
            m_p[k], p_p[k] = m_f[k - 1], p_f[k - 1] + q
            prec, num = 1.0 / p_p[k], m_p[k] / p_p[k]
        for yy, r in zip(y[k], obs_var[k]):
            prec += 1.0 / r
            num += yy / r
        p_f[k] = 1.0 / prec
        m_f[k] = num / prec
    m_s, p_s = list(m_f), list(p_f)
    for k in range(n - 2, -1, -1):
        gain = p_f[k] / p_p[k + 1]
        m_s[k] = m_f[k] + gain * (m_s[k + 1] - m_p[k + 1])
        p_s[k] = p_f[k] + gain ** 2 * (p_s[k + 1] - p_p[k + 1])
    return np.array(m_s), np.sqrt(np.array(p_s))


def normal_logpdf(x: float, mean: float, sd: float) -> float:
    return -0.5 * ((x - mean) / sd) ** 2 - math.log(sd * math.sqrt(2.0 * math.pi))


# --------------------------------------------------------------------------
# conjugate Phase I fixture

TOY_SIGMA = (0.25, 0.3, 0.1)
TOY_CELLS = {
    (Source.DHS, Method.DIRECT): (0.1, 0.3),
    (Source.MICS, Method.INDIRECT): (-0.2, 0.5),
}
# (period index, value, source, method)
TOY_OBS = (
    (0, 6.2, Source.DHS, Method.DIRECT),
    (0, 6.0, Source.MICS, Method.INDIRECT),
    (1, 5.7, Source.MICS, Method.INDIRECT),
    (2, 5.5, Source.DHS, Method.DIRECT),
    (2, 5.9, Source.MICS, Method.INDIRECT),
)


def toy_fit(cells=None):
    from tfrpast.bias_model import BiasModelFit, CellEstimate
    cells = TOY_CELLS if cells is None else cells
    return BiasModelFit.from_table([(None, CellEstimate(s, m, d, r, 2)) for (s, m), (d, r) in cells.items()])


def conjugate_fixture(n_periods: int = 3, toy_obs=TOY_OBS):
    """Single-country Phase I random walk with known variances and a flat initial prior.

    Returns (data, fit, priors, phase_override, oracle_mean, oracle_sd).
    """
    from tfrpast.inference import EstimationData, Priors
    grid = TimeGrid(1950, n_periods, 1950 + 5 * n_periods + 5)
    fit = toy_fit()
    obs = []
    for i, (k, y, s, m) in enumerate(toy_obs):
        if k >= n_periods:
            continue
        t = float(grid.center(k))
        obs.append(Observation("TOY", t, y, s, m, f"study{i}", t))
    ref = ReferenceSeries("TOY", tuple(int(p) for p in grid.period_starts), (6.0,) * n_periods)
    data = EstimationData(grid, obs, {"TOY": ref})
    ys = [[] for _ in range(n_periods)]
    vs = [[] for _ in range(n_periods)]
    for o in obs:
        d, r = TOY_CELLS[(o.source, o.method)]
        k = grid.period_index(int(o.ref_date) - 3)
        ys[k].append(o.value - d)
        vs[k].append(r * r)
    mean, sd = rts_smoother(ys, vs, TOY_SIGMA[0] ** 2)
    priors = Priors(f0_sd=math.inf)
    return data, fit, priors, {"TOY": [0] * n_periods}, mean, sd


# --------------------------------------------------------------------------
# command-line pipeline


def run_pipeline(root, seed: int = 5) -> dict[str, int]:
    """simulate -> estimate -> project -> plot under ``root``; returns exit codes."""
    from tfrpast.cli import main
    root = str(root)
    codes = {"simulate": main(["simulate", "--out", f"{root}/data", "--seed", str(seed), "--n-countries", "2"])}
    codes["estimate"] = main(["estimate", "--obs", f"{root}/data/observations.csv", "--ref",
                              f"{root}/data/reference.csv", "--out", f"{root}/post", "--seed", str(seed),
                              "--chains", "2", "--iter", "300", "--burnin", "100", "--thin", "2"])
    codes["project"] = main(["project", "--posterior", f"{root}/post", "--obs", f"{root}/data/observations.csv",
                             "--out", f"{root}/proj", "--seed", str(seed)])
    codes["plot"] = main(["plot", "--posterior", f"{root}/post", "--projection", f"{root}/proj",
                          "--out", f"{root}/plots"])
    return codes
