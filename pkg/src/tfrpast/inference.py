"""MCMC for the joint posterior of latent TFR, country and world parameters.

Each sweep updates every quantity one at a time:

* latent ``f[c, k]``: random-walk Metropolis (phase labels recomputed from
  the proposed trajectory), plus an optional whole-trajectory shift move;
* ``delta1..delta4``: random-walk Metropolis; ``d``, ``ar``: slice sampling;
* ``mu``: Gibbs (truncated-normal full conditional);
* world parameters and phase error SDs: random-walk Metropolis or slice
  sampling.

Random-walk step sizes are adapted during burn-in only.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

from .bias_model import BiasModelFit
from .data_model import (
    CountryParams,
    DataError,
    GlobalParams,
    LatentTrajectory,
    Observation,
    ReferenceSeries,
    TimeGrid,
    interpolation_weights,
)
from .fertility_model import LOG_2PI, TFR_FLOOR, detect_phases, phase_codes, process_logpdf

logger = logging.getLogger(__name__)

N_THETA = 5  # delta1..delta4, d
SQRT2 = math.sqrt(2.0)


class InitError(RuntimeError):
    """The log-posterior is not finite at the starting values."""


@dataclass(frozen=True)
class McmcConfig:
    n_chains: int = 3
    n_iter: int = 12_000
    burn_in: int = 2_000
    thin: int = 10
    seed: int = 0
    step_f: float = 0.1
    step_theta: float = 0.2
    step_psi: float = 0.2
    step_shift: float = 0.05
    slice_width: float = 0.25
    slice_max_steps: int = 20
    target_accept: float = 0.44
    adapt: bool = True
    shift_move: bool = True

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if self.thin < 1 or self.burn_in < 0 or self.n_iter <= self.burn_in:
            raise ValueError("need n_iter > burn_in >= 0 and thin >= 1")
        if (self.n_iter - self.burn_in) // self.thin < 100:
            raise ValueError("(n_iter - burn_in) / thin must be at least 100")

    @property
    def draws_per_chain(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin


@dataclass(frozen=True)
class Priors:
    """Hyperpriors and fixed model constants.

    World locations get normal priors, scales half-normal priors (the
    ``*_hn`` values are the half-normal scales) and the mean AR coefficient
    a uniform(0, 1) prior.  ``f0_sd = inf`` gives a flat prior on the first
    period.
    """

    f0_mean: float = 5.0
    f0_sd: float = 2.5
    psi_loc_mean: tuple[float, ...] = (1.0, 2.0, 1.5, 1.5, 0.6)
    psi_loc_sd: tuple[float, ...] = (0.5, 1.0, 1.0, 0.5, 0.3)
    psi_scale_hn: tuple[float, ...] = (0.5, 0.5, 0.5, 0.5, 0.3)
    theta_upper: tuple[float, ...] = (math.inf, math.inf, math.inf, math.inf, 2.5)
    mu_bar_mean: float = 2.1
    mu_bar_sd: float = 0.3
    sigma_mu_hn: float = 0.3
    sigma_rho_hn: float = 0.2
    sigma_eps_hn: tuple[float, float, float] = (0.5, 0.5, 0.5)
    m_tau: float = 1.0


@dataclass
class EstimationData:
    grid: TimeGrid
    observations: list[Observation]
    reference: Mapping[str, ReferenceSeries]
    countries: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.countries:
            self.countries = tuple(sorted(set(self.reference) | {o.country for o in self.observations}))
        else:
            self.countries = tuple(sorted(self.countries))
            keep = set(self.countries)
            self.observations = [o for o in self.observations if o.country in keep]


@dataclass
class WarmStart:
    """Optional starting values; anything missing falls back to defaults."""

    f: dict[str, np.ndarray] = field(default_factory=dict)
    country_params: dict[str, CountryParams] = field(default_factory=dict)
    globals: GlobalParams | None = None


@dataclass
class PosteriorSample:
    """Retained draws ordered by (chain, iteration)."""

    grid: TimeGrid
    countries: tuple[str, ...]
    f: np.ndarray           # (draws, countries, periods)
    delta: np.ndarray       # (draws, countries, 4)
    d: np.ndarray           # (draws, countries)
    mu: np.ndarray
    ar: np.ndarray
    psi_loc: np.ndarray     # (draws, 5)
    psi_scale: np.ndarray
    mu_bar: np.ndarray      # (draws,)
    sigma_mu: np.ndarray
    rho_bar: np.ndarray
    sigma_rho: np.ndarray
    sigma_eps: np.ndarray   # (draws, 3)
    chain: np.ndarray
    iteration: np.ndarray
    m_tau: float = 1.0

    @property
    def n_draws(self) -> int:
        return self.f.shape[0]

    @property
    def n_chains(self) -> int:
        return len(np.unique(self.chain))

    def country_index(self, country: str) -> int:
        try:
            return self.countries.index(country)
        except ValueError:
            raise KeyError(f"country {country!r} not in sample") from None

    def trajectory(self, draw: int, country: str) -> LatentTrajectory:
        c = self.country_index(country)
        f = self.f[draw, c]
        tau, lam, labels = detect_phases(f)
        return LatentTrajectory(country, self.grid.centers, f, tuple(labels), tau, lam)

    def country_params(self, draw: int, country: str) -> CountryParams:
        c = self.country_index(country)
        return CountryParams(tuple(float(x) for x in self.delta[draw, c]), float(self.d[draw, c]),
                             float(self.mu[draw, c]), float(self.ar[draw, c]))

    def global_params(self, draw: int) -> GlobalParams:
        return GlobalParams(tuple(map(float, self.psi_loc[draw])), tuple(map(float, self.psi_scale[draw])),
                            float(self.mu_bar[draw]), float(self.sigma_mu[draw]), float(self.rho_bar[draw]),
                            float(self.sigma_rho[draw]), tuple(map(float, self.sigma_eps[draw])), self.m_tau)

    def take(self, idx) -> "PosteriorSample":
        idx = np.asarray(idx)
        arrays = {k: getattr(self, k)[idx] for k in _DRAW_FIELDS}
        return PosteriorSample(self.grid, self.countries, m_tau=self.m_tau, **arrays)

    def subsample(self, n: int) -> "PosteriorSample":
        """Evenly spaced subset of ``n`` draws (keeps (chain, iteration) order)."""
        if n >= self.n_draws:
            return self
        if n < 1:
            raise ValueError("final sample size must be positive")
        return self.take(np.round(np.linspace(0, self.n_draws - 1, n)).astype(int))

    def by_chain(self, values: np.ndarray) -> np.ndarray:
        """Reshape a per-draw array to (chains, draws_per_chain, ...)."""
        chains = np.unique(self.chain)
        return np.stack([values[self.chain == c] for c in chains])


_DRAW_FIELDS = ("f", "delta", "d", "mu", "ar", "psi_loc", "psi_scale", "mu_bar", "sigma_mu",
                "rho_bar", "sigma_rho", "sigma_eps", "chain", "iteration")


# --------------------------------------------------------------------------
# densities


def _log_ndtr(x: float) -> float:
    if x > -20.0:
        return math.log(0.5 * math.erfc(-x / SQRT2))
    return float(log_ndtr(x))


def _log_tn_norm(m: float, s: float, a: float, b: float) -> float:
    """log(Phi((b-m)/s) - Phi((a-m)/s))."""
    alpha = (a - m) / s if a > -math.inf else -math.inf
    beta = (b - m) / s if b < math.inf else math.inf
    if beta == math.inf:
        return _log_ndtr(-alpha) if alpha > -math.inf else 0.0
    if alpha == -math.inf:
        return _log_ndtr(beta)
    if alpha > 0:
        alpha, beta = -beta, -alpha
    hi, lo = _log_ndtr(beta), _log_ndtr(alpha)
    return hi + math.log1p(-math.exp(lo - hi)) if lo < hi else -math.inf


def log_tn(x: float, m: float, s: float, a: float = -math.inf, b: float = math.inf) -> float:
    if not a <= x <= b:
        return -math.inf
    r = (x - m) / s
    return -0.5 * r * r - math.log(s) - 0.5 * LOG_2PI - _log_tn_norm(m, s, a, b)


def log_half_normal(x: float, scale: float) -> float:
    if x <= 0:
        return -math.inf
    r = x / scale
    return -0.5 * r * r - math.log(scale) + 0.5 * math.log(2.0 / math.pi)


def _tn_draw(m: float, s: float, a: float, b: float, u: float) -> float:
    """Inverse-CDF draw from N(m, s^2) truncated to [a, b] with uniform ``u``."""
    pa = float(ndtr((a - m) / s)) if a > -math.inf else 0.0
    pb = float(ndtr((b - m) / s)) if b < math.inf else 1.0
    if pb - pa < 1e-12:
        return min(max(m, a), b)
    x = m + s * float(ndtri(pa + u * (pb - pa)))
    return min(max(x, a), b)


def log_likelihood_obs(traj: LatentTrajectory, obs: Sequence[Observation], fit: BiasModelFit) -> float:
    """Sum over observations of ``log N(y; f(t) + delta_hat, rho_hat^2)``."""
    if not obs:
        return 0.0
    dh, rh = fit.resolve(obs)
    t = np.array([o.ref_date for o in obs])
    y = np.array([o.value for o in obs])
    lo, w, _ = interpolation_weights(traj.centers, t)
    f = traj.f
    if f.size == 1:
        mean = np.full(t.shape, f[0])
    else:
        mean = (1.0 - w) * f[lo] + w * f[lo + 1]
    r = (y - mean - dh) / rh
    return float(np.sum(-0.5 * r * r - np.log(rh)) - 0.5 * LOG_2PI * len(obs))


# --------------------------------------------------------------------------
# sampler internals


class _Stream:
    """Buffered uniforms/normals from one Generator (cheap scalar draws)."""

    def __init__(self, rng: np.random.Generator, size: int = 8192):
        self.rng, self.size = rng, size
        self._refill()

    def _refill(self):
        self.z = self.rng.standard_normal(self.size).tolist()
        self.u = self.rng.random(self.size).tolist()
        self.iz = self.iu = 0

    def normal(self) -> float:
        if self.iz >= self.size:
            self.z = self.rng.standard_normal(self.size).tolist()
            self.iz = 0
        x = self.z[self.iz]
        self.iz += 1
        return x

    def uniform(self) -> float:
        if self.iu >= self.size:
            self.u = self.rng.random(self.size).tolist()
            self.iu = 0
        x = self.u[self.iu]
        self.iu += 1
        # guard log(0)
        return x if x > 0.0 else 1e-300


def slice_sample(x0, logf, logf0, width, max_steps, lower, upper, stream: _Stream) -> tuple[float, float]:
    """One univariate slice-sampling update with stepping out; returns (x, logf(x))."""
    logy = logf0 + math.log(stream.uniform())
    left = x0 - width * stream.uniform()
    right = left + width
    j = int(max_steps * stream.uniform())
    k = max_steps - 1 - j
    while j > 0 and left > lower and logf(left) > logy:
        left -= width
        j -= 1
    while k > 0 and right < upper and logf(right) > logy:
        right += width
        k -= 1
    left, right = max(left, lower), min(right, upper)
    for _ in range(200):
        x1 = left + stream.uniform() * (right - left)
        l1 = logf(x1)
        if l1 > logy:
            return x1, l1
        if x1 < x0:
            left = x1
        else:
            right = x1
    return x0, logf0


class _CountryObs:
    """Observation terms of one country, indexed by the periods they touch."""

    def __init__(self, obs: Sequence[Observation], fit: BiasModelFit | None, centers: np.ndarray):
        n = len(centers)
        self.terms: list[tuple[float, int, float, float, float]] = []
        touch: list[list[int]] = [[] for _ in range(n)]
        if obs:
            if fit is None:
                raise DataError("observations supplied without a bias fit")
            dh, rh = fit.resolve(obs)
            lo, w, _ = interpolation_weights(centers, [o.ref_date for o in obs])
            for i, o in enumerate(obs):
                l, wi = int(lo[i]), float(w[i])
                if n == 1:
                    l, wi = 0, 0.0
                self.terms.append((o.value - float(dh[i]), l, wi, 1.0 / float(rh[i]), math.log(float(rh[i]))))
                if wi < 1.0:
                    touch[l].append(i)
                if wi > 0.0:
                    touch[l + 1].append(i)
        self.touch = touch

    def logpdf(self, f, idx=None) -> float:
        total = 0.0
        terms = self.terms
        for i in (range(len(terms)) if idx is None else idx):
            y, l, w, inv, logr = terms[i]
            mean = f[l] if w == 0.0 else ((1.0 - w) * f[l] + w * f[l + 1])
            r = (y - mean) * inv
            total += -0.5 * r * r - logr
        return total


class _Chain:
    def __init__(self, data: EstimationData, fit, config: McmcConfig, priors: Priors, init: WarmStart,
                 seed_seq: np.random.SeedSequence, pin_past: bool, fixed_sigma, fixed_globals, phase_override):
        self.cfg, self.pr = config, priors
        self.grid = data.grid
        self.countries = data.countries
        self.n = data.grid.n_periods
        self.pin_past = pin_past
        self.fixed_sigma = fixed_sigma is not None
        self.fixed_globals = fixed_globals is not None
        self.phase_override = {c: [int(p) for p in v] for c, v in (phase_override or {}).items()}
        self.stream = _Stream(np.random.default_rng(seed_seq))
        s = self.stream
        centers = data.grid.centers
        by_country: dict[str, list[Observation]] = {c: [] for c in self.countries}
        for o in sorted(data.observations, key=Observation.sort_key):
            if o.country not in by_country:
                raise DataError(f"observation for unknown country {o.country!r}")
            by_country[o.country].append(o)
        self.obs = [_CountryObs(by_country[c], fit, centers) for c in self.countries]

        # latent trajectories
        self.f: list[list[float]] = []
        for c in self.countries:
            if c in init.f:
                f0 = np.asarray(init.f[c], dtype=float)
            elif c in data.reference:
                f0 = data.reference[c].on_grid(data.grid)
            else:
                raise DataError(f"no starting trajectory or reference series for {c!r}")
            if f0.shape != (self.n,):
                raise DataError(f"{c}: starting trajectory has {f0.size} periods, expected {self.n}")
            self.f.append([max(float(x), TFR_FLOOR * 1.01) for x in f0])
        self.codes = [self._codes(i) for i in range(len(self.countries))]

        # world parameters
        g = fixed_globals or init.globals
        if g is not None:
            self.psi_loc, self.psi_scale = list(g.psi_loc), list(g.psi_scale)
            self.mu_bar, self.sigma_mu, self.rho_bar, self.sigma_rho = g.mu_bar, g.sigma_mu, g.rho_bar, g.sigma_rho
            self.sigma = list(g.sigma_eps)
        else:
            self.psi_loc = list(priors.psi_loc_mean)
            self.psi_scale = [0.8 * h for h in priors.psi_scale_hn]
            self.mu_bar, self.sigma_mu = priors.mu_bar_mean, 0.8 * priors.sigma_mu_hn
            self.rho_bar, self.sigma_rho = 0.8, 0.8 * priors.sigma_rho_hn
            self.sigma = [0.3 * h for h in priors.sigma_eps_hn]
        if fixed_sigma is not None:
            self.sigma = [float(x) for x in fixed_sigma]
        self.m_tau = fixed_globals.m_tau if fixed_globals is not None else priors.m_tau

        # country parameters: warm start or a draw from the world distribution
        self.theta: list[list[float]] = []
        self.mu: list[float] = []
        self.ar: list[float] = []
        for c in self.countries:
            p = init.country_params.get(c)
            if p is not None:
                self.theta.append(list(p.delta) + [p.d])
                self.mu.append(p.mu)
                self.ar.append(p.ar)
                continue
            th = [_tn_draw(self.psi_loc[i], self.psi_scale[i], 0.0, priors.theta_upper[i], s.uniform())
                  for i in range(N_THETA)]
            th[4] = max(th[4], 1e-3)
            self.theta.append(th)
            self.mu.append(_tn_draw(self.mu_bar, self.sigma_mu, 0.0, math.inf, s.uniform()))
            self.ar.append(min(max(_tn_draw(self.rho_bar, self.sigma_rho, 0.0, 1.0, s.uniform()), 1e-3), 1 - 1e-3))

        nc = len(self.countries)
        self.step_f = [[config.step_f] * self.n for _ in range(nc)]
        self.step_theta = [[config.step_theta] * 4 for _ in range(nc)]
        self.step_shift = [config.step_shift] * nc
        self.step_psi = [config.step_psi] * N_THETA
        self.proc = [self._proc(i) for i in range(nc)]
        self._check_init()

    # -- pieces of the log posterior ------------------------------------

    def _codes(self, i, f=None):
        ov = self.phase_override.get(self.countries[i])
        if ov is not None:
            return ov
        return phase_codes(self.f[i] if f is None else f)

    def _proc(self, i, f=None, codes=None, theta=None, mu=None, ar=None, sigma=None, only=None):
        th = self.theta[i] if theta is None else theta
        return process_logpdf(
            self.f[i] if f is None else f,
            self.codes[i] if codes is None else codes,
            th[:4], th[4],
            self.mu[i] if mu is None else mu,
            self.ar[i] if ar is None else ar,
            self.sigma if sigma is None else sigma,
            self.m_tau, only,
        )

    def _lp_f0(self, x: float) -> float:
        if math.isinf(self.pr.f0_sd):
            return 0.0
        r = (x - self.pr.f0_mean) / self.pr.f0_sd
        return -0.5 * r * r

    def _lp_theta_prior(self, i, th=None) -> float:
        th = self.theta[i] if th is None else th
        return sum(log_tn(th[j], self.psi_loc[j], self.psi_scale[j], 0.0, self.pr.theta_upper[j])
                   for j in range(N_THETA))

    def _check_init(self):
        for i, c in enumerate(self.countries):
            blocks = {
                "latent f": self._lp_f0(self.f[i][0]),
                "observations": self.obs[i].logpdf(self.f[i]),
                "process model": self.proc[i],
                "country parameters": self._lp_theta_prior(i)
                + log_tn(self.mu[i], self.mu_bar, self.sigma_mu, 0.0)
                + log_tn(self.ar[i], self.rho_bar, self.sigma_rho, 0.0, 1.0),
            }
            for name, v in blocks.items():
                if not math.isfinite(v):
                    raise InitError(f"non-finite log-posterior at initial values: block '{name}' for {c}")

    # -- updates -----------------------------------------------------------

    def _adapt(self, step, accepted, it):
        if not (self.cfg.adapt and it < self.cfg.burn_in):
            return step
        gamma = min(0.5, 1.0 / math.sqrt(it + 1.0))
        new = step * math.exp(gamma * ((1.0 if accepted else 0.0) - self.cfg.target_accept))
        return min(max(new, 1e-4), 5.0)

    def _update_f(self, i, it):
        s = self.stream
        f = self.f[i]
        obs = self.obs[i]
        for k in range(self.n):
            step = self.step_f[i][k]
            x = f[k] + step * s.normal()
            accepted = False
            if x > TFR_FLOOR:
                idx = obs.touch[k]
                old_x = f[k]
                cur = obs.logpdf(f, idx) + self.proc[i] + (self._lp_f0(old_x) if k == 0 else 0.0)
                f[k] = x
                codes = self._codes(i)
                proc = self._proc(i, codes=codes)
                new = obs.logpdf(f, idx) + proc + (self._lp_f0(x) if k == 0 else 0.0)
                if math.log(s.uniform()) < new - cur:
                    self.codes[i], self.proc[i] = codes, proc
                    accepted = True
                else:
                    f[k] = old_x
            self.step_f[i][k] = self._adapt(step, accepted, it)

    def _update_shift(self, i, it):
        s = self.stream
        f = self.f[i]
        step = self.step_shift[i]
        delta = step * s.normal()
        prop = [x + delta for x in f]
        accepted = False
        if min(prop) > TFR_FLOOR:
            obs = self.obs[i]
            cur = obs.logpdf(f) + self.proc[i] + self._lp_f0(f[0])
            codes = self._codes(i, prop)
            proc = self._proc(i, f=prop, codes=codes)
            new = obs.logpdf(prop) + proc + self._lp_f0(prop[0])
            if math.log(s.uniform()) < new - cur:
                self.f[i], self.codes[i], self.proc[i] = prop, codes, proc
                accepted = True
        self.step_shift[i] = self._adapt(step, accepted, it)

    def _update_theta(self, i, it):
        s = self.stream
        th = self.theta[i]
        for j in range(4):
            step = self.step_theta[i][j]
            x = th[j] + step * s.normal()
            accepted = False
            if 0.0 <= x <= self.pr.theta_upper[j]:
                prop = list(th)
                prop[j] = x
                cur = self._proc(i, only=1) + log_tn(th[j], self.psi_loc[j], self.psi_scale[j], 0.0,
                                                      self.pr.theta_upper[j])
                new = self._proc(i, theta=prop, only=1) + log_tn(x, self.psi_loc[j], self.psi_scale[j], 0.0,
                                                                  self.pr.theta_upper[j])
                if math.log(s.uniform()) < new - cur:
                    th[j] = x
                    accepted = True
            self.step_theta[i][j] = self._adapt(step, accepted, it)

        # d: slice sampling on (0, upper]
        def logf(x):
            if not 0.0 < x <= self.pr.theta_upper[4]:
                return -math.inf
            prop = th[:4] + [x]
            return self._proc(i, theta=prop, only=1) + log_tn(x, self.psi_loc[4], self.psi_scale[4], 0.0,
                                                               self.pr.theta_upper[4])
        th[4], _ = slice_sample(th[4], logf, logf(th[4]), self.cfg.slice_width, self.cfg.slice_max_steps,
                                0.0, self.pr.theta_upper[4], s)

    def _update_mu_ar(self, i):
        s = self.stream
        f, codes = self.f[i], self.codes[i]
        ar = self.ar[i]
        sd = self.sigma[2]
        # Gibbs for mu: f[k+1] - ar f[k] = (1 - ar) mu + e over Phase III steps
        prec = 1.0 / self.sigma_mu ** 2
        num = self.mu_bar * prec
        for k in range(self.n - 1):
            if codes[k] == 2:
                prec += (1.0 - ar) ** 2 / sd ** 2
                num += (1.0 - ar) * (f[k + 1] - ar * f[k]) / sd ** 2
        self.mu[i] = _tn_draw(num / prec, 1.0 / math.sqrt(prec), 0.0, math.inf, s.uniform())

        if 2 in codes[: self.n - 1]:
            def logf(x):
                if not 0.0 < x < 1.0:
                    return -math.inf
                return self._proc(i, ar=x, only=2) + log_tn(x, self.rho_bar, self.sigma_rho, 0.0, 1.0)
        else:
            def logf(x):
                return log_tn(x, self.rho_bar, self.sigma_rho, 0.0, 1.0) if 0.0 < x < 1.0 else -math.inf
        self.ar[i], _ = slice_sample(ar, logf, logf(ar), self.cfg.slice_width, self.cfg.slice_max_steps,
                                     0.0, 1.0, s)
        self.proc[i] = self._proc(i)

    def _update_globals(self, it):
        s = self.stream
        pr = self.pr
        nc = len(self.countries)
        w, m = self.cfg.slice_width, self.cfg.slice_max_steps

        if not self.fixed_globals:
            for j in range(N_THETA):
                up = pr.theta_upper[j]
                vals = [self.theta[i][j] for i in range(nc)]

                def lik(loc, sc):
                    return sum(log_tn(v, loc, sc, 0.0, up) for v in vals)

                step = self.step_psi[j]
                loc = self.psi_loc[j]
                x = loc + step * s.normal()
                r_cur = (loc - pr.psi_loc_mean[j]) / pr.psi_loc_sd[j]
                r_new = (x - pr.psi_loc_mean[j]) / pr.psi_loc_sd[j]
                cur = lik(loc, self.psi_scale[j]) - 0.5 * r_cur * r_cur
                new = lik(x, self.psi_scale[j]) - 0.5 * r_new * r_new
                accepted = math.log(s.uniform()) < new - cur
                if accepted:
                    self.psi_loc[j] = x
                self.step_psi[j] = self._adapt(step, accepted, it)

                def logf_sc(sc, j=j):
                    return lik(self.psi_loc[j], sc) + log_half_normal(sc, pr.psi_scale_hn[j]) if sc > 0 else -math.inf
                self.psi_scale[j], _ = slice_sample(self.psi_scale[j], logf_sc, logf_sc(self.psi_scale[j]), w, m,
                                                    0.0, math.inf, s)

            def logf_mubar(x):
                r = (x - pr.mu_bar_mean) / pr.mu_bar_sd
                return sum(log_tn(v, x, self.sigma_mu, 0.0) for v in self.mu) - 0.5 * r * r
            self.mu_bar, _ = slice_sample(self.mu_bar, logf_mubar, logf_mubar(self.mu_bar), w, m,
                                          -math.inf, math.inf, s)

            def logf_sigmu(x):
                if x <= 0:
                    return -math.inf
                return sum(log_tn(v, self.mu_bar, x, 0.0) for v in self.mu) + log_half_normal(x, pr.sigma_mu_hn)
            self.sigma_mu, _ = slice_sample(self.sigma_mu, logf_sigmu, logf_sigmu(self.sigma_mu), w, m,
                                            0.0, math.inf, s)

            def logf_rhobar(x):
                if not 0.0 < x < 1.0:
                    return -math.inf
                return sum(log_tn(v, x, self.sigma_rho, 0.0, 1.0) for v in self.ar)
            self.rho_bar, _ = slice_sample(self.rho_bar, logf_rhobar, logf_rhobar(self.rho_bar), w, m, 0.0, 1.0, s)

            def logf_sigrho(x):
                if x <= 0:
                    return -math.inf
                return sum(log_tn(v, self.rho_bar, x, 0.0, 1.0) for v in self.ar) + log_half_normal(x, pr.sigma_rho_hn)
            self.sigma_rho, _ = slice_sample(self.sigma_rho, logf_sigrho, logf_sigrho(self.sigma_rho), w, m,
                                             0.0, math.inf, s)

        if not self.fixed_sigma and not self.fixed_globals:
            for p in range(3):
                if not any(p in codes[: self.n - 1] for codes in self.codes):
                    # no steps in this phase: draw from the prior
                    self.sigma[p] = abs(pr.sigma_eps_hn[p] * s.normal())
                    self.sigma[p] = max(self.sigma[p], 1e-4)
                    continue

                def logf_sig(x, p=p):
                    if x <= 1e-4:
                        return -math.inf
                    sig = list(self.sigma)
                    sig[p] = x
                    return (sum(self._proc(i, sigma=sig, only=p) for i in range(nc))
                            + log_half_normal(x, pr.sigma_eps_hn[p]))
                self.sigma[p], _ = slice_sample(self.sigma[p], logf_sig, logf_sig(self.sigma[p]), w, m,
                                                1e-4, math.inf, s)
            self.proc = [self._proc(i) for i in range(nc)]

    def sweep(self, it):
        for i in range(len(self.countries)):
            if not self.pin_past:
                self._update_f(i, it)
                if self.cfg.shift_move:
                    self._update_shift(i, it)
            self._update_theta(i, it)
            self._update_mu_ar(i)
        self._update_globals(it)

    def snapshot(self):
        return (
            [list(f) for f in self.f],
            [list(t[:4]) for t in self.theta],
            [t[4] for t in self.theta],
            list(self.mu), list(self.ar),
            list(self.psi_loc), list(self.psi_scale),
            self.mu_bar, self.sigma_mu, self.rho_bar, self.sigma_rho, list(self.sigma),
        )


def _run_chain(args):
    (data, fit, config, priors, init, seed_seq, pin_past, fixed_sigma, fixed_globals, phase_override, chain_id) = args
    chain = _Chain(data, fit, config, priors, init, seed_seq, pin_past, fixed_sigma, fixed_globals, phase_override)
    snaps, iters = [], []
    for it in range(config.n_iter):
        chain.sweep(it)
        if it >= config.burn_in and (it - config.burn_in + 1) % config.thin == 0:
            snaps.append(chain.snapshot())
            iters.append(it + 1)
    return chain_id, snaps[: config.draws_per_chain], iters[: config.draws_per_chain], chain.m_tau


def run_mcmc(
    data: EstimationData,
    fit: BiasModelFit | None,
    config: McmcConfig | None = None,
    init: WarmStart | None = None,
    priors: Priors | None = None,
    *,
    pin_past: bool = False,
    fixed_sigma: Sequence[float] | None = None,
    fixed_globals: GlobalParams | None = None,
    phase_override: Mapping[str, Sequence[int]] | None = None,
    n_jobs: int = 1,
) -> PosteriorSample:
    """Sample the joint posterior.

    ``pin_past`` holds the latent trajectories at their starting values (the
    reference series by default), which reproduces a model conditioned on
    the reference estimates.  ``fixed_sigma`` / ``fixed_globals`` hold the
    phase error SDs / all world parameters fixed.  ``phase_override`` forces
    phase codes for given countries.
    """
    config = config or McmcConfig()
    priors = priors or Priors()
    init = init or WarmStart()
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    jobs = [(data, fit, config, priors, init, seeds[c], pin_past, fixed_sigma, fixed_globals, phase_override, c)
            for c in range(config.n_chains)]
    if n_jobs > 1 and config.n_chains > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_run_chain, jobs))
    else:
        results = [_run_chain(j) for j in jobs]
    results.sort(key=lambda r: r[0])

    cols = [[] for _ in range(12)]
    chain_ids, iters = [], []
    for chain_id, snaps, its, m_tau in results:
        for snap in snaps:
            for col, v in zip(cols, snap):
                col.append(v)
        chain_ids += [chain_id] * len(snaps)
        iters += its
    arr = [np.asarray(c, dtype=float) for c in cols]
    return PosteriorSample(
        grid=data.grid, countries=data.countries,
        f=arr[0], delta=arr[1], d=arr[2], mu=arr[3], ar=arr[4],
        psi_loc=arr[5], psi_scale=arr[6], mu_bar=arr[7], sigma_mu=arr[8], rho_bar=arr[9],
        sigma_rho=arr[10], sigma_eps=arr[11],
        chain=np.asarray(chain_ids, dtype=int), iteration=np.asarray(iters, dtype=int),
        m_tau=results[0][3],
    )


# --------------------------------------------------------------------------
# convergence diagnostics


def autocorrelation(x: np.ndarray) -> np.ndarray:
    """Sample autocorrelation at all lags (FFT based)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    m = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(xc, m)
    acov = np.fft.irfft(spec * np.conj(spec), m)[:n] / n
    if acov[0] <= 0:
        out = np.zeros(n)
        out[0] = 1.0
        return out
    return acov / acov[0]


def psrf(chains: np.ndarray, split: bool = True) -> float:
    """Potential scale reduction factor for one scalar, chains shape (m, n).

    Uses ``R^2 = 1 + B / (n W)`` with ``B`` the between-chain variance
    (times n) and ``W`` the mean within-chain variance, so chains with
    identical means give exactly 1.
    """
    chains = np.asarray(chains, dtype=float)
    if split:
        half = chains.shape[1] // 2
        chains = np.concatenate([chains[:, :half], chains[:, chains.shape[1] - half:]], axis=0)
    m, n = chains.shape
    if m < 2 or n < 2:
        return float("nan")
    means = chains.mean(axis=1)
    W = chains.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W <= 0:
        return 1.0 if B <= 0 else float("inf")
    return float(math.sqrt(1.0 + B / (n * W)))


def ess(chains: np.ndarray) -> float:
    """Multi-chain effective sample size (Geyer initial monotone sequence)."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    m, n = chains.shape
    if n < 4:
        return float(m * n)
    W = chains.var(axis=1, ddof=1).mean()
    if W <= 0:
        return float(m * n)
    var_plus = W * (n - 1) / n + (chains.mean(axis=1).var(ddof=1) if m > 1 else 0.0)
    acov = np.mean([autocorrelation(c) * c.var() for c in chains], axis=0)
    rho = 1.0 - (W - acov) / var_plus
    rho[0] = 1.0
    # sum of consecutive pairs, truncated at first negative pair, made monotone
    total, prev_pair = 0.0, math.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev_pair)
        total += pair
        prev_pair = pair
        t += 2
    tau = -1.0 + 2.0 * total
    tau = max(tau, 1.0 / math.log10(m * n)) if m * n > 10 else max(tau, 1e-3)
    return float(m * n / tau)


@dataclass
class DiagnosticRow:
    parameter: str
    psrf: float
    split_psrf: float
    ess: float
    acf: tuple[float, ...]
    flagged: bool


@dataclass
class DiagnosticsReport:
    rows: list[DiagnosticRow]
    n_chains: int
    draws_per_chain: int
    threshold: float = 1.1
    notice: str = ""

    @property
    def flagged(self) -> list[DiagnosticRow]:
        return [r for r in self.rows if r.flagged]

    @property
    def ok(self) -> bool:
        return not self.flagged

    def max_psrf(self, prefix: str = "") -> float:
        vals = [r.split_psrf for r in self.rows if r.parameter.startswith(prefix) and math.isfinite(r.split_psrf)]
        return max(vals) if vals else float("nan")

    def write_csv(self, file, lags=(1, 5, 10)):
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(["parameter", "psrf", "split_psrf", "ess"] + [f"acf{k}" for k in lags] + ["flag"])
        for r in self.rows:
            writer.writerow([r.parameter, f"{r.psrf:.4f}", f"{r.split_psrf:.4f}", f"{r.ess:.1f}"]
                            + [f"{a:.4f}" for a in r.acf] + [int(r.flagged)])

    def summary(self) -> str:
        lines = [f"chains: {self.n_chains}, draws per chain: {self.draws_per_chain}"]
        if self.notice:
            lines.append(self.notice)
        lines.append(f"parameters: {len(self.rows)}, flagged (PSRF > {self.threshold}): {len(self.flagged)}")
        for r in self.flagged:
            lines.append(f"  {r.parameter}: split PSRF {r.split_psrf:.3f}, ESS {r.ess:.0f}")
        return "\n".join(lines) + "\n"


def _scalar_series(sample: PosteriorSample):
    g = sample.grid
    for ci, c in enumerate(sample.countries):
        for k in range(g.n_periods):
            yield f"f[{c},{g.period_start(k)}]", sample.f[:, ci, k]
        for j in range(4):
            yield f"delta{j + 1}[{c}]", sample.delta[:, ci, j]
        yield f"d[{c}]", sample.d[:, ci]
        yield f"mu[{c}]", sample.mu[:, ci]
        yield f"ar[{c}]", sample.ar[:, ci]
    for p, name in enumerate(("I", "II", "III")):
        yield f"sigma_{name}", sample.sigma_eps[:, p]
    for j in range(N_THETA):
        yield f"psi_loc{j + 1}", sample.psi_loc[:, j]
        yield f"psi_scale{j + 1}", sample.psi_scale[:, j]
    yield "mu_bar", sample.mu_bar
    yield "sigma_mu", sample.sigma_mu
    yield "rho_bar", sample.rho_bar
    yield "sigma_rho", sample.sigma_rho


def diagnostics(sample: PosteriorSample, threshold: float = 1.1, lags: Sequence[int] = (1, 5, 10),
                prefix: str | None = None) -> DiagnosticsReport:
    """PSRF (plain and split-chain), ESS and lag autocorrelations per scalar."""
    n_chains = sample.n_chains
    rows = []
    notice = "" if n_chains >= 2 else "single chain: between-chain statistics omitted"
    for name, values in _scalar_series(sample):
        if prefix is not None and not name.startswith(prefix):
            continue
        chains = sample.by_chain(values)
        if np.ptp(values) == 0:
            r = s = 1.0
        elif n_chains >= 2:
            r, s = psrf(chains, split=False), psrf(chains, split=True)
        else:
            r, s = float("nan"), psrf(chains, split=True)
        acf_all = np.mean([autocorrelation(c) for c in chains], axis=0)
        acf = tuple(float(acf_all[k]) if k < acf_all.size else float("nan") for k in lags)
        flagged = n_chains >= 2 and math.isfinite(s) and s > threshold
        rows.append(DiagnosticRow(name, r, s, ess(chains), acf, flagged))
    per_chain = int(np.sum(sample.chain == sample.chain[0])) if sample.n_draws else 0
    return DiagnosticsReport(rows, n_chains, per_chain, threshold, notice)


# --------------------------------------------------------------------------
# persistence


def write_posterior(sample: PosteriorSample, outdir) -> None:
    """Write ``posterior_f.csv``, ``posterior_params.csv`` and ``posterior_globals.csv``."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    g = sample.grid
    with open(out / "posterior_f.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "iter", "country", "period", "f"])
        for i in range(sample.n_draws):
            ch, it = int(sample.chain[i]), int(sample.iteration[i])
            for ci, c in enumerate(sample.countries):
                for k in range(g.n_periods):
                    w.writerow([ch, it, c, g.period_start(k), repr(float(sample.f[i, ci, k]))])
    with open(out / "posterior_params.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "iter", "country", "delta1", "delta2", "delta3", "delta4", "d", "mu", "ar"])
        for i in range(sample.n_draws):
            ch, it = int(sample.chain[i]), int(sample.iteration[i])
            for ci, c in enumerate(sample.countries):
                vals = list(sample.delta[i, ci]) + [sample.d[i, ci], sample.mu[i, ci], sample.ar[i, ci]]
                w.writerow([ch, it, c] + [repr(float(v)) for v in vals])
    with open(out / "posterior_globals.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "iter"] + [f"psi_loc{j + 1}" for j in range(N_THETA)]
                   + [f"psi_scale{j + 1}" for j in range(N_THETA)]
                   + ["mu_bar", "sigma_mu", "rho_bar", "sigma_rho", "sigma_I", "sigma_II", "sigma_III", "m_tau"])
        for i in range(sample.n_draws):
            vals = (list(sample.psi_loc[i]) + list(sample.psi_scale[i])
                    + [sample.mu_bar[i], sample.sigma_mu[i], sample.rho_bar[i], sample.sigma_rho[i]]
                    + list(sample.sigma_eps[i]) + [sample.m_tau])
            w.writerow([int(sample.chain[i]), int(sample.iteration[i])] + [repr(float(v)) for v in vals])


def read_posterior(outdir, grid: TimeGrid) -> PosteriorSample:
    """Inverse of :func:`write_posterior`."""
    out = Path(outdir)
    for name in ("posterior_f.csv", "posterior_params.csv", "posterior_globals.csv"):
        if not (out / name).exists():
            raise DataError(f"missing {name} in {out}")
    draws: dict[tuple[int, int], int] = {}
    countries: list[str] = []
    with open(out / "posterior_globals.csv", newline="") as fh:
        glob = list(csv.DictReader(fh))
    for i, rec in enumerate(glob):
        draws[(int(rec["chain"]), int(rec["iter"]))] = i
    nd = len(glob)
    with open(out / "posterior_params.csv", newline="") as fh:
        params = list(csv.DictReader(fh))
    countries = sorted({r["country"] for r in params})
    cidx = {c: i for i, c in enumerate(countries)}
    nc, n = len(countries), grid.n_periods
    f = np.full((nd, nc, n), np.nan)
    delta = np.zeros((nd, nc, 4))
    d, mu, ar = np.zeros((nd, nc)), np.zeros((nd, nc)), np.zeros((nd, nc))
    for r in params:
        i, c = draws[(int(r["chain"]), int(r["iter"]))], cidx[r["country"]]
        delta[i, c] = [float(r[f"delta{j + 1}"]) for j in range(4)]
        d[i, c], mu[i, c], ar[i, c] = float(r["d"]), float(r["mu"]), float(r["ar"])
    with open(out / "posterior_f.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            k = grid.period_index(int(r["period"]))
            if not 0 <= k < n:
                raise DataError(f"posterior period {r['period']} outside the estimation grid")
            f[draws[(int(r["chain"]), int(r["iter"]))], cidx[r["country"]], k] = float(r["f"])
    if np.isnan(f).any():
        raise DataError("posterior_f.csv does not cover every draw/country/period of the grid")

    def col(name):
        return np.array([float(r[name]) for r in glob])

    return PosteriorSample(
        grid=grid, countries=tuple(countries), f=f, delta=delta, d=d, mu=mu, ar=ar,
        psi_loc=np.stack([col(f"psi_loc{j + 1}") for j in range(N_THETA)], axis=1),
        psi_scale=np.stack([col(f"psi_scale{j + 1}") for j in range(N_THETA)], axis=1),
        mu_bar=col("mu_bar"), sigma_mu=col("sigma_mu"), rho_bar=col("rho_bar"), sigma_rho=col("sigma_rho"),
        sigma_eps=np.stack([col("sigma_I"), col("sigma_II"), col("sigma_III")], axis=1),
        chain=np.array([int(r["chain"]) for r in glob]), iteration=np.array([int(r["iter"]) for r in glob]),
        m_tau=float(glob[0]["m_tau"]) if glob else 1.0,
    )


def warm_start_from(sample: PosteriorSample, draw: int = -1) -> WarmStart:
    """Starting values taken from one draw of an earlier posterior."""
    return WarmStart(
        f={c: sample.f[draw, i].copy() for i, c in enumerate(sample.countries)},
        country_params={c: sample.country_params(draw, c) for c in sample.countries},
        globals=sample.global_params(draw),
    )
