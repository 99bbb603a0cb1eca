import math
import random

import numpy as np
import pytest

from helpers import TOY_SIGMA, conjugate_fixture, normal_logpdf, toy_fit
from tfrpast.data_model import (
    CountryParams,
    GlobalParams,
    LatentTrajectory,
    Method,
    Observation,
    ReferenceSeries,
    Source,
    TimeGrid,
)
from tfrpast.inference import (
    EstimationData,
    InitError,
    McmcConfig,
    PosteriorSample,
    Priors,
    WarmStart,
    _Stream,
    diagnostics,
    ess,
    log_likelihood_obs,
    psrf,
    read_posterior,
    run_mcmc,
    slice_sample,
    warm_start_from,
    write_posterior,
)
from tfrpast.validation import synthetic_corpus, synthetic_fit

SMALL = McmcConfig(n_chains=2, n_iter=600, burn_in=100, thin=5, seed=11)


def mc_se(sample, values):
    return values.std() / math.sqrt(ess(sample.by_chain(values)))


# --------------------------------------------------------------------------
# likelihood


def test_log_likelihood_empty_and_mode():
    fit = toy_fit()
    traj = LatentTrajectory("TOY", np.array([1953.0, 1958.0]), np.array([6.0, 5.5]))
    assert log_likelihood_obs(traj, [], fit) == 0.0
    o = Observation("TOY", 1953.0, 6.1, Source.DHS, Method.DIRECT, "s", 1953.0)
    assert log_likelihood_obs(traj, [o], fit) == pytest.approx(-0.5 * math.log(2 * math.pi * 0.3 ** 2), abs=1e-12)


def test_log_likelihood_dual_implementation():
    fit = toy_fit()
    traj = LatentTrajectory("TOY", np.array([1953.0, 1958.0, 1963.0]), np.array([6.0, 5.5, 5.1]))
    obs = [Observation("TOY", 1954.0, 6.3, Source.DHS, Method.DIRECT, "a", 1955.0),
           Observation("TOY", 1960.5, 4.9, Source.MICS, Method.INDIRECT, "b", 1961.0),
           Observation("TOY", 1963.0, 5.0, Source.DHS, Method.DIRECT, "c", 1963.0)]
    ref = (normal_logpdf(6.3, (4 * 6.0 + 5.5) / 5 + 0.1, 0.3)
           + normal_logpdf(4.9, (2.5 * 5.5 + 2.5 * 5.1) / 5 - 0.2, 0.5)
           + normal_logpdf(5.0, 5.1 + 0.1, 0.3))
    assert log_likelihood_obs(traj, obs, fit) == pytest.approx(ref, abs=1e-12)


# --------------------------------------------------------------------------
# samplers


def test_slice_sampler_standard_normal():
    stream = _Stream(np.random.default_rng(3))
    x, lx = 0.0, 0.0
    draws = []
    for _ in range(20000):
        x, lx = slice_sample(x, lambda v: -0.5 * v * v, lx, 1.0, 20, -math.inf, math.inf, stream)
        draws.append(x)
    d = np.array(draws)
    assert abs(d.mean()) < 0.05 and abs(d.std() - 1.0) < 0.03


def test_config_validation():
    assert McmcConfig().draws_per_chain * McmcConfig().n_chains == 3000
    with pytest.raises(ValueError):
        McmcConfig(n_iter=1000, burn_in=500, thin=10)
    with pytest.raises(ValueError):
        McmcConfig(n_chains=0)


def test_two_period_toy_posterior():
    data, fit, priors, override, mean, sd = conjugate_fixture(n_periods=2)
    cfg = McmcConfig(n_chains=2, n_iter=5000, burn_in=500, thin=3, seed=5)
    s = run_mcmc(data, fit, cfg, priors=priors, fixed_sigma=TOY_SIGMA, phase_override=override)
    for k in range(2):
        x = s.f[:, 0, k]
        se = mc_se(s, x)
        assert abs(x.mean() - mean[k]) < 3 * se
        assert abs(x.std() - sd[k]) < 3 * x.std() / math.sqrt(2 * ess(s.by_chain(x)))


def test_no_observations_gives_prior_predictive():
    grid = TimeGrid(1950, 4, 1975)
    ref = ReferenceSeries("P", (1950, 1955, 1960, 1965), (6.0,) * 4)
    data = EstimationData(grid, [], {"P": ref})
    cfg = McmcConfig(n_chains=2, n_iter=10000, burn_in=1000, thin=5, seed=2)
    s = run_mcmc(data, None, cfg, priors=Priors(f0_mean=6.0, f0_sd=0.3), fixed_sigma=TOY_SIGMA,
                 phase_override={"P": [0] * 4})
    inc = np.diff(s.f[:, 0, :], axis=1)
    for k in range(3):
        assert abs(inc[:, k].mean()) < 3 * mc_se(s, inc[:, k])
    assert abs(s.f[:, 0, 0].mean() - 6.0) < 3 * mc_se(s, s.f[:, 0, 0])


def test_determinism_and_order_invariance():
    data, fit, priors, override, *_ = conjugate_fixture()
    a = run_mcmc(data, fit, SMALL, priors=priors)
    b = run_mcmc(data, fit, SMALL, priors=priors)
    shuffled = list(data.observations)
    random.Random(0).shuffle(shuffled)
    c = run_mcmc(EstimationData(data.grid, shuffled, data.reference), fit, SMALL, priors=priors)
    for name in ("f", "delta", "d", "mu", "ar", "psi_loc", "psi_scale", "sigma_eps", "rho_bar"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
        assert np.array_equal(getattr(a, name), getattr(c, name))
    assert a.n_draws == 2 * 100
    assert list(a.chain[:100]) == [0] * 100 and list(a.iteration[:3]) == [105, 110, 115]


def test_parallel_chains_match_serial():
    data, fit, priors, *_ = conjugate_fixture()
    a = run_mcmc(data, fit, SMALL, priors=priors)
    b = run_mcmc(data, fit, SMALL, priors=priors, n_jobs=2)
    assert np.array_equal(a.f, b.f) and np.array_equal(a.sigma_eps, b.sigma_eps)


def test_larger_error_sd_shrinks_toward_process():
    grid = TimeGrid(1950, 3, 1970)
    ref = ReferenceSeries("S", (1950, 1955, 1960), (6.0, 6.0, 6.0))
    obs = [Observation("S", 1953.0, 6.0, Source.DHS, Method.DIRECT, "a", 1953.0),
           Observation("S", 1958.0, 7.0, Source.MICS, Method.INDIRECT, "b", 1958.0),
           Observation("S", 1963.0, 6.0, Source.DHS, Method.DIRECT, "c", 1963.0)]
    data = EstimationData(grid, obs, {"S": ref})
    cfg = McmcConfig(n_chains=2, n_iter=4000, burn_in=500, thin=5, seed=9)
    means = []
    for rho in (0.2, 2.0):
        fit = toy_fit({(Source.DHS, Method.DIRECT): (0.0, 0.1), (Source.MICS, Method.INDIRECT): (0.0, rho)})
        s = run_mcmc(data, fit, cfg, priors=Priors(f0_sd=math.inf), fixed_sigma=TOY_SIGMA,
                     phase_override={"S": [0, 0, 0]})
        means.append(s.f[:, 0, 1].mean())
    assert 6.0 < means[1] < means[0]


def test_full_model_draws_respect_bounds():
    grid = TimeGrid(1950, 13, 2100)
    obs, refs, _ = synthetic_corpus(["A", "B"], grid, seed=4, horizon_truth=False)
    s = run_mcmc(EstimationData(grid, obs, refs), synthetic_fit(), SMALL)
    assert np.all((s.ar > 0) & (s.ar < 1))
    assert np.all(s.d > 0) and np.all(s.d <= 2.5) and np.all(s.delta >= 0)
    assert np.all(s.mu > 0) and np.all(s.f > 0.5)
    assert np.all(s.sigma_eps > 0) and np.all((s.rho_bar > 0) & (s.rho_bar < 1))


def test_fixed_globals_are_held():
    grid = TimeGrid(1950, 13, 2100)
    obs, refs, _ = synthetic_corpus(["A"], grid, seed=4, horizon_truth=False)
    g = GlobalParams()
    s = run_mcmc(EstimationData(grid, obs, refs), synthetic_fit(), SMALL, fixed_globals=g)
    assert np.all(s.sigma_eps == np.array(g.sigma_eps)) and np.all(s.mu_bar == g.mu_bar)


def test_pin_past_keeps_reference():
    data, fit, priors, *_ = conjugate_fixture()
    s = run_mcmc(data, fit, SMALL, priors=priors, pin_past=True)
    assert np.all(s.f == 6.0)


def test_init_error_names_block():
    data, fit, priors, *_ = conjugate_fixture()
    bad = WarmStart(country_params={"TOY": CountryParams((1, 1, 1, 1), 3.0, 2.0, 0.5)})
    with pytest.raises(InitError, match="country parameters"):
        run_mcmc(data, fit, SMALL, bad, priors)


def test_warm_start_and_persistence_round_trip(tmp_path):
    data, fit, priors, *_ = conjugate_fixture()
    s = run_mcmc(data, fit, SMALL, priors=priors)
    write_posterior(s, tmp_path)
    back = read_posterior(tmp_path, data.grid)
    for name in ("f", "delta", "d", "mu", "ar", "psi_loc", "psi_scale", "mu_bar", "sigma_mu", "rho_bar",
                 "sigma_rho", "sigma_eps", "chain", "iteration"):
        assert np.array_equal(getattr(s, name), getattr(back, name)), name
    ws = warm_start_from(back)
    assert np.array_equal(ws.f["TOY"], s.f[-1, 0])
    s2 = run_mcmc(data, fit, SMALL, ws, priors)
    assert s2.n_draws == s.n_draws


def test_subsample_is_evenly_spaced():
    data, fit, priors, *_ = conjugate_fixture()
    s = run_mcmc(data, fit, SMALL, priors=priors)
    sub = s.subsample(50)
    assert sub.n_draws == 50
    assert sub.f[0, 0, 0] == s.f[0, 0, 0] and sub.f[-1, 0, 0] == s.f[-1, 0, 0]
    assert s.subsample(10_000) is s


# --------------------------------------------------------------------------
# diagnostics


def test_psrf_identical_chains_is_one():
    x = np.random.default_rng(0).standard_normal(500)
    assert psrf(np.stack([x, x]), split=False) == 1.0
    # split halves of identical chains still differ, so only closeness holds there
    assert psrf(np.stack([x, x])) == pytest.approx(1.0, abs=0.01)
    data, fit, priors, *_ = conjugate_fixture()
    s = run_mcmc(data, fit, SMALL, priors=priors)
    first = s.take(np.flatnonzero(s.chain == 0))
    twin = first.take(np.r_[np.arange(first.n_draws), np.arange(first.n_draws)])
    twin.chain = np.repeat([0, 1], first.n_draws)
    rows = {r.parameter: r for r in diagnostics(twin).rows}
    assert rows["f[TOY,1955]"].psrf == 1.0 and rows["sigma_I"].psrf == 1.0


def test_psrf_detects_separated_chains():
    rng = np.random.default_rng(0)
    chains = np.stack([rng.standard_normal(500), 3 + rng.standard_normal(500)])
    assert psrf(chains) > 1.1


def test_ess_iid_oracle():
    rng = np.random.default_rng(1)
    chains = rng.standard_normal((3, 2000))
    assert abs(ess(chains) / 6000 - 1.0) < 0.2


def test_ess_ar_oracle():
    rng = np.random.default_rng(2)
    n, phi = 5000, 0.99
    x = np.zeros((3, n))
    for c in range(3):
        e = rng.standard_normal(n)
        for t in range(1, n):
            x[c, t] = phi * x[c, t - 1] + e[t]
    n_eff = ess(x)
    assert n_eff < 0.05 * 3 * n or psrf(x) > 1.1
    # theoretical ESS of an AR(1) is n (1 - phi) / (1 + phi)
    assert n_eff < 10 * 3 * n * (1 - phi) / (1 + phi)


def test_diagnostics_report(tmp_path):
    data, fit, priors, *_ = conjugate_fixture()
    s = run_mcmc(data, fit, SMALL, priors=priors)
    rep = diagnostics(s)
    names = [r.parameter for r in rep.rows]
    assert "f[TOY,1950]" in names and "sigma_II" in names and "rho_bar" in names
    assert rep.n_chains == 2 and rep.draws_per_chain == 100
    single = diagnostics(s.take(np.flatnonzero(s.chain == 0)))
    assert "single chain" in single.notice and not single.flagged
    with open(tmp_path / "d.csv", "w") as fh:
        rep.write_csv(fh)
    assert (tmp_path / "d.csv").read_text().startswith("parameter,psrf,split_psrf,ess,acf1,acf5,acf10,flag")


def test_posterior_sample_accessors():
    data, fit, priors, *_ = conjugate_fixture()
    s = run_mcmc(data, fit, SMALL, priors=priors)
    assert isinstance(s, PosteriorSample)
    t = s.trajectory(0, "TOY")
    assert t.f.shape == (3,) and len(t.phase) == 3
    assert s.country_params(0, "TOY").d == s.d[0, 0]
    assert s.global_params(0).sigma_eps == tuple(s.sigma_eps[0])
    with pytest.raises(KeyError):
        s.country_index("XXX")
