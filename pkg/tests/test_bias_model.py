import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import GRID, NIGERIA_CELLS, nigeria_fixture
from tfrpast.bias_model import (
    BiasSettings,
    RankDeficientError,
    fit_bias,
    fit_bias_model,
    fit_error_sd,
    read_table,
    residuals,
    write_table,
)
from tfrpast.data_model import DataError, Method, Observation, ReferenceSeries, Source

REF = {"A": ReferenceSeries("A", tuple(int(p) for p in GRID.period_starts),
                            tuple(max(6.0 - 0.5 * k, 1.0) for k in range(GRID.n_periods)))}


def obs(t, y, source=Source.DHS, method=Method.DIRECT, country="A", sid="s"):
    return Observation(country, t, y, source, method, sid, t)


def cell(fit, source, method, key=None):
    return next(r for r in fit.table[key] if (r.source, r.method) == (source, method))


# --------------------------------------------------------------------------
# residuals


def test_residual_examples():
    pairs = residuals([obs(1953.0, 6.0), obs(1958.0, 6.0), obs(1954.0, 6.5)], REF)
    z = [z for _, z in pairs]
    assert z[0] == 0.0
    assert z[1] == pytest.approx(0.5, abs=1e-12)
    assert z[2] == pytest.approx(6.5 - (4 * 6.0 + 1 * 5.5) / 5, abs=1e-12)
    assert z[2] == pytest.approx(0.6, abs=1e-12)


def test_residuals_missing_reference_names_country():
    with pytest.raises(DataError, match="'ZZZ'"):
        residuals([obs(1953.0, 6.0, country="ZZZ")], REF)


# --------------------------------------------------------------------------
# regressions


def test_zero_response_gives_zero_coefficients():
    X = np.column_stack([np.ones(6), [0, 0, 1, 1, 0, 0], [0, 0, 0, 0, 1, 1]])
    beta, fitted = fit_bias(np.zeros(6), X)
    assert np.allclose(beta, 0) and np.allclose(fitted, 0)


@given(st.lists(st.tuples(st.sampled_from([(Source.DHS, Method.DIRECT), (Source.MICS, Method.INDIRECT),
                                             (Source.CENSUS, Method.DIRECT)]),
                          st.floats(-2, 2)), min_size=6, max_size=40), st.randoms())
@settings(max_examples=40, deadline=None)
def test_saturated_design_reproduces_group_means(rows, rnd):
    data = [obs(1953.0 + (i % 13) * 5, REF["A"].value_at(1953.0 + (i % 13) * 5) + z, s, m, sid=str(i))
            for i, ((s, m), z) in enumerate(rows)]
    if any(sum(1 for (c, _) in rows if c == key) < 2 for key in {c for c, _ in rows}):
        return  # pooled cells are covered elsewhere
    fit = fit_bias_model(data, REF)
    shuffled = list(data)
    rnd.shuffle(shuffled)
    fit2 = fit_bias_model(shuffled, REF)
    for (s, m) in {c for c, _ in rows}:
        zs = [z for c, z in rows if c == (s, m)]
        assert cell(fit, s, m).delta_hat == pytest.approx(np.mean(zs), abs=1e-9)
        assert cell(fit, s, m).n == len(zs)
        assert cell(fit2, s, m).delta_hat == cell(fit, s, m).delta_hat


def test_half_normal_oracle():
    rng = np.random.default_rng(1)
    z = 0.3 + 0.4 * rng.standard_normal(100_000)
    X = np.ones((z.size, 1))
    _, dh = fit_bias(z, X)
    _, rho = fit_error_sd(z, dh, X)
    assert abs(rho[0] - 0.4) / 0.4 < 0.02


def test_degenerate_cell_hits_floor():
    data = [obs(1953.0, 6.2, sid=str(i)) for i in range(4)]
    fit = fit_bias_model(data, REF)
    r = cell(fit, Source.DHS, Method.DIRECT)
    assert r.delta_hat == pytest.approx(0.2) and r.rho_hat == 0.05


def test_nigeria_fixture_reproduces_cell_table():
    data, refs = nigeria_fixture()
    fit = fit_bias_model(data, refs)
    for source, method, delta, rho, rmse, n in NIGERIA_CELLS:
        r = cell(fit, source, method)
        assert r.delta_hat == pytest.approx(delta, abs=1e-9)
        assert r.rho_hat == pytest.approx(rho, abs=1e-9)
        assert r.n == n
        # the RMSE column of the cell table rounds after combining unrounded values
        assert r.rmse == pytest.approx(rmse, abs=0.011)
    r = cell(fit, Source.DHS, Method.DIRECT)
    assert round(r.delta_hat, 2) == 0.11 and round(r.rho_hat, 2) == 0.38 and round(r.rmse, 2) == 0.40
    assert round(cell(fit, Source.MIS, Method.INDIRECT).delta_hat, 2) == 0.75


@given(st.floats(-3, 3))
@settings(max_examples=20, deadline=None)
def test_translation_equivariance(c):
    data, refs = nigeria_fixture()
    base = fit_bias_model(data, refs)
    shifted = fit_bias_model([Observation(o.country, o.ref_date, o.value + c + 1.0, o.source, o.method,
                                          o.study_id, o.study_end_year) for o in data], refs)
    for a, b in zip(base.table[None], shifted.table[None]):
        assert b.delta_hat == pytest.approx(a.delta_hat + c + 1.0, abs=1e-9)
        assert b.rho_hat == pytest.approx(a.rho_hat, abs=1e-9)
        assert b.rmse == math.hypot(b.delta_hat, b.rho_hat)
        assert b.rho_hat >= 0.05


def test_sparse_cells_pool_into_other():
    data = [obs(1953.0, 6.1, sid="a"), obs(1958.0, 5.6, sid="b"),
            obs(1963.0, 5.9, Source.MIS, Method.DIRECT, sid="c"),
            obs(1968.0, 4.0, Source.MICS, Method.DIRECT, sid="d")]
    fit = fit_bias_model(data, REF)
    other = cell(fit, Source.OTHER, Method.DIRECT)
    assert other.n == 2
    assert other.delta_hat == pytest.approx(((5.9 - 5.0) + (4.0 - 4.5)) / 2)
    assert fit.lookup(data[2]) == fit.lookup(data[3]) == (other.delta_hat, other.rho_hat)


def test_rank_deficiency_names_aliased_columns():
    data = [Observation("A", 1953.0 + 5 * i, 6.0, Source.DHS, Method.DIRECT, str(i), 1953.0 + 5 * i,
                        (("one", 1.0),)) for i in range(4)]
    with pytest.raises(RankDeficientError) as exc:
        fit_bias_model(data, REF, settings=BiasSettings(covariates=("one",)))
    assert exc.value.aliased == ["one"]


def test_extra_covariate_columns():
    data = [Observation("A", 1953.0 + 5 * i, REF["A"].values[i] + 0.1 * i, Source.DHS, Method.DIRECT, str(i),
                        1953.0 + 5 * i, (("lag", float(i)),)) for i in range(6)]
    fit = fit_bias_model(data, REF, settings=BiasSettings(covariates=("lag",)))
    assert fit.beta[None] == pytest.approx([0.0, 0.1], abs=1e-9)
    assert fit.lookup(data[3])[0] == pytest.approx(0.3, abs=1e-9)


def test_vital_registration_fixed_values():
    data = [obs(1953.0, 6.1, sid="a"), obs(1958.0, 5.7, sid="b"),
            obs(1954.0, 9.0, Source.VR, Method.DIRECT, sid="v")]
    fit = fit_bias_model(data, REF, settings=BiasSettings(vr_countries=frozenset({"A"})))
    assert fit.lookup(data[2]) == (0.0, 0.025)
    assert all(r.source is not Source.VR for r in fit.table[None])


def test_per_country_fit_and_table_round_trip():
    refs = dict(REF, B=ReferenceSeries("B", REF["A"].period_starts, REF["A"].values))
    data = [obs(1953.0, 6.2, sid="a"), obs(1958.0, 5.6, sid="b"),
            obs(1953.0, 5.5, country="B", sid="c"), obs(1958.0, 5.3, country="B", sid="d")]
    fit = fit_bias_model(data, refs, settings=BiasSettings(per_country=True))
    assert fit.lookup(data[0])[0] == pytest.approx(0.15)
    assert fit.lookup(data[2])[0] == pytest.approx(-0.35)
    buf = io.StringIO()
    write_table(fit, buf)
    assert buf.getvalue().splitlines()[0] == "country,source,method,delta_hat,rho_hat,rmse,n"
    back = read_table(io.StringIO(buf.getvalue()))
    assert back.settings.per_country
    assert back.lookup(data[2]) == pytest.approx(fit.lookup(data[2]), abs=1e-6)


def test_table_csv_layout():
    data, refs = nigeria_fixture()
    buf = io.StringIO()
    write_table(fit_bias_model(data, refs), buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "source,method,delta_hat,rho_hat,rmse,n"
    assert "DHS,Direct,0.110000,0.380000,0.395601,28" in lines
    back = read_table(io.StringIO(buf.getvalue()))
    assert back.lookup(data[0]) == pytest.approx((0.11, 0.38), abs=1e-6)


def test_unknown_cell_and_empty_input():
    fit = fit_bias_model([obs(1953.0, 6.1, sid="a"), obs(1958.0, 5.6, sid="b")], REF)
    with pytest.raises(DataError, match="no fitted cell"):
        fit.lookup(obs(1953.0, 6.0, Source.MICS, Method.COHORT))
    with pytest.raises(DataError, match="no observations"):
        fit_bias_model([], REF)
