import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intermed.dataset import ObservedDataset, VariableSchema
from intermed.duplication import (
    IW,
    MC,
    DuplicatedDataset,
    build_iw_rows,
    build_mc_rows,
    exposure_pattern,
    impute_rows,
    weight_diagnostics,
)
from intermed.estimators import fit_outcome_models, fit_propensity, iw_duplicated
from intermed.mediators import fit_chain, fit_marginals
from intermed.rng import KeyedStream
from intermed.simharness import StudyDgp

from test_estimators import linear_config, linear_data


def test_weighting_layout_t2():
    # columns a0, a1, a2; J is 0 on the first three rows and 1 on the last two
    for A in (0.0, 1.0):
        want = [[0, 0, 0], [0, 1, 0], [0, 1, 1], [A, 1 - A, 1 - A], [A, A, A]]
        np.testing.assert_array_equal(exposure_pattern(IW, 2, A), want)


def test_imputation_layout_t2():
    for A in (0.0, 1.0):
        want = [[0, 0, 0], [0, 1, 0], [0, 1, 1], [1 - A, A, A], [A, A, A]]
        np.testing.assert_array_equal(exposure_pattern(MC, 2, A), want)


def test_three_mediators_six_rows():
    assert exposure_pattern(IW, 3, 1.0).shape == (6, 4)


def small_data(t, A, seed=0):
    g = np.random.default_rng(seed)
    n = len(A)
    meds = tuple(f"M{s}" for s in range(1, t + 1))
    cols = {m: g.normal(size=n) for m in meds}
    cols.update(Y=g.normal(size=n), A=np.asarray(A, float), L=g.normal(size=n))
    return ObservedDataset(VariableSchema("Y", "A", meds, covariate_names=("L",)), cols)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.lists(st.booleans(), min_size=1, max_size=12))
def test_layout_rows_and_staircase(t, A):
    d = small_data(t, [float(x) for x in A])
    dup = impute_rows(d, lambda a0, rows: rows["L"] * 0.0, lambda m, lev, rows, s, i, k:
                      np.zeros((len(i), k)), 2, KeyedStream(0))
    rps = t + 3
    assert dup.subject.shape[0] == rps * d.n
    a = dup.a.reshape(d.n, rps, t + 1)
    for i in range(d.n):
        np.testing.assert_array_equal(a[i], exposure_pattern(MC, t, d.exposure[i]))
        for pos in range(t):
            assert np.sum(a[i, pos + 1, 1:] != a[i, pos, 1:]) == 1
    np.testing.assert_array_equal(dup.j.reshape(d.n, rps)[0], [0] * (t + 1) + [1, 1])


def test_null_dgp_shared_chain_gives_unit_mediator_weights():
    d = linear_data(400, 1)
    chain = fit_chain(d, 1, None, {"M1": [["L"]], "M2": [["L"]]})
    prop = fit_propensity(d, linear_config("iw"))
    dup = build_iw_rows(d, prop, {0: chain, 1: chain}, stream=KeyedStream(1))
    np.testing.assert_allclose(dup.components.wm, 1.0, rtol=1e-12)


def test_final_weighting_row_has_unit_mediator_weight():
    d = StudyDgp(1, (0.8, 0.4, 0.4)).generate(300, 2)
    dup = iw_duplicated(d, StudyDgp(1, (0.8, 0.4, 0.4)).estimator_config("iw"))
    wm = dup.components.wm.reshape(d.n, 5)
    np.testing.assert_array_equal(wm[:, 4], 1.0)
    a0 = dup.a[:, 0].reshape(d.n, 5)
    w = dup.weight.reshape(d.n, 5)
    assert np.all(w[a0 != d.exposure[:, None]] == 0)
    assert np.all(w[a0 == d.exposure[:, None]] > 0)


def test_imputation_last_row_is_observed_outcome():
    d = linear_data(200, 3)
    cfg = linear_config("mc")
    fits = fit_outcome_models(d, cfg)
    margs = {g: fit_marginals(d, g) for g in (0, 1)}
    dup = build_mc_rows(d, fits, margs, 5, KeyedStream(4))
    assert np.array_equal(dup.response.reshape(d.n, 5)[:, 4], d.outcome)


def test_rows_sharing_a_level_share_the_draw():
    d = small_data(2, [0, 1, 0, 1, 1, 0], seed=5)

    def sampler(m, lev, rows, s, idx, k):
        return s.normal(idx, k)

    dup = impute_rows(d, lambda a0, rows: rows["M1"], sampler, 1, KeyedStream(6))
    r = dup.response.reshape(d.n, 5)
    np.testing.assert_array_equal(r[:, 1], r[:, 2])
    assert not np.array_equal(r[:, 0], r[:, 1])


def test_linear_outcome_row_one_tends_to_mean_plug_in():
    d = small_data(2, [0, 1] * 5, seed=7)
    mu = {("M1", 0): 0.4, ("M2", 0): -1.0, ("M1", 1): 2.0, ("M2", 1): 1.0}

    def sampler(m, lev, rows, s, idx, k):
        return mu[(m, lev)] + s.normal(idx, k)

    h = lambda a0, rows: 0.5 + 2.0 * rows["M1"] - 3.0 * rows["M2"] + rows["L"]
    K = 200000
    dup = impute_rows(d, h, sampler, K, KeyedStream(8))
    r = dup.response.reshape(d.n, 5)
    want = 0.5 + 2.0 * 0.4 + 3.0 + d["L"]
    assert np.max(np.abs(r[:, 0] - want)) < 4 * np.sqrt(13 / K)


def test_weights_invariant_to_covariate_rescaling():
    d = linear_data(500, 9)
    cols = dict(d.columns)
    cols["L"] = d["L"] * 3.7
    scaled = ObservedDataset(d.schema, cols)
    cfg = linear_config("iw")
    a = iw_duplicated(d, cfg).weight
    b = iw_duplicated(scaled, cfg).weight
    np.testing.assert_allclose(b, a, rtol=1e-6)


def test_imputation_endpoint_rows_invariant_to_mediator_relabeling():
    d = linear_data(300, 10)
    cfg = linear_config("mc")
    s = KeyedStream(11)

    def build(data):
        fits = fit_outcome_models(data, cfg)
        margs = {g: fit_marginals(data, g) for g in (0, 1)}
        return build_mc_rows(data, fits, margs, 20, s).response.reshape(data.n, 5)

    a = build(d)
    b = build(d.with_mediator_order((1, 0)))
    np.testing.assert_allclose(b[:, 0], a[:, 0], atol=1e-10)
    np.testing.assert_allclose(b[:, 2], a[:, 2], atol=1e-10)


def test_diagnostics_unit_weights():
    n, t = 4, 2
    rps = t + 3
    dup = DuplicatedDataset(IW, t, ("M1", "M2"), n, np.repeat(np.arange(n), rps),
                            np.tile(np.arange(rps), n), np.zeros((n * rps, t + 1)),
                            np.zeros(n * rps), np.zeros(n * rps), np.ones(n * rps), {})
    diag = weight_diagnostics(dup)
    assert [p["sd"] for p in diag["positions"]] == [0.0] * rps
    assert all(sum(p["histogram"]) == n for p in diag["positions"])


def test_duplicated_csv_export(tmp_path):
    d = StudyDgp(1, (0.0, 0.0, 0.0)).generate(50, 12)
    dup = iw_duplicated(d, StudyDgp(1, (0.0, 0.0, 0.0)).estimator_config("iw"))
    dup.to_csv(tmp_path / "dup.csv", "audit")
    lines = (tmp_path / "dup.csv").read_text().splitlines()
    assert lines[0] == "# audit"
    assert lines[1] == "subject,a0,a1,a2,j,weight,response,L"
    assert len(lines) == 2 + 5 * 50


def pooled_row1_sd(params, reps, n=500):
    dgp = StudyDgp(1, params)
    vals = []
    for r in range(reps):
        dup = iw_duplicated(dgp.generate(n, 100 + r), dgp.estimator_config("iw"))
        w = dup.weight.reshape(n, 5)[:, 0]
        vals.append(w[w > 0])
    return float(np.concatenate(vals).std(ddof=1))


def test_null_row1_weight_sd():
    assert pooled_row1_sd((0.0, 0.0, 0.0), 20) == pytest.approx(0.79, rel=0.15)


@pytest.mark.xfail(strict=True, reason="row-1 weight sd under e21=0.8 is about 4, not 17.5; "
                   "see the decision ledger")
def test_unstable_row1_weight_sd():
    assert pooled_row1_sd((0.0, 0.8, 0.0), 20) == pytest.approx(17.53, rel=0.5)
