import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intermed.dataset import ObservedDataset, VariableSchema
from intermed.duplication import IW, DuplicatedDataset, exposure_pattern
from intermed.effects import (
    EffectModelSpec,
    EffectParameters,
    Level,
    build_effect_design,
    derive_effects,
    permutation_sensitivity,
    permutations_of,
)
from intermed.errors import ConfigError, DataError
from intermed.estimators import EstimatorConfig, estimate
from intermed.rng import KeyedStream

from test_estimators import linear_config, linear_data


def one_subject(A, t=2, layout=IW, l=0.7):
    pat = exposure_pattern(layout, t, A)
    r = pat.shape[0]
    J = np.r_[np.zeros(t + 1), np.ones(2)]
    return DuplicatedDataset(layout, t, tuple(f"M{s}" for s in range(1, t + 1)), 1,
                             np.zeros(r, int), np.arange(r), pat, J, np.zeros(r), np.ones(r),
                             {"L": np.full(r, l)})


def test_design_row_single_mediator_shift():
    spec = EffectModelSpec("identity", 2, ("L",), ("L",))
    X, _, _, names = build_effect_design(one_subject(0.0), spec)
    row = dict(zip(names, X[1]))
    nonzero = {k for k, v in row.items() if v != 0}
    assert nonzero == {"mu0", "theta1", "theta1c", "mu_L"}
    assert row["theta1"] == 1.0 and row["theta1c"] == 0.7 and row["mu_L"] == 0.7


def test_design_last_row_exposed():
    spec = EffectModelSpec("identity", 2, ("L",), ("L",))
    X, _, _, names = build_effect_design(one_subject(1.0), spec)
    row = dict(zip(names, X[-1]))
    assert row["gamma1"] == 1.0 and row["gamma0"] == 1.0 and row["mu0J"] == 1.0
    assert row["theta1"] == 0.0 and row["theta2"] == 0.0
    # the J=1 row with unequal mediator levels (IW, A=1): a0=1, a^(k)=0
    row = dict(zip(names, X[-2]))
    assert row["gamma0"] == 1.0 and row["gamma1"] == 0.0


def test_three_mediator_spec_has_ten_effect_columns():
    spec = EffectModelSpec("logit", 3, ("neg_cop",), ("neg_cop", "age"))
    cols = spec.effect_columns()
    assert cols == ["theta1", "theta1c", "theta2", "theta2c", "theta3", "theta3c",
                    "gamma0", "gamma0c", "gamma1", "gamma1c"]


def test_spec_errors():
    with pytest.raises(ConfigError, match="main effects"):
        EffectModelSpec("identity", 2, ("L",), ())
    with pytest.raises(ConfigError):
        EffectModelSpec("probit", 2)
    with pytest.raises(DataError, match="t=2"):
        build_effect_design(one_subject(1.0), EffectModelSpec("identity", 3))
    with pytest.raises(DataError, match="missing"):
        build_effect_design(one_subject(1.0), EffectModelSpec("identity", 2, (), ("Z",)))


def params(spec, **vals):
    names = spec.column_names()
    return EffectParameters.from_vector([vals.get(n, 0.0) for n in names], spec)


def test_derive_examples():
    spec = EffectModelSpec("identity", 2, ("L",), ("L",))
    e = derive_effects(params(spec, theta1=0.5, theta1c=0.2), (Level("_L", {"L": 1.0}),))
    assert e.derived["IE1_L"] == pytest.approx(0.7, abs=1e-15)
    e = derive_effects(params(spec, gamma1=1.0, theta1=0.3, theta2=0.4))
    assert e.derived["mutualIE"] == pytest.approx(0.3, abs=1e-15)
    e = derive_effects(params(spec), (Level("", {"L": 0.0}), Level("_L", {"L": 1.0})))
    assert all(v == 0.0 for v in e.derived.values())


def test_nonfinite_parameters_rejected():
    spec = EffectModelSpec("identity", 2)
    with pytest.raises(DataError, match="nonfinite"):
        params(spec, theta1=np.nan)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=12, max_size=12), st.floats(-3, 3))
def test_derived_identities(vals, l):
    spec = EffectModelSpec("identity", 2, ("L",), ("L",))
    p = EffectParameters.from_vector(vals[:len(spec.column_names())], spec)
    d = derive_effects(p, (Level("_x", {"L": l}),)).derived
    assert d["mutualIE_x"] + d["sumIE_x"] == pytest.approx(d["jointIE_x"], abs=1e-12)
    assert d["TE_x"] == d["DE_x"] + d["jointIE_x"]
    assert d["sumIE_x"] == pytest.approx(d["IE1_x"] + d["IE2_x"], abs=1e-12)


def test_full_layout_design_has_full_rank():
    d = linear_data(40, 3)
    cfg = linear_config("mc", draws=3)
    res = estimate(d, cfg)
    assert all(np.isfinite(v) for v in res.derived.values())
    from intermed.estimators import mc_duplicated
    X, _, _, _ = build_effect_design(mc_duplicated(d, cfg, KeyedStream(1)), cfg.effect_spec)
    assert np.linalg.matrix_rank(X) == X.shape[1]


def test_permutation_counts():
    assert len(permutations_of(3)) == 6
    assert len(permutations_of(1)) == 1
    with pytest.raises(ConfigError):
        permutations_of(7)


def data_t(t, n, seed):
    g = np.random.default_rng(seed)
    L = g.normal(size=n)
    A = (g.random(n) < 0.5).astype(float)
    cols = {"L": L, "A": A}
    prev = np.zeros(n)
    for s in range(1, t + 1):
        prev = 0.5 * A + 0.3 * L + 0.4 * prev + g.normal(size=n)
        cols[f"M{s}"] = prev
    cols["Y"] = sum(cols[f"M{s}"] for s in range(1, t + 1)) + L + g.normal(size=n)
    meds = tuple(f"M{s}" for s in range(1, t + 1))
    return ObservedDataset(VariableSchema("Y", "A", meds, covariate_names=("L",)), cols)


def test_three_mediators_six_runs():
    d = data_t(3, 200, 1)
    cfg = EstimatorConfig("mc", EffectModelSpec("identity", 3, (), ("L",)), draws=10, seed=2)
    out = permutation_sensitivity(d, cfg)
    assert len(out["runs"]) == 6
    assert len({r["order"] for r in out["runs"]}) == 6
    row = {r["effect"]: r for r in out["table"]}
    assert set(row) >= {"M1", "M2", "M3", "jointIE", "DE"}
    for r in out["table"]:
        assert r["min"] <= r["max"]


def test_single_mediator_one_run_identical():
    d = data_t(1, 150, 2)
    cfg = EstimatorConfig("mc", EffectModelSpec("identity", 1, (), ("L",)), draws=10, seed=3)
    out = permutation_sensitivity(d, cfg)
    assert len(out["runs"]) == 1
    plain = estimate(d, cfg, KeyedStream(3, ("estimate",)))
    assert out["runs"][0]["estimates"].derived == plain.derived


def test_mc_permutation_invariance_of_order_free_effects():
    d = linear_data(400, 8)
    cfg = linear_config("mc", draws=20)
    runs = permutation_sensitivity(d, cfg)["runs"]
    a, b = (r["estimates"].derived for r in runs)
    for k in ("jointIE", "DE", "sumIE", "TE", "jointIE_L", "DE_L", "sumIE_L"):
        assert abs(a[k] - b[k]) < 1e-10, k
    # the split into individual indirect effects is allowed to move
    ie_a = runs[0]["estimates"].ie_by_name()
    ie_b = runs[1]["estimates"].ie_by_name()
    assert ie_a.keys() == ie_b.keys()


def test_permutation_with_bootstrap_bounds():
    d = linear_data(120, 9)
    cfg = linear_config("mc", draws=5)
    out = permutation_sensitivity(d, cfg, B=5)
    for r in out["table"]:
        assert r["lower_min"] <= r["lower_max"] and r["upper_min"] <= r["upper_max"]


def test_permutation_errors_name_the_order():
    d = data_t(2, 200, 3)
    cfg = EstimatorConfig("mc", EffectModelSpec("identity", 2, (), ("Z",)), draws=5)
    with pytest.raises(ConfigError, match="permutation") as exc:
        permutation_sensitivity(d, cfg)
    assert exc.value.field is not None
