"""Simulation studies with two normal mediators and the replication driver.

Study 1: one normal confounder, binary outcome, additive models.
Study 2: two confounders, an exposure effect on ``M1`` only when ``L2 = 1``,
continuous outcome. Study 3: as study 2 plus an exposure-by-``M1`` term in
``M2`` and a mediator-by-mediator term in a binary outcome.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .dataset import BINARY, CONTINUOUS, ObservedDataset, VariableSchema
from .duplication import weight_diagnostics
from .effects import EffectModelSpec, Level
from .errors import ConfigError
from .estimators import EstimatorConfig, estimate, iw_duplicated
from .inference import _RECOVERABLE, bootstrap
from .oracle import population_truth
from .rng import KeyedStream

STUDIES = (1, 2, 3)
ESTIMATORS = ("iw", "mc", "mc-misspecified")
_SEED_MASK = 0x7FFFFFFFFFFFFFFF

# (b1, e21, a2) grids and sample sizes of the published designs
GRIDS = {
    1: {"params": [(b1, e21, a2) for b1 in (0.0, 0.8)
                   for a2, e21 in ((0.0, 0.0), (0.4, 0.0), (0.8, 0.0), (0.0, 0.4), (0.0, 0.8))],
        "n": (50, 250, 500)},
    2: {"params": [(b1, e21, a2) for b1 in (0.0, 1.6)
                   for a2, e21 in ((0.0, 0.0), (0.0, 1.6), (1.6, 0.0))],
        "n": (100,)},
    3: {"params": [(0.0, e21, a2) for a2, e21 in ((0.0, 0.0), (0.8, 0.0), (0.0, 0.8))],
        "n": (50, 250, 500)},
}

REPORTED = {
    1: ("IE1", "IE2", "jointIE", "DE"),
    2: ("IE1", "IE1_L2", "IE2", "IE2_L2"),
    3: ("IE1", "IE1_L2", "IE2", "IE2_L2", "mutualIE", "mutualIE_L2"),
}


def in_grid(study: int, params, n: int | None = None) -> bool:
    g = GRIDS[study]
    ok = any(np.allclose(params, p) for p in g["params"])
    return ok and (n is None or n in g["n"])


@dataclass(frozen=True)
class StudyDgp:
    """True data-generating model of one study at ``params = (b1, e21, a2)``."""

    study: int
    params: tuple
    l2_prob: float = 0.1

    def __post_init__(self):
        if self.study not in STUDIES:
            raise ConfigError(f"unknown study {self.study!r}", "study")
        if not 0 < self.l2_prob < 1:
            raise ConfigError("l2_prob must lie strictly between 0 and 1", "l2_prob")
        if len(self.params) != 3 or not all(math.isfinite(float(p)) for p in self.params):
            raise ConfigError("params must be three finite numbers (b1, e21, a2)", "params")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))

    @property
    def b1(self) -> float:
        return self.params[0]

    @property
    def e21(self) -> float:
        return self.params[1]

    @property
    def a2(self) -> float:
        return self.params[2]

    @property
    def covariates(self) -> tuple:
        return ("L",) if self.study == 1 else ("L1", "L2")

    @property
    def schema(self) -> VariableSchema:
        kind = CONTINUOUS if self.study == 2 else BINARY
        return VariableSchema("Y", "A", ("M1", "M2"), kind, None, self.covariates,
                              () if self.study == 1 else ("L2",))

    def generate(self, n: int, seed: int) -> ObservedDataset:
        g = KeyedStream(seed, ("study", self.study)).generator()
        b1, e21, a2 = self.params
        if self.study == 1:
            L = g.standard_normal(n)
            A = (g.random(n) < expit(0.7 * L)).astype(float)
            M1 = A - 2.0 * L + g.standard_normal(n)
            M2 = a2 * A + e21 * M1 + L + g.standard_normal(n)
            Y = (g.random(n) < expit(b1 * M1 + M2 + L)).astype(float)
            cols = {"L": L}
        else:
            L1 = g.standard_normal(n)
            L2 = (g.random(n) < self.l2_prob).astype(float)
            A = (g.random(n) < expit(0.7 * L2)).astype(float)
            M1 = A * L2 - L2 + L1 + g.standard_normal(n)
            if self.study == 2:
                M2 = a2 * A + e21 * M1 + L1 + L2 + g.standard_normal(n)
                Y = b1 * M1 + M2 + L1 + L2 + g.standard_normal(n)
            else:
                M2 = a2 * A * M1 + e21 * M1 + L1 + L2 + g.standard_normal(n)
                eta = b1 * M1 + M2 - 0.4 * M1 * M2 + L1 + L2
                Y = (g.random(n) < expit(eta)).astype(float)
            cols = {"L1": L1, "L2": L2}
        cols.update({"Y": Y, "A": A, "M1": M1, "M2": M2})
        return ObservedDataset(self.schema, cols)

    def outcome_mean(self, a0, rows):
        m1, m2 = rows["M1"], rows["M2"]
        if self.study == 1:
            return expit(self.b1 * m1 + m2 + rows["L"])
        if self.study == 2:
            return self.b1 * m1 + m2 + rows["L1"] + rows["L2"]
        return expit(self.b1 * m1 + m2 - 0.4 * m1 * m2 + rows["L1"] + rows["L2"])

    def marginal_moments(self, mediator: str, level: int, rows):
        """Mean and variance of a mediator given covariates at exposure ``level``."""
        b1, e21, a2 = self.params
        a = float(level)
        if self.study == 1:
            L = rows["L"]
            mu1 = a - 2.0 * L
            if mediator == "M1":
                return mu1, np.ones_like(L)
            return a2 * a + e21 * mu1 + L, np.full_like(L, 1.0 + e21 ** 2)
        L1, L2 = rows["L1"], rows["L2"]
        mu1 = a * L2 - L2 + L1
        if mediator == "M1":
            return mu1, np.ones_like(L1)
        c = e21 + (a2 * a if self.study == 3 else 0.0)
        shift = a2 * a if self.study == 2 else 0.0
        return shift + c * mu1 + L1 + L2, np.full_like(L1, 1.0 + c ** 2)

    def sample_marginal(self, mediator, level, rows, stream, index, draws):
        mu, var = self.marginal_moments(mediator, level, rows)
        return mu + np.sqrt(var) * stream.normal(index, draws)

    def effect_spec(self) -> EffectModelSpec:
        if self.study == 1:
            return EffectModelSpec("logit", 2, (), ("L",))
        link = "identity" if self.study == 2 else "logit"
        return EffectModelSpec(link, 2, ("L2",), ("L1", "L2"))

    def levels(self) -> tuple:
        if self.study == 1:
            return (Level("", {}),)
        return (Level("", {"L2": 0.0}), Level("_L2", {"L2": 1.0}))

    def outcome_plan(self, misspecified: bool = False) -> list:
        if self.study == 1:
            return [["M1"], ["M2"], ["L"]]
        plan = [["M1"], ["M2"], ["M1", "L2"], ["M2", "L2"], ["L1"], ["L2"]]
        if self.study == 3 and not misspecified:
            plan += [["M1", "M2"], ["M1", "M2", "L2"]]
        return plan

    def estimator_config(self, estimator: str, seed: int = 0, draws: int = 100,
                         marginal_method: str = "auto", force: bool = True,
                         tolerant: bool = True) -> EstimatorConfig:
        """Models fitted in the published designs.

        Study 1 factorizes the joint mediator density in the reverse order
        ``(M2, M1)``. ``force`` keeps extreme weights from aborting a
        replicate. ``tolerant`` keeps separated logistic fits and drops
        aliased columns, as general-purpose regression software does when
        a small covariate cell cannot identify its interaction terms.
        """
        if estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {estimator!r}", "estimators")
        if estimator == "mc-misspecified" and self.study != 3:
            raise ConfigError("mc-misspecified is defined for study 3 only", "estimators")
        if self.study == 1:
            order = ("M2", "M1")
            chain = {"M2": [["L"]], "M1": [["M2"], ["L"]]}
            prop = [["L"]]
        else:
            order = ("M1", "M2")
            chain = {"M1": [["L1"], ["L2"]], "M2": [["M1"], ["M1", "L2"], ["L1"], ["L2"]]}
            prop = [["L1"], ["L2"]]
        return EstimatorConfig(
            method="iw" if estimator == "iw" else "mc",
            effect_spec=self.effect_spec(),
            propensity_terms=prop,
            chain_order=order,
            chain_term_plan=chain,
            outcome_term_plan=self.outcome_plan(estimator == "mc-misspecified"),
            draws=draws,
            marginal_method=marginal_method,
            force=force,
            separation="allow" if tolerant else "raise",
            aliased="drop" if tolerant else "error",
            seed=seed,
            levels=self.levels(),
        )


def generate_study(study: int, n: int, params, seed: int) -> ObservedDataset:
    return StudyDgp(study, tuple(params)).generate(n, seed)


def study_truth(dgp: StudyDgp, N: int = 50000, seed: int = 0, draws: int = 200) -> dict:
    """Population truth by imputation with the true models on ``N`` subjects."""
    return population_truth(dgp, dgp.effect_spec(), dgp.levels(), N=N, seed=seed, draws=draws)


@dataclass(frozen=True)
class StudyConfig:
    study: int
    n: int
    params: tuple
    replicates: int = 200
    seed: int = 0
    estimators: tuple = ("iw", "mc")
    bootstrap: int = 0
    level: float = 0.95
    draws: int = 100
    truth_n: int = 50000
    truth_draws: int = 200
    threads: int = 1
    tolerant: bool = True
    l2_prob: float = 0.1
    weights: bool = False
    paper_scale: bool = False
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.study not in STUDIES:
            raise ConfigError(f"unknown study {self.study!r}", "study")
        if self.replicates < 2:
            raise ConfigError("replicates must be at least 2", "replicates")
        if self.n < 10:
            raise ConfigError("n must be at least 10", "n")
        for e in self.estimators:
            if e not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {e!r}", "estimators")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.paper_scale:
            object.__setattr__(self, "replicates", 1000)

    @property
    def custom(self) -> bool:
        """True when ``(params, n)`` is off the published grid."""
        return self.l2_prob != 0.1 or not in_grid(self.study, self.params, self.n)

    def dgp(self) -> StudyDgp:
        return StudyDgp(self.study, self.params, self.l2_prob)


def _replicate(cfg: StudyConfig, r: int) -> dict:
    dgp = cfg.dgp()
    data_seed = KeyedStream(cfg.seed, ("study-data", r)).key & _SEED_MASK
    data = dgp.generate(cfg.n, data_seed)
    out = {}
    for name in cfg.estimators:
        ecfg = dgp.estimator_config(name, seed=cfg.seed, draws=cfg.draws, tolerant=cfg.tolerant)
        stream = KeyedStream(cfg.seed, ("study-estimate", r, name))
        rec = {"point": None, "ci": None}
        try:
            if cfg.bootstrap > 0:
                rep = bootstrap(data, ecfg, cfg.bootstrap, level=cfg.level,
                                seed=stream.key & _SEED_MASK, threads=1)
                rec["point"], rec["ci"] = rep.point, rep.ci
            else:
                rec["point"] = estimate(data, ecfg, stream).quantities()
        except _RECOVERABLE:
            pass
        if name == "iw" and cfg.weights:
            try:
                dup = iw_duplicated(data, ecfg, stream)
                w = dup.weight.reshape(dup.n, dup.rows_per_subject)
                rec["weights"] = w
                rec["weight_summary"] = weight_diagnostics(dup)["positions"]
            except _RECOVERABLE:
                pass
        out[name] = rec
    return out


def _replicate_chunk(args):
    cfg, rs = args
    return [(r, _replicate(cfg, r)) for r in rs]


def run_replicates(cfg: StudyConfig) -> list:
    reps = list(range(cfg.replicates))
    if cfg.threads <= 1:
        return [_replicate(cfg, r) for r in reps]
    chunks = [reps[i::cfg.threads] for i in range(cfg.threads) if reps[i::cfg.threads]]
    results = {}
    with ProcessPoolExecutor(max_workers=cfg.threads) as ex:
        for chunk in ex.map(_replicate_chunk, [(cfg, c) for c in chunks]):
            results.update(dict(chunk))
    return [results[r] for r in reps]


def pooled_weight_sd(replicates: list, log10: bool = False) -> list:
    """Per-position sd of the inverse-weighting weights pooled over replicates.

    Zero weights (rows whose ``a0`` differs from the observed exposure) are
    left out; with ``log10`` the sd is over their base-10 logarithm.
    """
    mats = [r["iw"]["weights"] for r in replicates if "weights" in r.get("iw", {})]
    if not mats:
        return []
    w = np.vstack(mats)
    out = []
    for pos in range(w.shape[1]):
        col = w[:, pos]
        col = col[col > 0]
        if log10:
            col = np.log10(col)
        out.append(float(col.std(ddof=1)) if col.size > 1 else float("nan"))
    return out


def summarize(cfg: StudyConfig, replicates: list, truth: dict, effects=None) -> list:
    """One row per estimator and effect: truth, mean estimate, ese, coverage."""
    effects = tuple(effects or REPORTED[cfg.study])
    rows = []
    b1, e21, a2 = cfg.params
    for name in cfg.estimators:
        recs = [r[name] for r in replicates]
        ok = [x for x in recs if x["point"] is not None]
        for eff in effects:
            est = np.array([x["point"][eff] for x in ok])
            row = {"study": cfg.study, "effect": eff, "b1": b1, "e21": e21, "a2": a2,
                   "n": cfg.n, "estimator": name, "true": float(truth[eff]),
                   "est": float(est.mean()) if est.size else float("nan"),
                   "ese": float(est.std(ddof=1)) if est.size > 1 else float("nan"),
                   "completed": len(ok), "failures": len(recs) - len(ok)}
            if cfg.bootstrap > 0:
                hits = [x["ci"][eff][0] <= truth[eff] <= x["ci"][eff][1] for x in ok]
                row["coverage"] = float(np.mean(hits)) if hits else float("nan")
            rows.append(row)
    return rows


@dataclass(frozen=True)
class StudyResult:
    config: StudyConfig
    truth: dict
    rows: list
    replicates: list = field(repr=False, default_factory=list)

    def row(self, estimator: str, effect: str) -> dict:
        for r in self.rows:
            if r["estimator"] == estimator and r["effect"] == effect:
                return r
        raise KeyError((estimator, effect))

    def weight_sd(self, log10: bool = False) -> list:
        return pooled_weight_sd(self.replicates, log10)


def run_study(cfg: StudyConfig, effects=None) -> StudyResult:
    """Replicate the study, compare each estimator with the population truth."""
    dgp = cfg.dgp()
    truth_seed = KeyedStream(cfg.seed, ("study-truth",)).key & _SEED_MASK
    truth = study_truth(dgp, N=cfg.truth_n, seed=truth_seed, draws=cfg.truth_draws)
    reps = run_replicates(cfg)
    return StudyResult(cfg, truth, summarize(cfg, reps, truth, effects), reps)


TABLE_COLUMNS = ("study", "effect", "b1", "e21", "a2", "n", "estimator", "true", "est", "ese",
                 "coverage", "completed", "failures")


def write_table(rows: list, path, header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS, extrasaction="ignore",
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (_fmt(r[k]) if k in r else "") for k in TABLE_COLUMNS})


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def with_replicates(cfg: StudyConfig, replicates: int) -> StudyConfig:
    return replace(cfg, replicates=replicates, paper_scale=False)
