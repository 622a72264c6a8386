"""End-to-end estimation by inverse weighting (``iw``) or Monte-Carlo imputation (``mc``)."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

from .dataset import BINARY, ObservedDataset
from .duplication import DuplicatedDataset, build_iw_rows, build_mc_rows
from .effects import (
    EffectEstimates,
    EffectModelSpec,
    Level,
    default_levels,
    derive_effects,
    fit_effect_model,
)
from .errors import ConfigError, DataError
from .glm import ALIAS_MODES, SEPARATION_MODES, FittedGlm, GlmSpec, fit_glm, terms_from_lists
from .mediators import fit_chain, fit_marginals
from .rng import KeyedStream

METHODS = ("iw", "mc")


@dataclass(frozen=True)
class EstimatorConfig:
    """Everything an estimate needs besides the data.

    Term plans are lists of terms, each a list of factor names; intercepts
    are added automatically. ``None`` selects main effects of every
    available regressor. ``outcome_term_plan`` may be a single plan or a
    mapping from exposure group to plan. ``separation="allow"``
    keeps separated logistic fits (last iterate) rather than failing. ``aliased="drop"`` zeroes aliased columns in the
    propensity, mediator and outcome models; the effect model never drops.
    """

    method: str
    effect_spec: EffectModelSpec
    propensity_terms: tuple | None = None
    chain_order: tuple | None = None
    chain_term_plan: Mapping | None = None
    marginal_term_plan: Mapping | None = None
    outcome_term_plan: object = None
    draws: int = 100
    marginal_method: str = "auto"
    marginal_draws: int = 2000
    truncation: float | None = None
    force: bool = False
    separation: str = "raise"
    aliased: str = "error"
    seed: int = 0
    levels: tuple | None = None
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}", "estimator.method")
        if self.draws < 1:
            raise ConfigError("draws must be positive", "estimator.draws")
        if self.marginal_method not in ("auto", "exact", "mc"):
            raise ConfigError(f"unknown marginal method {self.marginal_method!r}",
                              "estimator.marginal_method")

        if self.separation not in SEPARATION_MODES:
            raise ConfigError(f"unknown separation mode {self.separation!r}",
                              "estimator.separation")
        if self.aliased not in ALIAS_MODES:
            raise ConfigError(f"unknown aliasing mode {self.aliased!r}", "estimator.aliased")

    def with_method(self, method: str) -> "EstimatorConfig":
        return replace(self, method=method)

    def resolved_levels(self) -> tuple:
        return tuple(self.levels) if self.levels else default_levels(self.effect_spec)


def _check(data: ObservedDataset, cfg: EstimatorConfig) -> None:
    spec = cfg.effect_spec
    s = data.schema
    if spec.t != s.t:
        raise ConfigError(f"effect model has t={spec.t} but the data have {s.t} mediators",
                          "effect_model")
    for c in spec.confounder_mains:
        if c not in s.covariate_names:
            raise ConfigError(f"effect-model covariate {c!r} is not a declared covariate",
                              "effect_model.confounders")
    need = s.p + s.t + 2
    if data.n < need:
        raise DataError(f"n={data.n} rows is below the minimum {need} (p + t + 2)")
    A = data.exposure
    if A.min() == A.max():
        raise DataError("both exposure groups must be nonempty")


def _default_main(names) -> list:
    return [[x] for x in names]


def fit_propensity(data: ObservedDataset, cfg: EstimatorConfig) -> FittedGlm:
    s = data.schema
    plan = cfg.propensity_terms
    terms = terms_from_lists(_default_main(s.covariate_names) if plan is None else plan)
    for t in terms:
        bad = [f for f in t.factors if f not in s.covariate_names]
        if bad:
            raise ConfigError(f"propensity model may use covariates only; got {bad}",
                              "estimator.propensity_terms")
    rows = {c: data[c] for c in s.covariate_names}
    rows[s.exposure_name] = data.exposure
    return fit_glm(GlmSpec(s.exposure_name, "logit", terms), rows, separation=cfg.separation,
                   aliased=cfg.aliased)


def _outcome_terms(data: ObservedDataset, cfg: EstimatorConfig, group: int) -> tuple:
    s = data.schema
    plan = cfg.outcome_term_plan
    if isinstance(plan, Mapping):
        plan = plan.get(group, plan.get(str(group)))
    if plan is None:
        plan = _default_main(s.mediator_names + s.covariate_names)
    terms = terms_from_lists(plan)
    allowed = set(s.mediator_names) | set(s.covariate_names)
    for t in terms:
        bad = [f for f in t.factors if f not in allowed]
        if bad:
            raise ConfigError(f"outcome model may use mediators and covariates only; got {bad}",
                              "estimator.outcome_term_plan")
    return terms


def fit_outcome_models(data: ObservedDataset, cfg: EstimatorConfig) -> dict:
    s = data.schema
    link = "logit" if s.outcome_kind == BINARY else "identity"
    fits = {}
    cols = {nm: data[nm] for nm in (s.outcome_name,) + s.mediator_names + s.covariate_names}
    for g in (0, 1):
        spec = GlmSpec(s.outcome_name, link, _outcome_terms(data, cfg, g))
        fits[g] = fit_glm(spec, cols, mask=data.exposure == g,
                          separation=cfg.separation, aliased=cfg.aliased)
    return fits


def iw_duplicated(data: ObservedDataset, cfg: EstimatorConfig,
                  stream: KeyedStream | None = None) -> DuplicatedDataset:
    """Steps up to the weighted duplicated data, for estimation or diagnostics."""
    _check(data, cfg)
    stream = stream or KeyedStream(cfg.seed, ("estimate",))
    prop = fit_propensity(data, cfg)
    chains = {g: fit_chain(data, g, cfg.chain_order, cfg.chain_term_plan, cfg.aliased,
                           cfg.separation)
              for g in (0, 1)}
    return build_iw_rows(data, prop, chains, cfg.marginal_method, stream.child("iw"),
                         force=cfg.force, truncation=cfg.truncation,
                         marginal_draws=cfg.marginal_draws)


def mc_duplicated(data: ObservedDataset, cfg: EstimatorConfig,
                  stream: KeyedStream | None = None) -> DuplicatedDataset:
    _check(data, cfg)
    stream = stream or KeyedStream(cfg.seed, ("estimate",))
    fits = fit_outcome_models(data, cfg)
    margs = {g: fit_marginals(data, g, cfg.marginal_term_plan, cfg.aliased, cfg.separation)
             for g in (0, 1)}
    return build_mc_rows(data, fits, margs, cfg.draws, stream)


def _finish(dup: DuplicatedDataset, data: ObservedDataset, cfg: EstimatorConfig,
            diagnostics: dict) -> EffectEstimates:
    params = fit_effect_model(dup, cfg.effect_spec, cfg.separation)
    return derive_effects(params, cfg.resolved_levels(), data.schema.mediator_names,
                          diagnostics)


def estimate_iw(data: ObservedDataset, cfg: EstimatorConfig,
                stream: KeyedStream | None = None) -> EffectEstimates:
    if cfg.method != "iw":
        raise ConfigError("estimate_iw needs method 'iw'", "estimator.method")
    if cfg.effect_spec.link == "logit" and data.schema.outcome_kind != BINARY:
        raise ConfigError("a logit effect model under weighting needs a binary outcome",
                          "effect_model.link")
    dup = iw_duplicated(data, cfg, stream)
    c = dup.components
    diag = {"clamped": c.clamped_count, "density_evaluations": c.evaluations,
            "truncated": c.truncated_count}
    return _finish(dup, data, cfg, diag)


def estimate_mc(data: ObservedDataset, cfg: EstimatorConfig,
                stream: KeyedStream | None = None) -> EffectEstimates:
    if cfg.method != "mc":
        raise ConfigError("estimate_mc needs method 'mc'", "estimator.method")
    if cfg.effect_spec.link == "logit" and data.schema.outcome_kind != BINARY:
        raise ConfigError("a logit effect model needs an outcome in [0, 1]", "effect_model.link")
    dup = mc_duplicated(data, cfg, stream)
    return _finish(dup, data, cfg, {"draws": cfg.draws})


def estimate(data: ObservedDataset, cfg: EstimatorConfig,
             stream: KeyedStream | None = None) -> EffectEstimates:
    """Dispatch on ``cfg.method``; the default stream is ``(cfg.seed, "estimate")``."""
    if cfg.method == "iw":
        return estimate_iw(data, cfg, stream)
    if cfg.method == "mc":
        return estimate_mc(data, cfg, stream)
    raise ConfigError(f"unknown method {cfg.method!r}", "estimator.method")


def level_grid(label_values: Mapping) -> tuple:
    """``{"": {"L2": 0}, "_L2": {"L2": 1}}`` -> tuple of Levels."""
    return tuple(Level(k, dict(v)) for k, v in label_values.items())
