"""Effect-model design, parameter-to-effect mapping and permutation sensitivity.

The effect model regresses the (weighted or imputed) potential-outcome
response of the duplicated data on::

    mu0 + sum_s [theta_s + theta_sc . L] a^(s) (1 - J)
        + [mu0J + (gamma0 + gamma0c . L) a^(0)
                + (gamma1 + gamma1c . L) a^(1) 1[a^(1) = ... = a^(t)]] J
        + sum_c mu_c L_c  (+ optional J x L_c, optional gamma01 term)

on the scale of the link, so that its coefficients are the effects.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .duplication import DuplicatedDataset
from .errors import ConfigError, DataError
from .glm import IDENTITY, LINKS, fit_least_squares, fit_logistic

EFFECT_NAMES = ("sumIE", "jointIE", "mutualIE", "DE", "TE")


@dataclass(frozen=True)
class EffectModelSpec:
    link: str
    t: int
    moderators: tuple = ()
    confounder_mains: tuple = ()
    include_j_by_covariate: bool = False
    alt_decomposition: bool = False

    def __post_init__(self):
        object.__setattr__(self, "moderators", tuple(self.moderators))
        object.__setattr__(self, "confounder_mains", tuple(self.confounder_mains))
        if self.link not in LINKS:
            raise ConfigError(f"unknown link {self.link!r}", "effect_model.link")
        if self.t < 1:
            raise ConfigError("t must be at least 1", "effect_model.t")
        missing = [m for m in self.moderators if m not in self.confounder_mains]
        if missing:
            raise ConfigError(f"moderators {missing} must also be confounder main effects",
                              "effect_model.moderators")

    def _suffix(self, c: str) -> str:
        return "c" if len(self.moderators) == 1 else f"c_{c}"

    def column_names(self) -> list:
        names = ["mu0"]
        for s in range(1, self.t + 1):
            names.append(f"theta{s}")
            names += [f"theta{s}{self._suffix(c)}" for c in self.moderators]
        names.append("mu0J")
        names.append("gamma0")
        names += [f"gamma0{self._suffix(c)}" for c in self.moderators]
        names.append("gamma1")
        names += [f"gamma1{self._suffix(c)}" for c in self.moderators]
        names += [f"mu_{c}" for c in self.confounder_mains]
        if self.include_j_by_covariate:
            names += [f"muJ_{c}" for c in self.confounder_mains]
        if self.alt_decomposition:
            names.append("gamma01")
        return names

    def effect_columns(self) -> list:
        """Names of the coefficients that encode effects (excludes intercepts and mains)."""
        return [c for c in self.column_names()
                if c.startswith(("theta", "gamma"))]


def build_effect_design(dup: DuplicatedDataset, spec: EffectModelSpec):
    """Design matrix, response, weights and column names for the effect model."""
    if dup.t != spec.t:
        raise DataError(f"duplicated data has t={dup.t} but the effect model expects t={spec.t}")
    for c in spec.confounder_mains:
        if c not in dup.covariates:
            raise DataError(f"effect-model covariate {c!r} missing from duplicated data")
    a = dup.a
    J = dup.j
    nj = 1.0 - J
    mods = [dup.covariates[c] for c in spec.moderators]
    equal = np.all(a[:, 1:] == a[:, 1:2], axis=1).astype(float)
    cols = [np.ones_like(J)]
    for s in range(1, spec.t + 1):
        base = a[:, s] * nj
        cols.append(base)
        cols += [base * m for m in mods]
    cols.append(J)
    g0 = a[:, 0] * J
    cols.append(g0)
    cols += [g0 * m for m in mods]
    g1 = a[:, 1] * equal * J
    cols.append(g1)
    cols += [g1 * m for m in mods]
    cols += [dup.covariates[c] for c in spec.confounder_mains]
    if spec.include_j_by_covariate:
        cols += [J * dup.covariates[c] for c in spec.confounder_mains]
    if spec.alt_decomposition:
        cols.append(a[:, 0] * a[:, 1] * equal * J)
    X = np.column_stack(cols)
    return X, dup.response, dup.weight, spec.column_names()


@dataclass(frozen=True)
class EffectParameters:
    mu0: float
    theta: np.ndarray
    theta_c: np.ndarray
    mu0J: float
    gamma0: float
    gamma0c: np.ndarray
    gamma1: float
    gamma1c: np.ndarray
    confounders: dict
    confounders_j: dict = field(default_factory=dict)
    gamma01: float | None = None
    moderators: tuple = ()
    names: tuple = ()
    values: tuple = ()

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.values))

    @staticmethod
    def from_vector(beta, spec: EffectModelSpec) -> "EffectParameters":
        beta = np.asarray(beta, dtype=float)
        if not np.all(np.isfinite(beta)):
            raise DataError("nonfinite effect-model coefficients")
        names = spec.column_names()
        d = dict(zip(names, beta))
        q = len(spec.moderators)
        t = spec.t
        theta = np.array([d[f"theta{s}"] for s in range(1, t + 1)])
        theta_c = np.array([[d[f"theta{s}{spec._suffix(c)}"] for c in spec.moderators]
                            for s in range(1, t + 1)]).reshape(t, q)
        return EffectParameters(
            mu0=float(d["mu0"]), theta=theta, theta_c=theta_c, mu0J=float(d["mu0J"]),
            gamma0=float(d["gamma0"]),
            gamma0c=np.array([d[f"gamma0{spec._suffix(c)}"] for c in spec.moderators]),
            gamma1=float(d["gamma1"]),
            gamma1c=np.array([d[f"gamma1{spec._suffix(c)}"] for c in spec.moderators]),
            confounders={c: float(d[f"mu_{c}"]) for c in spec.confounder_mains},
            confounders_j=({c: float(d[f"muJ_{c}"]) for c in spec.confounder_mains}
                           if spec.include_j_by_covariate else {}),
            gamma01=float(d["gamma01"]) if spec.alt_decomposition else None,
            moderators=spec.moderators, names=tuple(names),
            values=tuple(float(x) for x in beta),
        )


@dataclass(frozen=True)
class Level:
    """A moderator setting at which effects are reported; ``label`` suffixes the names."""

    label: str = ""
    values: dict = field(default_factory=dict)

    def vector(self, moderators: Sequence[str]) -> np.ndarray:
        return np.array([float(self.values.get(m, 0.0)) for m in moderators])


def default_levels(spec: EffectModelSpec) -> tuple:
    return (Level("", {m: 0.0 for m in spec.moderators}),)


@dataclass(frozen=True)
class EffectEstimates:
    params: EffectParameters
    mediator_names: tuple
    levels: tuple
    derived: dict
    diagnostics: dict = field(default_factory=dict)

    def quantities(self) -> dict:
        """Flat mapping of every coefficient and derived effect."""
        out = dict(self.params.as_dict())
        out.update(self.derived)
        return out

    def ie_by_name(self, level_label: str = "") -> dict:
        return {m: self.derived[f"IE{s + 1}{level_label}"]
                for s, m in enumerate(self.mediator_names)}


def derive_effects(params: EffectParameters, levels: Sequence[Level] | None = None,
                   mediator_names: Sequence[str] | None = None,
                   diagnostics: Mapping | None = None) -> EffectEstimates:
    """Read the effects off the coefficients at each moderator level."""
    t = params.theta.shape[0]
    mods = params.moderators
    if levels is None:
        levels = (Level("", {m: 0.0 for m in mods}),)
    if mediator_names is None:
        mediator_names = tuple(f"M{s}" for s in range(1, t + 1))
    derived = {}
    for lev in levels:
        lv = lev.vector(mods)
        ies = params.theta + (params.theta_c @ lv if mods else 0.0)
        for s in range(t):
            derived[f"IE{s + 1}{lev.label}"] = float(ies[s])
        sum_ie = float(np.sum(ies))
        joint = float(params.gamma1 + (params.gamma1c @ lv if mods else 0.0))
        de = float(params.gamma0 + (params.gamma0c @ lv if mods else 0.0))
        derived[f"sumIE{lev.label}"] = sum_ie
        derived[f"jointIE{lev.label}"] = joint
        derived[f"mutualIE{lev.label}"] = joint - sum_ie
        derived[f"DE{lev.label}"] = de
        derived[f"TE{lev.label}"] = de + joint
    return EffectEstimates(params, tuple(mediator_names), tuple(levels), derived,
                           dict(diagnostics or {}))


def fit_effect_model(dup: DuplicatedDataset, spec: EffectModelSpec,
                     separation: str = "raise") -> EffectParameters:
    """Weighted least squares (identity) or logistic IRLS (logit) on the duplicated rows.

    For the imputation layout with a logit link the responses are fitted
    probabilities, and the logistic fit solves the fractional-response score
    equations.
    """
    X, y, w, _ = build_effect_design(dup, spec)
    if spec.link == IDENTITY:
        fit = fit_least_squares(X, y, w)
    else:
        fit = fit_logistic(X, y, w, separation=separation)
    return EffectParameters.from_vector(fit.coefficients, spec)


# -- permutation sensitivity ---------------------------------------------------

PERMUTATION_CAP = 6


def permutations_of(t: int) -> list:
    if t > PERMUTATION_CAP:
        raise ConfigError(f"permutation sensitivity supports at most {PERMUTATION_CAP} mediators")
    return list(itertools.permutations(range(t)))


def sensitivity_table(runs: Sequence[dict], mediator_names: Sequence[str],
                      levels: Sequence[Level]) -> list:
    """Min/max over permutations per mediator name (and per overall effect).

    Each run is ``{"order": ..., "estimates": EffectEstimates, "ci": {...} or None}``.
    """
    rows = []
    keys = []
    for lev in levels:
        for m in mediator_names:
            keys.append((m, lev.label, "IE"))
        for e in EFFECT_NAMES:
            keys.append((e, lev.label, e))
    for name, label, kind in keys:
        est, lo, hi = [], [], []
        for run in runs:
            ee: EffectEstimates = run["estimates"]
            if kind == "IE":
                s = ee.mediator_names.index(name)
                q = f"IE{s + 1}{label}"
            else:
                q = f"{kind}{label}"
            est.append(ee.derived[q])
            ci = run.get("ci")
            if ci is not None:
                lo.append(ci[q][0])
                hi.append(ci[q][1])
        row = {"effect": name + label, "min": min(est), "max": max(est)}
        if lo:
            row.update({"lower_min": min(lo), "lower_max": max(lo),
                        "upper_min": min(hi), "upper_max": max(hi)})
        rows.append(row)
    return rows



def permutation_sensitivity(data, cfg, B: int = 0, level: float = 0.95, seed: int | None = None,
                            threads: int = 1) -> dict:
    """Re-estimate under every relabeling of the mediators.

    Returns the per-permutation estimates (and percentile intervals when
    ``B > 0``) plus the min/max table keyed by mediator name.
    """
    from .estimators import estimate
    from .inference import bootstrap
    from .rng import KeyedStream

    t = data.schema.t
    seed = cfg.seed if seed is None else seed
    runs = []
    for order in permutations_of(t):
        relabeled = data.with_mediator_order(order)
        try:
            est = estimate(relabeled, cfg, KeyedStream(seed, ("estimate",)))
            ci = None
            if B > 0:
                rep = bootstrap(relabeled, cfg, B, level=level, seed=seed, threads=threads)
                ci = rep.ci
        except Exception as e:
            names = [data.schema.mediator_names[i] for i in order]
            err = type(e)(f"permutation {names}: {e}")
            err.__dict__.update(e.__dict__)
            raise err from e
        runs.append({"order": tuple(relabeled.schema.mediator_names), "estimates": est,
                     "ci": ci})
    levels = runs[0]["estimates"].levels
    table = sensitivity_table(runs, data.schema.mediator_names, levels)
    return {"runs": runs, "table": table}
