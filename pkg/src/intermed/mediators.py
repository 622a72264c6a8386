"""Exposure-group-specific mediator models.

A :class:`MediatorChain` factorizes the joint mediator density within one
exposure group as a product of conditionals along an arbitrary order. A
:class:`MarginalModelSet` holds one covariate-only model per mediator.

Row sources follow the broadcasting convention of :mod:`intermed.glm`:
per-subject covariates are ``(n,)`` vectors, or ``(n, 1)`` when combined
with ``(n, K)`` Monte-Carlo draws.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .dataset import BINARY, ObservedDataset
from .errors import GlmError, MediatorModelError, UnsupportedStructureError
from .glm import (
    FittedGlm,
    GlmSpec,
    TermSpec,
    fit_glm,
    linear_predictor,
    terms_from_lists,
)
from .rng import KeyedStream

NORMAL = "normal"
BERNOULLI = "bernoulli"
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)

# exact propagation enumerates 2**r mixture components over Bernoulli roots
MAX_BERNOULLI_ROOTS = 10


@dataclass(frozen=True)
class ConditionalMediatorModel:
    mediator: str
    kind: str
    fit: FittedGlm
    sigma2: float | None = None

    def __post_init__(self):
        if self.kind not in (NORMAL, BERNOULLI):
            raise MediatorModelError(f"unknown mediator model kind {self.kind!r}")
        if self.kind == NORMAL and (self.sigma2 is None or self.sigma2 < 0):
            raise MediatorModelError(f"mediator {self.mediator!r}: invalid residual variance")

    @property
    def terms(self) -> tuple:
        return self.fit.terms

    def mean(self, rows: Mapping):
        eta = linear_predictor(self.fit.coefficients, self.fit.terms, rows)
        return expit(eta) if self.kind == BERNOULLI else eta

    def log_density(self, value, rows: Mapping):
        mu = self.mean(rows)
        if self.kind == BERNOULLI:
            eta = linear_predictor(self.fit.coefficients, self.fit.terms, rows)
            # log p = -log(1 + e^-eta), log(1-p) = -log(1 + e^eta)
            return -np.where(value > 0.5, np.logaddexp(0.0, -eta), np.logaddexp(0.0, eta))
        if self.sigma2 == 0:
            return np.where(value == mu, np.inf, -np.inf)
        z2 = (value - mu) ** 2 / self.sigma2
        return -0.5 * z2 - 0.5 * np.log(self.sigma2) - _LOG_SQRT_2PI

    def density(self, value, rows: Mapping):
        return np.exp(self.log_density(value, rows))

    def sample(self, rows: Mapping, stream: KeyedStream, index, draws: int | None = None):
        """Draws keyed by ``(stream, index, draw)``; shape ``(n,)`` or ``(n, draws)``."""
        mu = self.mean(rows)
        if self.kind == BERNOULLI:
            u = stream.uniform(index, draws)
            return (u <= mu).astype(np.float64)
        if self.sigma2 == 0:
            shape = (len(index),) if draws is None else (len(index), draws)
            return np.broadcast_to(mu, shape).astype(np.float64)
        return mu + np.sqrt(self.sigma2) * stream.normal(index, draws)

    def mediator_factors(self, mediators: Sequence[str]) -> set:
        return {f for t in self.terms for f in t.factors if f in mediators}


@dataclass(frozen=True)
class MediatorChain:
    group: int
    order: tuple
    conditionals: tuple

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(self.order))
        object.__setattr__(self, "conditionals", tuple(self.conditionals))
        if [c.mediator for c in self.conditionals] != list(self.order):
            raise MediatorModelError("conditionals must follow the factorization order")
        for i, c in enumerate(self.conditionals):
            later = c.mediator_factors(self.order[i:])
            if later:
                raise MediatorModelError(
                    f"conditional for {c.mediator!r} references {sorted(later)}, "
                    "which are not strictly earlier in the order")

    def model(self, name: str) -> ConditionalMediatorModel:
        return self.conditionals[self.order.index(name)]

    def parents(self, name: str) -> set:
        return self.model(name).mediator_factors(self.order)

    def ancestors(self, name: str) -> list:
        """Mediators the conditional for ``name`` depends on, transitively, in chain order."""
        seen = set()
        todo = list(self.parents(name))
        while todo:
            m = todo.pop()
            if m not in seen:
                seen.add(m)
                todo.extend(self.parents(m))
        return [m for m in self.order if m in seen]


@dataclass(frozen=True)
class MarginalModelSet:
    group: int
    marginals: dict

    def __post_init__(self):
        names = set(self.marginals)
        for m in self.marginals.values():
            bad = m.mediator_factors(names)
            if bad:
                raise MediatorModelError(
                    f"marginal model for {m.mediator!r} uses mediator regressors {sorted(bad)}")

    def model(self, name: str) -> ConditionalMediatorModel:
        return self.marginals[name]


def _group_rows(data: ObservedDataset, group: int) -> dict:
    mask = data.exposure == group
    if not np.any(mask):
        raise MediatorModelError(f"empty exposure group A={group}")
    return data.subset(mask)


def _fit_one(rows: dict, name: str, kind: str, terms: tuple,
             aliased: str = "error", separation: str = "raise") -> ConditionalMediatorModel:
    y = rows[name]
    if np.ptp(y) == 0:
        raise MediatorModelError(f"zero variance mediator {name!r} within exposure group")
    link = "logit" if kind == BERNOULLI else "identity"
    try:
        fit = fit_glm(GlmSpec(name, link, terms), rows, separation=separation, aliased=aliased)
    except GlmError as e:
        raise type(e)(f"mediator {name!r}: {e}") from e
    if kind == NORMAL:
        if not fit.residual_variance > 0:
            raise MediatorModelError(f"zero variance mediator {name!r}: residual variance is 0")
        return ConditionalMediatorModel(name, NORMAL, fit, fit.residual_variance)
    return ConditionalMediatorModel(name, BERNOULLI, fit, None)


def _kind(data: ObservedDataset, name: str) -> str:
    return BERNOULLI if data.schema.kind_of(name) == BINARY else NORMAL


def _resolve_order(data: ObservedDataset, order) -> tuple:
    names = data.schema.mediator_names
    if order is None:
        return names
    out = tuple(names[o] if isinstance(o, (int, np.integer)) else o for o in order)
    if sorted(out) != sorted(names):
        raise MediatorModelError(f"order {out} is not a permutation of {names}")
    return out


def _plan_terms(plan, name, default) -> tuple:
    if plan is None or name not in plan:
        return terms_from_lists(default)
    return terms_from_lists(plan[name])


def fit_chain(data: ObservedDataset, group: int, order=None,
              term_plan: Mapping | None = None, aliased: str = "error",
              separation: str = "raise") -> MediatorChain:
    """Fit the conditional factorization on rows with ``A == group``.

    ``term_plan`` maps a mediator name to a list of terms (lists of factor
    names; the intercept is added). By default each conditional uses every
    earlier mediator and every covariate as main effects.
    """
    rows = _group_rows(data, group)
    order = _resolve_order(data, order)
    covs = set(data.schema.covariate_names)
    conds = []
    for i, name in enumerate(order):
        default = [[m] for m in order[:i]] + [[c] for c in data.schema.covariate_names]
        terms = _plan_terms(term_plan, name, default)
        allowed = covs | set(order[:i])
        for t in terms:
            bad = [f for f in t.factors if f not in allowed]
            if bad:
                raise MediatorModelError(
                    f"conditional for {name!r} may use covariates and earlier mediators "
                    f"{order[:i]} only; got {bad}")
        conds.append(_fit_one(rows, name, _kind(data, name), terms, aliased, separation))
    return MediatorChain(group, order, tuple(conds))


def fit_marginals(data: ObservedDataset, group: int,
                  term_plan: Mapping | None = None, aliased: str = "error",
                  separation: str = "raise") -> MarginalModelSet:
    """Covariate-only model per mediator on rows with ``A == group``."""
    rows = _group_rows(data, group)
    covs = set(data.schema.covariate_names)
    out = {}
    for name in data.schema.mediator_names:
        terms = _plan_terms(term_plan, name, [[c] for c in data.schema.covariate_names])
        for t in terms:
            bad = [f for f in t.factors if f not in covs]
            if bad:
                raise MediatorModelError(
                    f"marginal model for {name!r} may use covariates only; got {bad}")
        out[name] = _fit_one(rows, name, _kind(data, name), terms, aliased, separation)
    return MarginalModelSet(group, out)


def joint_log_density(chain: MediatorChain, rows: Mapping):
    total = 0.0
    for c in chain.conditionals:
        total = total + c.log_density(rows[c.mediator], rows)
    return total


def joint_density(chain: MediatorChain, rows: Mapping):
    """Product of the chain's conditional densities at the mediator values in ``rows``."""
    d = np.exp(joint_log_density(chain, rows))
    if not np.all(np.isfinite(d)):
        raise MediatorModelError("nonfinite joint density")
    return d


# -- implied marginals ---------------------------------------------------------

def _linear_coefficients(model: ConditionalMediatorModel, mediators: Sequence[str],
                         rows: Mapping, n: int):
    """Split a conditional mean into ``c0(l) + sum_j c_j(l) M_j``.

    Raises UnsupportedStructureError for terms with two or more mediator factors.
    """
    c0 = np.zeros(n)
    cj = {}
    for b, t in zip(model.fit.coefficients, model.terms):
        meds = [f for f in t.factors if f in mediators]
        if len(meds) > 1:
            raise UnsupportedStructureError(
                f"product of mediators {meds} in the model for {model.mediator!r}")
        cov = TermSpec(tuple(f for f in t.factors if f not in mediators)).evaluate(rows)
        contrib = b * np.broadcast_to(cov, (n,))
        if meds:
            cj[meds[0]] = cj.get(meds[0], 0.0) + contrib
        else:
            c0 = c0 + contrib
    return c0, cj


def exact_structure(chain: MediatorChain, s: str) -> list:
    """Bernoulli roots to enumerate for an exact implied marginal of ``s``.

    Raises UnsupportedStructureError when no closed form is implemented.
    """
    anc = chain.ancestors(s)
    target = chain.model(s)
    if target.kind == BERNOULLI:
        if anc:
            raise UnsupportedStructureError(
                f"binary mediator {s!r} depends on other mediators; no closed-form marginal")
        return []
    roots = []
    for m in anc:
        mod = chain.model(m)
        if mod.kind == BERNOULLI:
            if chain.parents(m):
                raise UnsupportedStructureError(
                    f"binary mediator {m!r} is not a root of the factorization")
            roots.append(m)
    for m in anc + [s]:
        mod = chain.model(m)
        if mod.kind == NORMAL:
            for t in mod.terms:
                if len([f for f in t.factors if f in chain.order]) > 1:
                    raise UnsupportedStructureError(
                        f"product of mediators {t.name!r} in the model for {m!r}")
    if len(roots) > MAX_BERNOULLI_ROOTS:
        raise UnsupportedStructureError("too many binary roots for exact enumeration")
    return roots


def supports_exact(chain: MediatorChain, s: str) -> bool:
    try:
        exact_structure(chain, s)
        return True
    except UnsupportedStructureError:
        return False


def gaussian_moments(chain: MediatorChain, s: str, rows: Mapping, n: int,
                     fixed: Mapping | None = None):
    """Mean and variance of ``s`` given covariates by linear-Gaussian propagation.

    Mediators in ``fixed`` are held at the given values (variance zero).
    """
    fixed = fixed or {}
    needed = chain.ancestors(s) + [s]
    mean, cov = {}, {}
    done = []
    for m in needed:
        if m in fixed:
            mean[m] = np.broadcast_to(np.asarray(fixed[m], dtype=float), (n,))
            for k in done:
                cov[(m, k)] = cov[(k, m)] = np.zeros(n)
            cov[(m, m)] = np.zeros(n)
            done.append(m)
            continue
        mod = chain.model(m)
        c0, cj = _linear_coefficients(mod, chain.order, rows, n)
        mu = c0.copy()
        for j, c in cj.items():
            mu = mu + c * mean[j]
        mean[m] = mu
        for k in done:
            acc = np.zeros(n)
            for j, c in cj.items():
                acc = acc + c * cov[(j, k)]
            cov[(m, k)] = cov[(k, m)] = acc
        var = np.full(n, mod.sigma2)
        for j, c in cj.items():
            for i, d in cj.items():
                var = var + c * d * cov[(j, i)]
        cov[(m, m)] = var
        done.append(m)
    return mean[s], cov[(s, s)]


def _normal_pdf(x, mu, var):
    return np.exp(-0.5 * (x - mu) ** 2 / var) / np.sqrt(2.0 * np.pi * var)


def _exact_density(chain: MediatorChain, s: str, m_s, rows: Mapping, n: int):
    roots = exact_structure(chain, s)
    target = chain.model(s)
    if target.kind == BERNOULLI:
        return target.density(m_s, rows) * np.ones(n)
    if not roots:
        mu, var = gaussian_moments(chain, s, rows, n)
        return _normal_pdf(m_s, mu, var)
    probs = {r: np.broadcast_to(chain.model(r).mean(rows), (n,)) for r in roots}
    total = np.zeros(n)
    for combo in itertools.product((0.0, 1.0), repeat=len(roots)):
        w = np.ones(n)
        for r, b in zip(roots, combo):
            w = w * (probs[r] if b else 1.0 - probs[r])
        mu, var = gaussian_moments(chain, s, rows, n, dict(zip(roots, combo)))
        total = total + w * _normal_pdf(m_s, mu, var)
    return total


def _expand(rows: Mapping, sl) -> dict:
    return {k: np.asarray(v)[sl][:, None] for k, v in rows.items() if np.ndim(v) >= 1}


def _mc_density(chain: MediatorChain, s: str, m_s, rows: Mapping, n: int,
                stream: KeyedStream, draws: int, index):
    """Average of ``f(m_s | m_<s^(k), l)`` over ``draws`` samples of the upstream chain."""
    upstream = chain.ancestors(s)
    target = chain.model(s)
    m_s = np.broadcast_to(np.asarray(m_s, dtype=float), (n,))
    out = np.empty(n)
    step = max(1, (1 << 18) // max(draws, 1))
    for a in range(0, n, step):
        sl = slice(a, min(n, a + step))
        sub = _expand(rows, sl)
        idx = np.asarray(index)[sl]
        for m in upstream:
            sub[m] = chain.model(m).sample(sub, stream.child(m), idx, draws)
        sub[s] = m_s[sl][:, None]
        out[sl] = np.mean(target.density(sub[s], sub), axis=1)
    return out


def implied_marginal_density(chain: MediatorChain, s: str, m_s, rows: Mapping,
                             method: str = "auto", stream: KeyedStream | None = None,
                             draws: int = 2000, index=None):
    """Density of mediator ``s`` given covariates, marginal over the other mediators.

    ``method`` is ``"exact"`` (closed-form propagation; a normal law, or an
    exact mixture over binary root mediators), ``"mc"`` (Monte-Carlo average
    over ``draws`` samples of the upstream chain) or ``"auto"`` (exact when
    the structure allows it).
    """
    n = np.shape(m_s)[0] if np.ndim(m_s) else _n_rows(rows)
    if method == "auto":
        method = "exact" if supports_exact(chain, s) else "mc"
    if method == "exact":
        return _exact_density(chain, s, m_s, rows, n)
    if method == "mc":
        if stream is None:
            raise MediatorModelError("mc implied marginals need a random stream")
        if index is None:
            index = np.arange(n)
        return _mc_density(chain, s, m_s, rows, n, stream, draws, index)
    raise MediatorModelError(f"unknown implied-marginal method {method!r}")


def _n_rows(rows: Mapping) -> int:
    for v in rows.values():
        if np.ndim(v) >= 1:
            return np.shape(v)[0]
    raise MediatorModelError("row source has no array columns")


def sample_marginal(mset: MarginalModelSet, s: str, rows: Mapping, stream: KeyedStream,
                    index, draws: int | None = None):
    return mset.model(s).sample(rows, stream, index, draws)


def marginal_mean(mset: MarginalModelSet, s: str, rows: Mapping):
    return mset.model(s).mean(rows)

