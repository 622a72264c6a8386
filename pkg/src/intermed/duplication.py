"""Per-subject duplicated datasets for the weighting and imputation estimators.

Each subject expands into ``t + 3`` rows (subject-major). Positions
``0..t`` form the ``J = 0`` staircase: ``a0 = 0`` and ``a^(k) = 1`` for
``k <= position``. The two ``J = 1`` rows differ by layout:

=========  ======================  ======================
position   weighting (``"iw"``)    imputation (``"mc"``)
=========  ======================  ======================
t + 1      a0 = A, a^(k) = 1 - A   a0 = 1 - A, a^(k) = A
t + 2      a0 = A, a^(k) = A       a0 = A, a^(k) = A
=========  ======================  ======================
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .dataset import ObservedDataset
from .errors import DataError, EstimationError, UnstableWeightsError
from .glm import FittedGlm, predict
from .mediators import (
    MarginalModelSet,
    implied_marginal_density,
    joint_log_density,
)
from .rng import KeyedStream

IW = "iw"
MC = "mc"
DENSITY_FLOOR = 1e-300
LOG_FLOOR = float(np.log(DENSITY_FLOOR))
MAX_CLAMPED_FRACTION = 0.01
CHUNK_ELEMENTS = 1 << 18


def staircase(t: int) -> np.ndarray:
    """``(t+1, t+1)`` exposure levels of the ``J = 0`` rows; column 0 is ``a0``."""
    a = np.zeros((t + 1, t + 1))
    for pos in range(t + 1):
        a[pos, 1:pos + 1] = 1.0
    return a


def exposure_pattern(layout: str, t: int, A: float) -> np.ndarray:
    """All ``t + 3`` rows of exposure levels for one subject with exposure ``A``."""
    rows = np.zeros((t + 3, t + 1))
    rows[: t + 1] = staircase(t)
    if layout == IW:
        rows[t + 1, 0], rows[t + 1, 1:] = A, 1 - A
    elif layout == MC:
        rows[t + 1, 0], rows[t + 1, 1:] = 1 - A, A
    else:
        raise DataError(f"unknown layout {layout!r}")
    rows[t + 2, :] = A
    return rows


@dataclass(frozen=True)
class WeightComponents:
    """Per-row weight factors (aligned with the duplicated rows)."""

    wa: np.ndarray
    wm: np.ndarray
    total: np.ndarray
    clamped_count: int
    evaluations: int
    truncated_count: int = 0


@dataclass(frozen=True)
class DuplicatedDataset:
    layout: str
    t: int
    mediator_names: tuple
    n: int
    subject: np.ndarray
    position: np.ndarray
    a: np.ndarray
    j: np.ndarray
    response: np.ndarray
    weight: np.ndarray
    covariates: dict
    components: WeightComponents | None = None

    @property
    def rows_per_subject(self) -> int:
        return self.t + 3

    def column(self, name: str) -> np.ndarray:
        if name in self.covariates:
            return self.covariates[name]
        raise DataError(f"unknown duplicated-data column {name!r}")

    def to_csv(self, path, header_comment: str | None = None) -> None:
        names = list(self.covariates)
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject"] + [f"a{k}" for k in range(self.t + 1)]
                       + ["j", "weight", "response"] + names)
            for r in range(self.subject.shape[0]):
                w.writerow([int(self.subject[r])]
                           + [int(x) for x in self.a[r]]
                           + [int(self.j[r]), f"{self.weight[r]:.17g}",
                              f"{self.response[r]:.17g}"]
                           + [f"{self.covariates[c][r]:.17g}" for c in names])


def _skeleton(data: ObservedDataset, layout: str):
    t = data.schema.t
    n = data.n
    rps = t + 3
    A = data.exposure
    a = np.empty((n, rps, t + 1))
    a[:, : t + 1, :] = staircase(t)[None]
    Ac = A[:, None]
    if layout == IW:
        a[:, t + 1, 0:1] = Ac
        a[:, t + 1, 1:] = 1 - Ac
    else:
        a[:, t + 1, 0:1] = 1 - Ac
        a[:, t + 1, 1:] = Ac
    a[:, t + 2, :] = Ac
    j = np.tile(np.r_[np.zeros(t + 1), 1.0, 1.0], n)
    subject = np.repeat(np.arange(n), rps)
    position = np.tile(np.arange(rps), n)
    covs = {c: np.repeat(data[c], rps) for c in data.schema.covariate_names}
    return a.reshape(n * rps, t + 1), j, subject, position, covs


def _observed_rows(data: ObservedDataset) -> dict:
    s = data.schema
    return {nm: data[nm] for nm in s.mediator_names + s.covariate_names}


def build_iw_rows(data: ObservedDataset, propensity: FittedGlm, chains: Mapping,
                  marginal_method: str = "auto", stream: KeyedStream | None = None,
                  force: bool = False, truncation: float | None = None,
                  marginal_draws: int = 2000) -> DuplicatedDataset:
    """Weighting layout with ``total = 1[a0 = A] * wa * wm``.

    ``chains`` maps exposure group (0, 1) to a fitted :class:`MediatorChain`.
    ``truncation`` caps each position's weights at that percentile.
    """
    s = data.schema
    t, n = s.t, data.n
    A = data.exposure
    rows = _observed_rows(data)
    p1 = np.asarray(predict(propensity, rows, "response"), dtype=float)
    # only the probability of the observed arm enters the weight
    p_obs = np.where(A == 1, p1, 1.0 - p1)
    if not np.all(p_obs > 0):
        raise UnstableWeightsError("observed exposure has propensity 0")
    wa_subj = 1.0 / p_obs

    clamped = 0
    evaluations = 0

    def clamp(logd):
        nonlocal clamped, evaluations
        logd = np.asarray(logd, dtype=float)
        bad = ~(logd >= LOG_FLOOR)
        clamped += int(bad.sum())
        evaluations += logd.size
        return np.where(bad, LOG_FLOOR, logd)

    ids = data.subject_ids
    log_joint = {g: clamp(joint_log_density(chains[g], rows)) for g in (0, 1)}
    log_marg = {}
    for m in s.mediator_names:
        for g in (0, 1):
            sub = None if stream is None else stream.child("implied", g, m)
            d = implied_marginal_density(chains[g], m, rows[m], rows, method=marginal_method,
                                         stream=sub, draws=marginal_draws, index=ids)
            with np.errstate(divide="ignore"):
                log_marg[(m, g)] = clamp(np.log(d))
    if evaluations and clamped > MAX_CLAMPED_FRACTION * evaluations and not force:
        raise UnstableWeightsError(
            f"unstable weights: {clamped} of {evaluations} density evaluations "
            "fell below the floor")

    Ai = A.astype(int)
    denom = np.where(Ai == 1, log_joint[1], log_joint[0])
    other = np.where(Ai == 1, log_joint[0], log_joint[1])
    rps = t + 3
    log_wm = np.empty((n, rps))
    cum = np.zeros(n)
    for m in s.mediator_names:
        cum = cum + log_marg[(m, 0)]
    log_wm[:, 0] = cum
    for pos in range(1, t + 1):
        m = s.mediator_names[pos - 1]
        cum = cum - log_marg[(m, 0)] + log_marg[(m, 1)]
        log_wm[:, pos] = cum
    log_wm[:, : t + 1] -= denom[:, None]
    log_wm[:, t + 1] = other - denom
    log_wm[:, t + 2] = 0.0
    wm = np.exp(log_wm)

    a, j, subject, position, covs = _skeleton(data, IW)
    a0_match = (a[:, 0] == np.repeat(A, rps)).astype(float)
    wa = np.repeat(wa_subj, rps)
    wm = wm.ravel()
    total = a0_match * wa * wm
    truncated = 0
    if truncation is not None:
        if not 0 < truncation < 100:
            raise DataError("truncation percentile must lie in (0, 100)")
        for pos in range(rps):
            sel = (position == pos) & (total > 0)
            if np.any(sel):
                cap = np.percentile(total[sel], truncation)
                over = sel & (total > cap)
                truncated += int(over.sum())
                total = np.where(over, cap, total)
    if not np.all(np.isfinite(total)):
        raise UnstableWeightsError("nonfinite weights")
    comps = WeightComponents(wa, wm, total, clamped, evaluations, truncated)
    response = np.repeat(data.outcome, rps)
    return DuplicatedDataset(IW, t, s.mediator_names, n, subject, position, a, j,
                             response, total, covs, comps)


# -- imputation layout ---------------------------------------------------------

OutcomeMean = Callable[[int, Mapping], np.ndarray]
Sampler = Callable[[str, int, Mapping, KeyedStream, np.ndarray, int], np.ndarray]


def impute_rows(data: ObservedDataset, outcome_mean: OutcomeMean, sampler: Sampler,
                draws: int, stream: KeyedStream, last_row: str = "observed") -> DuplicatedDataset:
    """Imputation layout from generic model callables.

    ``outcome_mean(a0, rows)`` returns the outcome mean under exposure ``a0``
    for the mediator and covariate values in ``rows``.
    ``sampler(mediator, level, rows, stream, index, draws)`` draws
    counterfactual mediator values ``(n, draws)`` at exposure ``level``.
    Draws are keyed by mediator name and level, so a given draw is shared by
    every row that sets that mediator to that level.
    """
    if draws < 1:
        raise DataError("draws must be at least 1")
    s = data.schema
    t, n = s.t, data.n
    rps = t + 3
    A = data.exposure
    meds = s.mediator_names
    resp = np.empty((n, rps))
    cov_names = s.covariate_names
    ids = data.subject_ids
    step = max(1, CHUNK_ELEMENTS // draws)
    for lo in range(0, n, step):
        sl = slice(lo, min(n, lo + step))
        idx = ids[sl]
        base = {c: data[c][sl][:, None] for c in cov_names}
        drawn = {}
        for m in meds:
            for lev in (0, 1):
                drawn[(m, lev)] = np.asarray(
                    sampler(m, lev, base, stream.child("mc", m, lev), idx, draws), dtype=float)
        for pos in range(t + 1):
            r = dict(base)
            for k, m in enumerate(meds):
                r[m] = drawn[(m, 1 if k < pos else 0)]
            h = np.asarray(outcome_mean(0, r), dtype=float)
            resp[sl, pos] = np.broadcast_to(h, (idx.shape[0], draws)).mean(axis=1)
    obs = _observed_rows(data)
    h_other = np.empty(n)
    h_same = np.empty(n)
    for g in (0, 1):
        sel = A == 1 - g
        if np.any(sel):
            sub = {k: v[sel] for k, v in obs.items()}
            h_other[sel] = outcome_mean(g, sub)
        sel = A == g
        if np.any(sel) and last_row == "model":
            sub = {k: v[sel] for k, v in obs.items()}
            h_same[sel] = outcome_mean(g, sub)
    resp[:, t + 1] = h_other
    if last_row == "observed":
        resp[:, t + 2] = data.outcome
    elif last_row == "model":
        resp[:, t + 2] = h_same
    else:
        raise DataError(f"unknown last-row rule {last_row!r}")
    if not np.all(np.isfinite(resp)):
        raise EstimationError("nonfinite imputed outcome")
    a, j, subject, position, covs = _skeleton(data, MC)
    return DuplicatedDataset(MC, t, meds, n, subject, position, a, j, resp.ravel(),
                             np.ones(n * rps), covs, None)


def build_mc_rows(data: ObservedDataset, outcome_fits: Mapping, marginals: Mapping,
                  draws: int = 100, stream: KeyedStream | None = None) -> DuplicatedDataset:
    """Imputation layout from fitted outcome models and marginal mediator models.

    ``outcome_fits`` and ``marginals`` map exposure group (0, 1) to fitted
    models for that group.
    """
    if stream is None:
        raise DataError("the imputation layout needs a random stream")

    def outcome_mean(a0, rows):
        return predict(outcome_fits[a0], rows, "response")

    def sampler(m, lev, rows, sub, idx, k):
        mset: MarginalModelSet = marginals[lev]
        return mset.model(m).sample(rows, sub, idx, k)

    return impute_rows(data, outcome_mean, sampler, draws, stream, "observed")


def weight_diagnostics(dup: DuplicatedDataset, threshold: float = 10.0,
                       bins: int = 40) -> dict:
    """Per-position weight summaries and a shared-bin log10 histogram.

    ``sd``, ``log10_sd`` and the histogram use the positive weights, i.e. the
    rows that enter the effect-model fit; ``mean``, ``max`` and ``sd_all``
    cover every row at the position.
    """
    if dup.layout != IW:
        raise DataError("weight diagnostics need the weighting layout")
    rps = dup.rows_per_subject
    w = dup.weight.reshape(dup.n, rps)
    positive = w[w > 0]
    logs_all = np.log10(positive) if positive.size else np.zeros(1)
    lo, hi = float(np.floor(logs_all.min())), float(np.ceil(logs_all.max()))
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    out = []
    for pos in range(rps):
        col = w[:, pos]
        nz = col[col > 0]
        lg = np.log10(nz) if nz.size else np.zeros(0)
        counts, _ = np.histogram(lg, bins=edges)
        out.append({
            "position": pos + 1,
            "mean": float(col.mean()),
            "sd": float(nz.std(ddof=1)) if nz.size > 1 else 0.0,
            "sd_all": float(col.std(ddof=1)) if col.size > 1 else 0.0,
            "max": float(col.max()),
            "n_positive": int(nz.size),
            "n_above": int((nz > threshold).sum()),
            "log10_sd": float(lg.std(ddof=1)) if lg.size > 1 else 0.0,
            "histogram": counts.tolist(),
        })
    return {"threshold": threshold, "bin_edges": edges.tolist(), "positions": out}
