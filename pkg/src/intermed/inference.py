"""Nonparametric percentile bootstrap and coverage experiments.

Replicate ``b`` resamples subjects with the stream ``(seed, "resample", b)``
and runs the estimator with ``(seed, "replicate", b)``, so the replicate
matrix does not depend on how replicates are scheduled across workers.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset import ObservedDataset, resample_with_replacement
from .errors import ConfigError, MediationError
from .estimators import EstimatorConfig, estimate
from .rng import KeyedStream

MAX_FAILURE_FRACTION = 0.05
_RECOVERABLE = (MediationError, np.linalg.LinAlgError, FloatingPointError, ValueError)


@dataclass(frozen=True)
class BootstrapReport:
    B: int
    level: float
    names: tuple
    replicates: np.ndarray
    point: dict
    ci: dict
    failures: int
    degraded: bool

    def to_dict(self) -> dict:
        return {
            "B": self.B,
            "level": self.level,
            "failures": self.failures,
            "degraded": self.degraded,
            "quantities": {
                nm: {"point": self.point[nm], "lower": self.ci[nm][0], "upper": self.ci[nm][1]}
                for nm in self.names
            },
        }


def percentile_interval(values, level: float = 0.95) -> tuple:
    """Equal-tailed percentile bounds with linear interpolation between order statistics."""
    if not 0 < level < 1:
        raise ConfigError("level must lie strictly between 0 and 1", "bootstrap.level")
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return (float("nan"), float("nan"))
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(v, [alpha, 1.0 - alpha], method="linear")
    return (float(lo), float(hi))


Estimator = Callable[[ObservedDataset, EstimatorConfig, KeyedStream], object]


def _one_replicate(data, cfg, seed, b, estimator, names):
    sample = resample_with_replacement(data, KeyedStream(seed, ("resample", b)))
    try:
        res = estimator(sample, cfg, KeyedStream(seed, ("replicate", b)))
    except _RECOVERABLE:
        return None
    q = res.quantities()
    return np.array([q[nm] for nm in names])


_WORKER = {}


def _init_worker(data, cfg, seed, estimator, names):
    _WORKER.update(data=data, cfg=cfg, seed=seed, estimator=estimator, names=names)


def _run_chunk(bs):
    w = _WORKER
    return [(b, _one_replicate(w["data"], w["cfg"], w["seed"], b, w["estimator"], w["names"]))
            for b in bs]


def _chunks(items: Sequence[int], k: int) -> list:
    return [list(items[i::k]) for i in range(k) if items[i::k]]


def bootstrap(data: ObservedDataset, cfg: EstimatorConfig, B: int, level: float = 0.95,
              seed: int | None = None, threads: int = 1,
              estimator: Estimator | None = None) -> BootstrapReport:
    """Percentile intervals from ``B`` full re-estimations on resampled data."""
    if B < 2:
        raise ConfigError("B must be at least 2", "bootstrap.B")
    if not 0 < level < 1:
        raise ConfigError("level must lie strictly between 0 and 1", "bootstrap.level")
    estimator = estimator or estimate
    seed = cfg.seed if seed is None else int(seed)
    point_res = estimator(data, cfg, KeyedStream(seed, ("estimate",)))
    point = point_res.quantities()
    names = tuple(point)
    reps = np.full((B, len(names)), np.nan)
    if threads <= 1:
        for b in range(B):
            r = _one_replicate(data, cfg, seed, b, estimator, names)
            if r is not None:
                reps[b] = r
    else:
        with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker,
                                 initargs=(data, cfg, seed, estimator, names)) as ex:
            for chunk in ex.map(_run_chunk, _chunks(list(range(B)), threads)):
                for b, r in chunk:
                    if r is not None:
                        reps[b] = r
    failed = int(np.sum(~np.all(np.isfinite(reps), axis=1)))
    degraded = failed > MAX_FAILURE_FRACTION * B
    if degraded:
        warnings.warn(f"bootstrap degraded: {failed} of {B} replicates failed", RuntimeWarning)
    ok = reps[np.all(np.isfinite(reps), axis=1)]
    ci = {nm: percentile_interval(ok[:, i], level) for i, nm in enumerate(names)}
    return BootstrapReport(B, level, names, reps, point, ci, failed, degraded)


def _coverage_rep(generate, cfg, B, level, seed, r, estimator):
    data = generate(r)
    sub_seed = KeyedStream(seed, ("coverage", r)).key & 0x7FFFFFFFFFFFFFFF
    try:
        rep = bootstrap(data, cfg, B, level=level, seed=sub_seed, threads=1,
                        estimator=estimator)
    except _RECOVERABLE:
        return None
    return rep.point, rep.ci


def _coverage_chunk(args):
    generate, cfg, B, level, seed, rs, estimator = args
    return [(r, _coverage_rep(generate, cfg, B, level, seed, r, estimator)) for r in rs]


def coverage_experiment(generate: Callable[[int], ObservedDataset], cfg: EstimatorConfig,
                        truth: Mapping, B: int, reps: int, seed: int, level: float = 0.95,
                        threads: int = 1, estimator: Estimator | None = None) -> dict:
    """Fraction of outer replicates whose percentile interval covers ``truth``.

    ``generate(r)`` returns the ``r``-th simulated dataset; it must be a
    picklable top-level callable when ``threads > 1``.
    """
    if reps < 100:
        raise ConfigError("coverage experiments need at least 100 replicates",
                          "coverage.reps")
    estimator = estimator or estimate
    results = {}
    if threads <= 1:
        for r in range(reps):
            results[r] = _coverage_rep(generate, cfg, B, level, seed, r, estimator)
    else:
        jobs = [(generate, cfg, B, level, seed, rs, estimator)
                for rs in _chunks(list(range(reps)), threads)]
        with ProcessPoolExecutor(max_workers=threads) as ex:
            for chunk in ex.map(_coverage_chunk, jobs):
                results.update(dict(chunk))
    names = list(truth)
    hits = {nm: 0 for nm in names}
    est = {nm: [] for nm in names}
    failures = 0
    done = 0
    for r in range(reps):
        res = results[r]
        if res is None:
            failures += 1
            continue
        point, ci = res
        done += 1
        for nm in names:
            lo, hi = ci[nm]
            hits[nm] += int(lo <= truth[nm] <= hi)
            est[nm].append(point[nm])
    table = {}
    for nm in names:
        e = np.array(est[nm])
        table[nm] = {
            "truth": float(truth[nm]),
            "coverage": hits[nm] / done if done else float("nan"),
            "mean": float(e.mean()) if e.size else float("nan"),
            "ese": float(e.std(ddof=1)) if e.size > 1 else float("nan"),
        }
    return {"reps": reps, "completed": done, "failures": failures, "effects": table}
