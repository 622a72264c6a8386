"""Regression numerics: weighted least squares and logistic IRLS.

Designs are built from *row sources*, i.e. mappings from variable name to a
numeric array. Arrays may have shape ``(n,)`` or ``(n, K)`` and are combined
with numpy broadcasting, which lets :func:`predict` evaluate a fitted model
on ``K`` Monte-Carlo mediator draws per subject without materializing a
stacked design matrix.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, qr, solve_triangular
from scipy.special import expit

from .errors import GlmError, RankDeficientError, SeparationError

IDENTITY = "identity"
LOGIT = "logit"
LINKS = (IDENTITY, LOGIT)

TOL_STEP = 1e-10
MAX_ITER = 100
SEPARATION_BOUND = 30.0
RCOND_QR = 1e-8
RCOND_SINGULAR = 1e-12
ALIAS_TOL = 1e-7
ALIAS_MODES = ("error", "drop")


@dataclass(frozen=True)
class TermSpec:
    """Elementwise product of the named columns; the empty product is the intercept."""

    factors: tuple = ()

    def __post_init__(self):
        f = tuple(self.factors)
        object.__setattr__(self, "factors", f)
        if len(f) > 4:
            raise GlmError(f"term {f} has more than four factors")
        if len(set(f)) != len(f):
            raise GlmError(f"repeated factor in term {f}")

    @property
    def is_intercept(self) -> bool:
        return not self.factors

    @property
    def name(self) -> str:
        return "(Intercept)" if not self.factors else ":".join(self.factors)

    def key(self) -> frozenset:
        return frozenset(self.factors)

    def evaluate(self, rows: Mapping):
        if not self.factors:
            return 1.0
        out = None
        for f in self.factors:
            try:
                col = rows[f]
            except KeyError:
                raise GlmError(f"unresolvable name {f!r}") from None
            out = col if out is None else out * col
        return out


INTERCEPT = TermSpec(())


def term(*factors) -> TermSpec:
    return TermSpec(tuple(factors))


def terms_from_lists(lists: Sequence, intercept: bool = True) -> tuple:
    """Turn ``[["L"], ["M1", "L"]]`` into TermSpecs, prepending an intercept."""
    out = [INTERCEPT] if intercept else []
    for item in lists:
        if isinstance(item, TermSpec):
            t = item
        elif isinstance(item, str):
            t = TermSpec((item,))
        else:
            t = TermSpec(tuple(item))
        if t.is_intercept and intercept:
            continue
        out.append(t)
    check_terms(out)
    return tuple(out)


def check_terms(terms: Sequence[TermSpec]) -> None:
    keys = [t.key() for t in terms]
    if len(set(keys)) != len(keys):
        raise GlmError("duplicate terms in model")


@dataclass(frozen=True)
class GlmSpec:
    response: str
    link: str
    terms: tuple
    weight_column: str | None = None

    def __post_init__(self):
        if self.link not in LINKS:
            raise GlmError(f"unknown link {self.link!r}")
        object.__setattr__(self, "terms", tuple(self.terms))
        check_terms(self.terms)

    @property
    def factor_names(self) -> set:
        return {f for t in self.terms for f in t.factors}


@dataclass(frozen=True)
class FittedGlm:
    spec: GlmSpec | None
    coefficients: np.ndarray
    residual_variance: float | None
    converged: bool
    iterations: int
    nobs: int = 0
    aliased: tuple = ()

    @property
    def link(self) -> str:
        return self.spec.link if self.spec is not None else IDENTITY

    @property
    def terms(self) -> tuple:
        return self.spec.terms if self.spec is not None else ()

    def coef(self, name: str) -> float:
        for t, b in zip(self.terms, self.coefficients):
            if t.name == name:
                return float(b)
        raise KeyError(name)

    def as_dict(self) -> dict:
        return {t.name: float(b) for t, b in zip(self.terms, self.coefficients)}


def build_design(rows: Mapping, terms: Sequence[TermSpec], n: int | None = None) -> np.ndarray:
    """Design matrix with one column per term, in term order."""
    if n is None:
        n = _row_count(rows)
    X = np.empty((n, len(terms)))
    for j, t in enumerate(terms):
        X[:, j] = t.evaluate(rows)
    return X


def _row_count(rows: Mapping) -> int:
    for v in rows.values():
        a = np.asarray(v)
        if a.ndim >= 1:
            return a.shape[0]
    raise GlmError("row source has no array columns")


def _prepare_weights(y, w):
    n = y.shape[0]
    if w is None:
        return np.ones(n)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (n,):
        raise GlmError("weights must be a vector aligned with the response")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise GlmError("negative weight")
    return w


def _solve_normal(rhs: np.ndarray, A: np.ndarray, defer_singular: bool = False):
    """Solve ``A b = rhs`` for a weighted cross-product ``A = X' W X``.

    Cholesky on the equilibrated system, QR on ``sqrt(W) X`` when the
    reciprocal condition number drops below ``RCOND_QR`` (returns None then).
    With ``defer_singular`` a singular-looking ``A`` is also left to QR,
    whose condition is the square root of that of ``A``.
    """
    d = np.sqrt(np.diag(A))
    if np.any(d == 0) or not np.all(np.isfinite(d)):
        raise RankDeficientError("rank-deficient design (empty column)")
    As = A / d[:, None] / d[None, :]
    ev = np.linalg.eigvalsh(As)
    rcond = ev[0] / ev[-1] if ev[-1] > 0 else 0.0
    if rcond <= RCOND_SINGULAR and not defer_singular:
        raise RankDeficientError(f"rank-deficient design (rcond={rcond:.3g})")
    if rcond >= RCOND_QR:
        c = cho_factor(As, lower=False, check_finite=False)
        return cho_solve(c, rhs / d, check_finite=False) / d
    return None


def _qr_solve(Xw: np.ndarray, yw: np.ndarray, check: bool = False) -> np.ndarray:
    scale = np.linalg.norm(Xw, axis=0)
    if check and (np.any(scale == 0) or not np.all(np.isfinite(scale))):
        raise RankDeficientError("rank-deficient design (empty column)")
    q, r = qr(Xw / np.where(scale > 0, scale, 1.0), mode="economic", check_finite=False)
    dr = np.abs(np.diag(r))
    if check and dr.min() <= RCOND_SINGULAR * dr.max():
        raise RankDeficientError("rank-deficient weighted design")
    return solve_triangular(r, q.T @ yw, check_finite=False) / np.where(scale > 0, scale, 1.0)


def estimable_columns(X, w=None, tol: float = ALIAS_TOL) -> np.ndarray:
    """Mask of columns not aliased with earlier columns, scanned in order.

    A column is aliased when its residual after projection on the kept
    earlier columns (rows with positive weight, ``sqrt(w)``-scaled) falls
    below ``tol`` times its own norm.
    """
    X = np.asarray(X, dtype=np.float64)
    if w is not None:
        w = np.asarray(w, dtype=np.float64)
        X = X[w > 0] * np.sqrt(w[w > 0])[:, None]
    keep = np.zeros(X.shape[1], dtype=bool)
    basis = []
    for j in range(X.shape[1]):
        v = X[:, j].copy()
        nrm = np.linalg.norm(v)
        if nrm == 0 or not np.isfinite(nrm):
            continue
        for _ in range(2):
            for q in basis:
                v -= (q @ v) * q
        r = np.linalg.norm(v)
        if r > tol * nrm:
            basis.append(v / r)
            keep[j] = True
    return keep


def _default_spec(link: str, k: int) -> GlmSpec:
    return GlmSpec("y", link, tuple(TermSpec((f"x{j}",)) for j in range(k)))


def _drop_aliased(fitter, X, y, w, spec, link, **kw) -> FittedGlm:
    X = np.asarray(X, dtype=np.float64)
    w = _prepare_weights(np.asarray(y, dtype=np.float64), w)
    keep = estimable_columns(X, w)
    if keep.all():
        return fitter(X, y, w, spec, **kw)
    if not keep.any():
        raise RankDeficientError("every design column is aliased")
    sub = fitter(X[:, keep], y, w, None, **kw)
    beta = np.zeros(X.shape[1])
    beta[keep] = sub.coefficients
    return FittedGlm(spec or _default_spec(link, X.shape[1]), beta, sub.residual_variance,
                     sub.converged, sub.iterations, sub.nobs,
                     tuple(int(j) for j in np.flatnonzero(~keep)))


def fit_least_squares(X, y, w=None, spec: GlmSpec | None = None,
                      aliased: str = "error") -> FittedGlm:
    """Weighted least squares; residual variance uses ``sum(w>0) - k`` degrees of freedom.

    ``aliased="drop"`` zeroes the coefficients of columns aliased with
    earlier ones and fits the rest (``k`` is then the rank).
    """
    if aliased not in ALIAS_MODES:
        raise GlmError(f"unknown aliasing mode {aliased!r}")
    if aliased == "drop":
        return _drop_aliased(fit_least_squares, X, y, w, spec, IDENTITY)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = _prepare_weights(y, w)
    n, k = X.shape
    pos = w > 0
    nobs = int(pos.sum())
    if nobs < k:
        raise RankDeficientError(f"{nobs} rows with positive weight for {k} coefficients")
    if not np.all(pos):
        X, y, w = X[pos], y[pos], w[pos]
    Xw = X * w[:, None]
    A = Xw.T @ X
    beta = _solve_normal(Xw.T @ y, A)
    if beta is None:
        sw = np.sqrt(w)
        beta = _qr_solve(X * sw[:, None], y * sw)
    r = y - X @ beta
    df = nobs - k
    rv = float(np.dot(w * r, r) / df) if df > 0 else 0.0
    return FittedGlm(spec or _default_spec(IDENTITY, k), beta, rv, True, 1, nobs)


def _deviance(eta, y, w):
    # -2 * quasi-binomial log likelihood, stable for large |eta|
    return 2.0 * np.dot(w, y * np.logaddexp(0.0, -eta) + (1.0 - y) * np.logaddexp(0.0, eta))


SEPARATION_MODES = ("raise", "allow")


def fit_logistic(X, y, w=None, spec: GlmSpec | None = None,
                 separation: str = "raise", aliased: str = "error") -> FittedGlm:
    """Logistic IRLS for responses in [0, 1], from beta = 0 with step halving.

    Under separation the likelihood has no maximizer. ``separation="allow"``
    returns the last iterate flagged ``converged=False`` instead of raising.
    ``aliased`` is as for :func:`fit_least_squares`.
    """
    if separation not in SEPARATION_MODES:
        raise GlmError(f"unknown separation mode {separation!r}")
    if aliased not in ALIAS_MODES:
        raise GlmError(f"unknown aliasing mode {aliased!r}")
    if aliased == "drop":
        return _drop_aliased(fit_logistic, X, y, w, spec, LOGIT, separation=separation)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = _prepare_weights(y, w)
    if np.any(y < 0) or np.any(y > 1) or not np.all(np.isfinite(y)):
        raise GlmError("logit link requires responses in [0, 1]")
    pos = w > 0
    if not np.all(pos):
        X, y, w = X[pos], y[pos], w[pos]
    n, k = X.shape
    if n < k:
        raise RankDeficientError(f"{n} rows with positive weight for {k} coefficients")
    Xw = X * w[:, None]
    _solve_normal(np.zeros(k), Xw.T @ X)

    beta = np.zeros(k)
    eta = np.zeros(n)
    dev = _deviance(eta, y, w)
    converged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        mu = expit(eta)
        v = w * mu * (1.0 - mu)
        score = X.T @ (w * (y - mu))
        A = (X * v[:, None]).T @ X
        try:
            step = _solve_normal(score, A, defer_singular=True)
            if step is None:
                sv = np.sqrt(v)
                step = _qr_solve(X * sv[:, None], (w * (y - mu)) / np.where(sv > 0, sv, 1.0),
                                 check=True)
        except RankDeficientError:
            # the unweighted design passed the rank check, so the working
            # weights have collapsed: fitted probabilities sit at 0 or 1
            if separation == "raise":
                raise SeparationError("separation: fitted probabilities reached 0 or 1") from None
            break
        new = beta + step
        new_eta = X @ new
        new_dev = _deviance(new_eta, y, w)
        halvings = 0
        while not new_dev <= dev * (1 + 1e-12) + 1e-300 and halvings < 40:
            step = step * 0.5
            new = beta + step
            new_eta = X @ new
            new_dev = _deviance(new_eta, y, w)
            halvings += 1
        if halvings == 40:
            # no descent direction left: a vanished deviance means separation
            break
        delta = np.max(np.abs(new - beta))
        beta, eta, dev = new, new_eta, new_dev
        if delta < TOL_STEP:
            converged = True
            break
    big = np.max(np.abs(beta)) > SEPARATION_BOUND
    if converged and big and np.any(np.abs(eta) > SEPARATION_BOUND):
        # fitted probabilities at 0 or 1 zero the score: a fixed point, not a maximum
        converged = False
    if not converged and big and separation == "raise":
        raise SeparationError("separation: coefficients diverged without convergence")
    if not np.all(np.isfinite(beta)):
        raise GlmError("nonfinite coefficients")
    return FittedGlm(spec or _default_spec(LOGIT, k), beta, None, converged, it, n)


def fit_glm(spec: GlmSpec, rows: Mapping, mask=None, separation: str = "raise",
            aliased: str = "error") -> FittedGlm:
    """Fit ``spec`` on a row source, optionally restricted to ``mask``."""
    if mask is not None:
        rows = {k: np.asarray(v)[mask] for k, v in rows.items()}
    for nm in spec.factor_names | {spec.response}:
        if nm not in rows:
            raise GlmError(f"unresolvable name {nm!r}")
    X = build_design(rows, spec.terms)
    y = np.asarray(rows[spec.response], dtype=np.float64)
    w = None if spec.weight_column is None else rows[spec.weight_column]
    if spec.link == IDENTITY:
        return fit_least_squares(X, y, w, spec=spec, aliased=aliased)
    return fit_logistic(X, y, w, spec=spec, separation=separation, aliased=aliased)


def linear_predictor(coefficients, terms: Sequence[TermSpec], rows: Mapping):
    """``sum_j beta_j * term_j`` with broadcasting over row-source shapes."""
    acc = 0.0
    for b, t in zip(coefficients, terms):
        if b == 0.0:
            continue
        acc = acc + b * t.evaluate(rows)
    return acc


def predict(fit: FittedGlm, rows: Mapping, scale: str = "response"):
    """Linear predictor (``scale="link"``) or mean (``scale="response"``)."""
    if scale not in ("link", "response"):
        raise GlmError(f"unknown scale {scale!r}")
    shape = None
    for nm in {f for t in fit.terms for f in t.factors}:
        if nm not in rows:
            raise GlmError(f"unresolvable name {nm!r}")
        a = np.shape(rows[nm])
        shape = a if shape is None else np.broadcast_shapes(shape, a)
    if shape is None or shape == ():
        shape = (_row_count(rows),)
    eta = linear_predictor(fit.coefficients, fit.terms, rows)
    eta = np.asarray(eta, dtype=np.float64)
    if eta.shape != shape:
        eta = np.broadcast_to(eta, shape).copy()
    if scale == "link" or fit.link == IDENTITY:
        return eta
    return expit(eta)


def score(fit: FittedGlm, X, y, w=None) -> np.ndarray:
    """``X' W (y - mu)`` at the fitted coefficients."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64)
    eta = X @ fit.coefficients
    mu = eta if fit.link == IDENTITY else expit(eta)
    return X.T @ (w * (y - mu))
