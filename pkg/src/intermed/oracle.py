"""Ground truth: closed-form effects under linear two-mediator models, and
population truth by imputation with the true model functions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Protocol

import numpy as np
from scipy.special import expit

from .dataset import ObservedDataset, VariableSchema
from .duplication import impute_rows
from .effects import EffectModelSpec, Level, derive_effects, fit_effect_model
from .rng import KeyedStream


@dataclass(frozen=True)
class LinearDgpCoefficients:
    """Saturated linear outcome and mediator mean models in ``(a, m1, m2, l)``.

    ``alpha[s]`` is ``(alpha_s0, alpha_sa, alpha_sl, alpha_sal)``. The mediator
    residual covariance is ``sigma12(a, l) = s0 + sa a + sl l + sal a l`` and
    the residual variances ``var_s(a, l)`` use the same parametrization.
    """

    b0: float = 0.0
    ba: float = 0.0
    b1: float = 0.0
    b2: float = 0.0
    bl: float = 0.0
    ba1: float = 0.0
    ba2: float = 0.0
    b12: float = 0.0
    ba12: float = 0.0
    bal: float = 0.0
    b1l: float = 0.0
    b2l: float = 0.0
    b12l: float = 0.0
    ba1l: float = 0.0
    ba2l: float = 0.0
    ba12l: float = 0.0
    alpha: tuple = ((0.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0, 0.0))
    sigma12: tuple = (0.0, 0.0, 0.0, 0.0)
    var1: tuple = (1.0, 0.0, 0.0, 0.0)
    var2: tuple = (1.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        vals = [getattr(self, f) for f in self.__dataclass_fields__
                if f not in ("alpha", "sigma12", "var1", "var2")]
        vals += list(np.ravel(self.alpha)) + list(self.sigma12) + list(self.var1) + list(self.var2)
        if not np.all(np.isfinite(vals)):
            raise ValueError("coefficients must be finite")

    @staticmethod
    def _cell(c, a, l):
        return c[0] + c[1] * a + c[2] * l + c[3] * a * l

    def mu(self, s: int, a, l):
        return self._cell(self.alpha[s - 1], a, l)

    def cov12(self, a, l):
        return self._cell(self.sigma12, a, l)

    def var(self, s: int, a, l):
        return self._cell(self.var1 if s == 1 else self.var2, a, l)

    def outcome_mean(self, a, m1, m2, l):
        return (self.b0 + self.ba * a + self.b1 * m1 + self.b2 * m2 + self.bl * l
                + self.ba1 * a * m1 + self.ba2 * a * m2 + self.b12 * m1 * m2
                + self.ba12 * a * m1 * m2 + self.bal * a * l + self.b1l * m1 * l
                + self.b2l * m2 * l + self.b12l * m1 * m2 * l + self.ba1l * a * m1 * l
                + self.ba2l * a * m2 * l + self.ba12l * a * m1 * m2 * l)


def closed_form_linear_effects(c: LinearDgpCoefficients, l: float) -> dict:
    """Interventional effects at covariate value ``l`` (indirect effects at ``a0 = 0``)."""
    B1 = c.b1 + c.b1l * l
    B2 = c.b2 + c.b2l * l
    B12 = c.b12 + c.b12l * l
    m10 = c.alpha[0][0] + c.alpha[0][2] * l
    m20 = c.alpha[1][0] + c.alpha[1][2] * l
    d1 = c.alpha[0][1] + c.alpha[0][3] * l
    d2 = c.alpha[1][1] + c.alpha[1][3] * l
    dsig = c.cov12(1, l) - c.cov12(0, l)
    ie1 = B1 * d1 + B12 * m20 * d1
    ie2 = B2 * d2 + B12 * (m10 + d1) * d2
    mutual = B12 * dsig
    ie = B1 * d1 + B2 * d2 + B12 * (dsig + (m20 * d1 + m10 * d2 + d1 * d2))
    # direct effect with mediators drawn at exposure 1, so that TE = DE + IE
    m11, m21 = m10 + d1, m20 + d2
    de = (c.ba + c.bal * l + (c.ba1 + c.ba1l * l) * m11 + (c.ba2 + c.ba2l * l) * m21
          + (c.ba12 + c.ba12l * l) * (c.cov12(1, l) + m11 * m21))
    return {"IE1": ie1, "IE2": ie2, "sumIE": ie1 + ie2, "mutualIE": mutual, "jointIE": ie,
            "DE": de, "TE": de + ie}


class TrueModel(Protocol):
    schema: VariableSchema

    def generate(self, n: int, seed: int) -> ObservedDataset: ...

    def outcome_mean(self, a0: int, rows: Mapping): ...

    def sample_marginal(self, mediator: str, level: int, rows: Mapping, stream: KeyedStream,
                        index, draws: int): ...


@dataclass(frozen=True)
class LinearDgp:
    """Linear two-mediator generator with a single covariate ``L``.

    ``L`` is Bernoulli(``l_prob``) when ``l_kind == "binary"``, else standard
    normal. Exposure follows ``expit(ps[0] + ps[1] L)``. Mediator residuals
    are bivariate normal with the cellwise covariance of the coefficients.
    """

    coefficients: LinearDgpCoefficients
    ps: tuple = (0.0, 0.5)
    l_kind: str = "binary"
    l_prob: float = 0.5
    y_sd: float = 1.0
    schema: VariableSchema = field(default_factory=lambda: VariableSchema(
        "Y", "A", ("M1", "M2"), "continuous", None, ("L",), ("L",)))

    def generate(self, n: int, seed: int) -> ObservedDataset:
        c = self.coefficients
        g = KeyedStream(seed, ("linear-dgp",)).generator()
        if self.l_kind == "binary":
            L = (g.random(n) < self.l_prob).astype(float)
        else:
            L = g.standard_normal(n)
        A = (g.random(n) < expit(self.ps[0] + self.ps[1] * L)).astype(float)
        v1, v2, s12 = c.var(1, A, L), c.var(2, A, L), c.cov12(A, L)
        if np.any(v1 <= 0) or np.any(v2 <= 0) or np.any(s12 ** 2 >= v1 * v2):
            raise ValueError("mediator residual covariance is not positive definite")
        z1, z2 = g.standard_normal(n), g.standard_normal(n)
        e1 = np.sqrt(v1) * z1
        e2 = s12 / np.sqrt(v1) * z1 + np.sqrt(v2 - s12 ** 2 / v1) * z2
        M1 = c.mu(1, A, L) + e1
        M2 = c.mu(2, A, L) + e2
        Y = c.outcome_mean(A, M1, M2, L) + self.y_sd * g.standard_normal(n)
        return ObservedDataset(self.schema, {"Y": Y, "A": A, "M1": M1, "M2": M2, "L": L})

    def outcome_mean(self, a0, rows):
        return self.coefficients.outcome_mean(a0, rows["M1"], rows["M2"], rows["L"])

    def sample_marginal(self, mediator, level, rows, stream, index, draws):
        s = 1 if mediator == "M1" else 2
        L = rows["L"]
        c = self.coefficients
        return c.mu(s, level, L) + np.sqrt(c.var(s, level, L)) * stream.normal(index, draws)

    def levels(self) -> tuple:
        if self.l_kind == "binary":
            return (Level("", {"L": 0.0}), Level("_L", {"L": 1.0}))
        return (Level("", {"L": 0.0}),)

    def effect_spec(self) -> EffectModelSpec:
        return EffectModelSpec("identity", 2, ("L",), ("L",), include_j_by_covariate=True)


def population_truth(model: TrueModel, spec: EffectModelSpec, levels=None, N: int = 50000,
                     seed: int = 0, draws: int = 200) -> dict:
    """Effects obtained by imputing with the true model functions on ``N`` subjects.

    Every row, including the last, uses the true outcome mean, so the only
    noise is the population sample and the Monte-Carlo draws.
    """
    data = model.generate(N, seed)
    stream = KeyedStream(seed, ("population-truth",))
    dup = impute_rows(data, model.outcome_mean, model.sample_marginal, draws, stream,
                      last_row="model")
    params = fit_effect_model(dup, spec)
    return derive_effects(params, levels, model.schema.mediator_names).derived


def random_linear_coefficients(rng: np.random.Generator) -> LinearDgpCoefficients:
    """Random DGP whose effects the saturated-in-``l`` effect model recovers exactly.

    Exposure-by-mediator outcome interactions are zero because the effect
    model carries no ``a0 x a^(1)`` term. Mediator residual variances are
    near 0.1 so that the cellwise covariance stays positive definite.
    """
    u = lambda lo=-1.0, hi=1.0: float(rng.uniform(lo, hi))
    alpha = tuple(tuple(u(-0.5, 0.5) for _ in range(4)) for _ in range(2))
    s12 = (u(-0.025, 0.025), u(-0.015, 0.015), u(-0.01, 0.01), u(-0.005, 0.005))
    return LinearDgpCoefficients(
        b0=u(), ba=u(), b1=u(), b2=u(), bl=u(), b12=u(-0.5, 0.5), bal=u(),
        b1l=u(-0.5, 0.5), b2l=u(-0.5, 0.5), b12l=u(-0.3, 0.3),
        alpha=alpha, sigma12=s12, var1=(0.1, u(-0.04, 0.04), 0.0, 0.0),
        var2=(0.1, u(-0.04, 0.04), 0.0, 0.0))
