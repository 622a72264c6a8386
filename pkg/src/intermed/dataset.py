"""Observed samples: variable roles, validation, CSV ingestion and column transforms."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, SchemaError
from .rng import KeyedStream

CONTINUOUS = "continuous"
BINARY = "binary"
_KINDS = (CONTINUOUS, BINARY)


@dataclass(frozen=True)
class VariableSchema:
    """Names and roles of the variables in an observed sample.

    Mediator order is a labeling only; it carries no causal meaning.
    """

    outcome_name: str
    exposure_name: str
    mediator_names: tuple
    outcome_kind: str = CONTINUOUS
    mediator_kinds: tuple | None = None
    covariate_names: tuple = ()
    moderator_names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "mediator_names", tuple(self.mediator_names))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(self, "moderator_names", tuple(self.moderator_names))
        t = len(self.mediator_names)
        if t < 1:
            raise SchemaError("at least one mediator is required")
        kinds = self.mediator_kinds
        if kinds is None:
            kinds = (CONTINUOUS,) * t
        kinds = tuple(kinds)
        object.__setattr__(self, "mediator_kinds", kinds)
        if len(kinds) != t:
            raise SchemaError("mediator_kinds must declare a kind for every mediator")
        for k in kinds + (self.outcome_kind,):
            if k not in _KINDS:
                raise SchemaError(f"unknown variable kind {k!r}")
        names = self.all_names
        for nm in names:
            if not isinstance(nm, str) or not nm:
                raise SchemaError(f"invalid variable name {nm!r}")
        if len(set(names)) != len(names):
            raise SchemaError("variable names must be distinct")
        extra = set(self.moderator_names) - set(self.covariate_names)
        if extra:
            raise SchemaError(f"moderators not among covariates: {sorted(extra)}")
        if len(set(self.moderator_names)) != len(self.moderator_names):
            raise SchemaError("duplicate moderator names")

    @property
    def t(self) -> int:
        return len(self.mediator_names)

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    @property
    def all_names(self) -> tuple:
        return (self.outcome_name, self.exposure_name) + self.mediator_names + self.covariate_names

    def kind_of(self, name: str) -> str:
        if name == self.outcome_name:
            return self.outcome_kind
        if name == self.exposure_name:
            return BINARY
        if name in self.mediator_names:
            return self.mediator_kinds[self.mediator_names.index(name)]
        if name in self.covariate_names:
            return CONTINUOUS
        raise SchemaError(f"unknown variable {name!r}")

    def with_mediator_order(self, order) -> "VariableSchema":
        """Relabel mediators by a permutation of their indices."""
        order = list(order)
        if sorted(order) != list(range(self.t)):
            raise SchemaError(f"not a permutation of 0..{self.t - 1}: {order}")
        return VariableSchema(
            outcome_name=self.outcome_name,
            exposure_name=self.exposure_name,
            mediator_names=tuple(self.mediator_names[i] for i in order),
            outcome_kind=self.outcome_kind,
            mediator_kinds=tuple(self.mediator_kinds[i] for i in order),
            covariate_names=self.covariate_names,
            moderator_names=self.moderator_names,
        )

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome_name,
            "outcome_kind": self.outcome_kind,
            "exposure": self.exposure_name,
            "mediators": list(self.mediator_names),
            "mediator_kinds": list(self.mediator_kinds),
            "covariates": list(self.covariate_names),
            "moderators": list(self.moderator_names),
        }


def _readonly(x: np.ndarray) -> np.ndarray:
    x = np.array(x, dtype=np.float64, copy=True)
    x.setflags(write=False)
    return x


@dataclass(frozen=True)
class ObservedDataset:
    """A validated, immutable rectangular sample.

    Any row count of at least one is accepted here; the minimum needed to
    fit models, ``p + t + 2``, is enforced by the estimators.
    """

    schema: VariableSchema
    columns: dict
    n: int = field(init=False)

    def __post_init__(self):
        cols = {}
        n = None
        for name in self.schema.all_names:
            if name not in self.columns:
                raise DataError(f"missing column {name!r}")
            v = np.asarray(self.columns[name], dtype=np.float64).ravel()
            if n is None:
                n = v.shape[0]
            elif v.shape[0] != n:
                raise DataError(f"column {name!r} has length {v.shape[0]}, expected {n}")
            if not np.all(np.isfinite(v)):
                raise DataError(f"column {name!r} has missing or nonfinite values")
            if self.schema.kind_of(name) == BINARY and not np.all((v == 0) | (v == 1)):
                if name == self.schema.exposure_name:
                    raise DataError("exposure not binary")
                raise DataError(f"column {name!r} not binary")
            cols[name] = _readonly(v)
        if n == 0:
            raise DataError("empty dataset")
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "n", int(n))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    @property
    def subject_ids(self) -> np.ndarray:
        return np.arange(self.n)

    @property
    def exposure(self) -> np.ndarray:
        return self.columns[self.schema.exposure_name]

    @property
    def outcome(self) -> np.ndarray:
        return self.columns[self.schema.outcome_name]

    def covariate_matrix(self) -> np.ndarray:
        if not self.schema.covariate_names:
            return np.empty((self.n, 0))
        return np.column_stack([self.columns[c] for c in self.schema.covariate_names])

    def take(self, indices) -> "ObservedDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return ObservedDataset(self.schema, {k: v[idx] for k, v in self.columns.items()})

    def subset(self, mask) -> dict:
        """Plain column dict for the rows selected by ``mask``."""
        return {k: v[mask] for k, v in self.columns.items()}

    def with_schema(self, schema: VariableSchema) -> "ObservedDataset":
        return ObservedDataset(schema, dict(self.columns))

    def with_mediator_order(self, order) -> "ObservedDataset":
        return self.with_schema(self.schema.with_mediator_order(order))

    def to_csv(self, path) -> None:
        names = self.schema.all_names
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            mat = np.column_stack([self.columns[c] for c in names])
            for row in mat:
                w.writerow([f"{x:.17g}" for x in row])


def load_csv(path, schema: VariableSchema) -> ObservedDataset:
    """Read a comma-separated file with a header row into a validated dataset.

    Extra columns in the file are ignored and column order follows ``schema``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and not (len(r) == 1 and not r[0].strip())]
    if not rows:
        raise DataError("empty file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise DataError("empty file")
    pos = {}
    for name in schema.all_names:
        if name not in header:
            raise DataError(f"missing column {name!r}")
        pos[name] = header.index(name)
    cols = {}
    for name, j in pos.items():
        vals = np.empty(len(body))
        for i, r in enumerate(body):
            try:
                vals[i] = float(r[j])
            except (ValueError, IndexError):
                cell = r[j] if j < len(r) else ""
                raise DataError(f"non-numeric cell {cell!r} in column {name!r}, row {i + 2}")
        cols[name] = vals
    return ObservedDataset(schema, cols)


def standardize_column(data: ObservedDataset, name: str) -> ObservedDataset:
    """Center to mean 0 and scale to sample standard deviation 1 (ddof=1)."""
    if name not in data.columns:
        raise DataError(f"unknown name {name!r}")
    if data.schema.kind_of(name) != CONTINUOUS:
        raise DataError(f"column {name!r} is not continuous")
    if name == data.schema.exposure_name:
        raise DataError("the exposure cannot be standardized")
    v = data.columns[name]
    sd = float(np.std(v, ddof=1)) if data.n > 1 else 0.0
    if not sd > 0 or not math.isfinite(sd):
        raise DataError(f"zero variance in column {name!r}")
    cols = dict(data.columns)
    cols[name] = (v - v.mean()) / sd
    return ObservedDataset(data.schema, cols)


def resample_with_replacement(data: ObservedDataset, stream: KeyedStream) -> ObservedDataset:
    """Draw ``n`` rows uniformly with replacement; deterministic given the stream."""
    if data.n < 1:
        raise DataError("cannot resample an empty dataset")
    idx = stream.integers(data.n, data.n)
    return data.take(idx)
