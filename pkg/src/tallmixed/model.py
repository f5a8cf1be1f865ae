"""Model specifications and design-matrix construction."""

from __future__ import annotations

import itertools
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .data import SchemaError
from .families import Family


@dataclass(frozen=True)
class GlmSpec:
    """Fixed-effects GLM: family, covariate terms, intercept, offset.

    A term is a tuple of column names whose product forms one regressor
    (``("case", "time")`` is the interaction ``case:time``).  ``offset``
    names an exposure column; ``log(exposure)`` enters the linear predictor.
    """

    family: Family
    terms: tuple[tuple[str, ...], ...]
    intercept: bool = True
    offset: str | None = None

    def __post_init__(self):
        terms = tuple(tuple(t) if not isinstance(t, str) else tuple(t.split(":")) for t in self.terms)
        object.__setattr__(self, "terms", terms)
        for t in terms:
            if not t or any(not c for c in t):
                raise SchemaError(f"empty term in {terms}")
            if len(set(t)) != len(t):
                raise SchemaError(f"term {':'.join(t)} repeats a column")

    @property
    def base_columns(self) -> list[str]:
        """Columns referenced by any term, in order of first appearance."""
        seen: list[str] = []
        for t in self.terms:
            for c in t:
                if c not in seen:
                    seen.append(c)
        return seen

    def with_family(self, family: Family) -> GlmSpec:
        return GlmSpec(family, self.terms, self.intercept, self.offset)


@dataclass(frozen=True)
class GlmmSpec:
    """Random-intercept GLMM: a GLM plus the grouping column."""

    glm: GlmSpec
    cluster: str

    @property
    def family(self) -> Family:
        return self.glm.family

    def with_family(self, family: Family) -> GlmmSpec:
        return GlmmSpec(self.glm.with_family(family), self.cluster)


def parse_formula(text: str) -> tuple[str, tuple[tuple[str, ...], ...], bool]:
    """Parse ``y ~ a + b + a:b`` into (outcome, terms, intercept).

    ``a*b`` expands to ``a + b + a:b``; ``- 1`` or ``+ 0`` drops the intercept.
    """
    lhs, tilde, rhs = text.partition("~")
    if not tilde or not lhs.strip():
        raise SchemaError(f"formula {text!r} needs the form 'outcome ~ terms'")
    intercept = True
    terms: list[tuple[str, ...]] = []
    rhs = rhs.replace("-", "+-")
    for raw in rhs.split("+"):
        tok = "".join(raw.split())
        if not tok:
            continue
        if tok in ("-1", "0", "-0"):
            intercept = False
            continue
        if tok == "1":
            continue
        if "*" in tok:
            parts = [p.strip() for p in tok.split("*")]
            for r in range(1, len(parts) + 1):
                for combo in itertools.combinations(parts, r):
                    terms.append(tuple(combo))
            continue
        terms.append(tuple(p.strip() for p in tok.split(":")))
    out: list[tuple[str, ...]] = []
    for t in terms:
        if t not in out:
            out.append(t)
    return lhs.strip(), tuple(out), intercept


def _column_blocks(name: str, values: np.ndarray, kind: str, levels: Sequence[str]):
    if kind == "categorical":
        codes = np.asarray(values).astype(np.int64)
        return [(f"{name}[{lv}]", (codes == k).astype(float)) for k, lv in enumerate(levels) if k > 0]
    return [(name, np.asarray(values, dtype=float))]


def build_matrix(terms: Sequence[Sequence[str]], intercept: bool, n: int,
                 get: Callable[[str], np.ndarray],
                 kind_of: Callable[[str], tuple[str, Sequence[str]]]) -> tuple[np.ndarray, list[str]]:
    cols: list[np.ndarray] = []
    names: list[str] = []
    if intercept:
        cols.append(np.ones(n))
        names.append("(Intercept)")
    for term in terms:
        blocks = [_column_blocks(c, get(c), *kind_of(c)) for c in term]
        for combo in itertools.product(*blocks):
            names.append(":".join(b[0] for b in combo))
            v = np.ones(n)
            for b in combo:
                v = v * b[1]
            cols.append(v)
    X = np.column_stack(cols) if cols else np.zeros((n, 0))
    return np.ascontiguousarray(X, dtype=float), names


def model_matrix(spec: GlmSpec, data) -> tuple[np.ndarray, list[str]]:
    """Design matrix and coefficient names for ``data`` (full or collapsed)."""
    def kind_of(c):
        s = data.spec_of(c)
        if s.role != "covariate":
            raise SchemaError(f"term column {c!r} is not a covariate")
        return s.kind, s.levels
    return build_matrix(spec.terms, spec.intercept, data.n_rows, data.column, kind_of)


def coefficient_names(spec: GlmSpec, data) -> list[str]:
    return model_matrix(spec, data.take([0]))[1]


def offset_vector(spec: GlmSpec, data) -> np.ndarray:
    if spec.offset is None:
        return np.zeros(data.n_rows)
    return np.log(np.asarray(data.column(spec.offset), dtype=float))


def design_row(spec: GlmSpec, design: Mapping[str, float],
               kinds: Mapping[str, tuple[str, Sequence[str]]] | None = None) -> np.ndarray:
    """Regressor vector for one design point (categoricals given as level codes)."""
    kinds = kinds or {}

    def get(c):
        try:
            return np.array([float(design[c])])
        except KeyError:
            raise SchemaError(f"design has no value for {c!r}") from None

    X, _ = build_matrix(spec.terms, spec.intercept, 1, get,
                        lambda c: kinds.get(c, ("continuous", ())))
    return X[0]


def schema_kinds(data) -> dict[str, tuple[str, tuple[str, ...]]]:
    return {c.name: (c.kind, c.levels) for c in data.schema}
