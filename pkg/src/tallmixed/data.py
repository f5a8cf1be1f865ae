"""Clustered tabular data: schema, CSV ingestion, transforms, collapsing.

A :class:`Dataset` is an immutable columnar table with exactly one outcome
column, one cluster column (stored as dense integer codes plus the original
labels) and at most one exposure column.  :func:`collapse` turns it into a
:class:`CollapsedDataset` of unique rows with integer multiplicity weights,
whose weighted likelihood equals the full-data likelihood whenever every
model column is discrete.
"""

from __future__ import annotations

import csv
import itertools
import math
import os
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

ROLES = ("outcome", "covariate", "cluster", "exposure")
KINDS = ("binary", "count", "categorical", "continuous")


class SchemaError(ValueError):
    """The schema or the data does not satisfy the column contract."""


class DataError(ValueError):
    """A cell, row or column could not be used."""


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    role: str
    kind: str
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.role not in ROLES:
            raise SchemaError(f"column {self.name!r}: unknown role {self.role!r}")
        if self.kind not in KINDS:
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical" and not self.levels and self.role != "cluster":
            raise SchemaError(f"column {self.name!r}: categorical needs a nonempty level list")
        if len(set(self.levels)) != len(self.levels):
            raise SchemaError(f"column {self.name!r}: duplicate levels")

    def format(self) -> str:
        text = f"{self.name} = {self.role}:{self.kind}"
        if self.levels:
            text += ":" + "|".join(self.levels)
        return text


def parse_schema(text: str) -> list[ColumnSchema]:
    """Parse lines of the form ``column = role:kind[:level|level|...]``.

    Blank lines and ``#`` comments are ignored.
    """
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        name, eq, spec = line.partition("=")
        if not eq:
            raise SchemaError(f"schema line {lineno}: expected 'column = role:kind'")
        parts = spec.strip().split(":", 2)
        if len(parts) < 2:
            raise SchemaError(f"schema line {lineno}: expected 'role:kind'")
        levels = tuple(parts[2].split("|")) if len(parts) == 3 and parts[2].strip() else ()
        out.append(ColumnSchema(name.strip(), parts[0].strip(), parts[1].strip(), levels))
    validate_schema(out)
    return out


def load_schema(path: str | os.PathLike) -> list[ColumnSchema]:
    with open(path, encoding="utf-8") as fh:
        return parse_schema(fh.read())


def format_schema(schema: Iterable[ColumnSchema]) -> str:
    return "".join(col.format() + "\n" for col in schema)


def validate_schema(schema: Sequence[ColumnSchema]) -> None:
    names = [c.name for c in schema]
    dup = {n for n in names if names.count(n) > 1}
    if dup:
        raise SchemaError(f"duplicate column names: {sorted(dup)}")
    roles = [c.role for c in schema]
    if roles.count("outcome") != 1:
        raise SchemaError("schema needs exactly one outcome column")
    if roles.count("cluster") != 1:
        raise SchemaError("schema needs exactly one cluster column")
    if roles.count("exposure") > 1:
        raise SchemaError("schema allows at most one exposure column")


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


class _Table:
    """Accessors shared by full and collapsed tables."""

    schema: tuple[ColumnSchema, ...]
    columns: Mapping[str, np.ndarray]
    cluster_labels: tuple[str, ...]

    def _role(self, role: str) -> ColumnSchema | None:
        for c in self.schema:
            if c.role == role:
                return c
        return None

    @property
    def outcome_name(self) -> str:
        return self._role("outcome").name

    @property
    def cluster_name(self) -> str:
        return self._role("cluster").name

    @property
    def exposure_name(self) -> str | None:
        col = self._role("exposure")
        return None if col is None else col.name

    @property
    def covariate_names(self) -> list[str]:
        return [c.name for c in self.schema if c.role == "covariate"]

    def spec_of(self, name: str) -> ColumnSchema:
        for c in self.schema:
            if c.name == name:
                return c
        raise SchemaError(f"unknown column {name!r}")

    def column(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise SchemaError(f"unknown column {name!r}") from None

    @property
    def y(self) -> np.ndarray:
        return self.columns[self.outcome_name]

    @property
    def cluster(self) -> np.ndarray:
        return self.columns[self.cluster_name]

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_labels)

    @property
    def exposure(self) -> np.ndarray | None:
        name = self.exposure_name
        return None if name is None else self.columns[name]

    @property
    def n_rows(self) -> int:
        return len(self.y)

    def _cell_text(self, name: str, i: int):
        spec = self.spec_of(name)
        v = self.columns[name][i]
        if spec.role == "cluster":
            return self.cluster_labels[int(v)]
        if spec.kind == "categorical":
            return spec.levels[int(v)]
        if spec.kind in ("binary", "count"):
            return str(int(v))
        return repr(float(v))


@dataclass(frozen=True)
class Dataset(_Table):
    """Immutable columnar table of clustered observations.

    Categorical columns hold integer codes into ``ColumnSchema.levels``; the
    cluster column holds dense codes ``0..J-1`` into ``cluster_labels``.
    ``transforms`` records standardization and binning parameters.
    """

    schema: tuple[ColumnSchema, ...]
    columns: Mapping[str, np.ndarray]
    cluster_labels: tuple[str, ...]
    transforms: Mapping[str, dict] = field(default_factory=dict)

    @classmethod
    def from_columns(cls, schema: Sequence[ColumnSchema], values: Mapping[str, Sequence],
                     transforms: Mapping[str, dict] | None = None) -> Dataset:
        """Build a dataset from raw column values.

        Cluster values may be arbitrary labels; they are re-indexed densely in
        order of first appearance.  Categorical values may be level strings
        or integer codes.
        """
        schema = tuple(schema)
        validate_schema(schema)
        cols: dict[str, np.ndarray] = {}
        labels: tuple[str, ...] = ()
        n = None
        for spec in schema:
            if spec.name not in values:
                raise SchemaError(f"missing column {spec.name!r}")
            raw = values[spec.name]
            if spec.role == "cluster":
                codes, labels = _dense_codes(raw)
                arr = codes
            else:
                arr = _coerce(spec, raw)
            if n is None:
                n = len(arr)
            elif len(arr) != n:
                raise DataError(f"column {spec.name!r} has {len(arr)} rows, expected {n}")
            cols[spec.name] = _freeze(arr)
        if not n:
            raise DataError("dataset has no rows")
        return cls(schema, MappingProxyType(cols), labels,
                   MappingProxyType(dict(transforms or {})))

    @property
    def weights(self) -> np.ndarray:
        return np.ones(self.n_rows)

    def __len__(self) -> int:
        return self.n_rows

    def take(self, index) -> Dataset:
        """Rows at ``index`` (in that order), cluster codes re-densified."""
        index = np.asarray(index, dtype=np.int64)
        if index.size == 0:
            raise DataError("cannot take zero rows")
        cols = {k: v[index] for k, v in self.columns.items()}
        used = np.unique(cols[self.cluster_name])
        remap = np.full(self.n_clusters, -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        cols[self.cluster_name] = remap[cols[self.cluster_name]]
        labels = tuple(self.cluster_labels[i] for i in used)
        return Dataset(self.schema, MappingProxyType({k: _freeze(v) for k, v in cols.items()}),
                       labels, self.transforms)

    def with_column(self, spec: ColumnSchema, values: np.ndarray,
                    transform: dict | None = None) -> Dataset:
        """Add or replace one column."""
        schema = [c for c in self.schema if c.name != spec.name]
        pos = next((i for i, c in enumerate(self.schema) if c.name == spec.name), len(schema))
        schema.insert(pos, spec)
        cols = dict(self.columns)
        cols[spec.name] = _freeze(_coerce(spec, values))
        transforms = dict(self.transforms)
        if transform is not None:
            transforms[spec.name] = transform
        return Dataset(tuple(schema), MappingProxyType(cols), self.cluster_labels,
                       MappingProxyType(transforms))

    def rows(self) -> list[tuple]:
        """Rows as tuples of decoded values, for comparisons."""
        names = [c.name for c in self.schema]
        return [tuple(self._cell_text(nm, i) for nm in names) for i in range(self.n_rows)]

    def to_csv(self, path: str | os.PathLike) -> None:
        names = [c.name for c in self.schema]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            decoded = [_decode_column(self, nm) for nm in names]
            w.writerows(zip(*decoded))


def _decode_column(table: _Table, name: str) -> list[str]:
    spec = table.spec_of(name)
    v = table.columns[name]
    if spec.role == "cluster":
        return [table.cluster_labels[i] for i in v]
    if spec.kind == "categorical":
        return [spec.levels[i] for i in v]
    if spec.kind in ("binary", "count"):
        return [str(int(x)) for x in v]
    return [repr(float(x)) for x in v]


def _dense_codes(raw) -> tuple[np.ndarray, tuple[str, ...]]:
    text = [str(v) for v in raw]
    mapping: dict[str, int] = {}
    codes = np.empty(len(text), dtype=np.int64)
    for i, s in enumerate(text):
        codes[i] = mapping.setdefault(s, len(mapping))
    return codes, tuple(mapping)


def _coerce(spec: ColumnSchema, raw) -> np.ndarray:
    if spec.kind == "categorical":
        arr = np.asarray(raw)
        if arr.dtype.kind in "iu":
            codes = arr.astype(np.int64)
        else:
            lookup = {lv: i for i, lv in enumerate(spec.levels)}
            try:
                codes = np.array([lookup[str(v)] for v in arr], dtype=np.int64)
            except KeyError as exc:
                raise DataError(f"column {spec.name!r}: unknown level {exc.args[0]!r}") from None
        if codes.size and (codes.min() < 0 or codes.max() >= len(spec.levels)):
            raise DataError(f"column {spec.name!r}: level code out of range")
        return codes
    arr = np.asarray(raw, dtype=float)
    if np.any(~np.isfinite(arr)):
        raise DataError(f"column {spec.name!r}: missing or non-finite values")
    if spec.kind == "binary":
        if not np.all((arr == 0) | (arr == 1)):
            raise DataError(f"column {spec.name!r}: binary values must be 0/1")
        return arr.astype(np.int64)
    if spec.kind == "count":
        if np.any(arr < 0) or np.any(arr != np.round(arr)):
            raise DataError(f"column {spec.name!r}: counts must be non-negative integers")
        return arr.astype(np.int64)
    if spec.role == "exposure" and np.any(arr <= 0):
        raise DataError(f"column {spec.name!r}: exposure must be positive")
    return arr


def _parse_cell(spec: ColumnSchema, text: str, rowno: int):
    text = text.strip()
    if text == "":
        raise DataError(f"row {rowno}: missing value in column {spec.name!r}")
    if spec.role == "cluster":
        return text
    if spec.kind == "categorical":
        if text not in spec.levels:
            raise DataError(f"row {rowno}: column {spec.name!r} has unknown level {text!r}")
        return spec.levels.index(text)
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {rowno}: cannot parse {text!r} in column {spec.name!r}") from None
    if not math.isfinite(value):
        raise DataError(f"row {rowno}: non-finite value in column {spec.name!r}")
    if spec.kind == "binary" and value not in (0.0, 1.0):
        raise DataError(f"row {rowno}: column {spec.name!r} must be 0 or 1, got {text!r}")
    if spec.kind == "count" and (value < 0 or value != int(value)):
        raise DataError(f"row {rowno}: column {spec.name!r} must be a non-negative integer")
    if spec.role == "exposure" and value <= 0:
        raise DataError(f"row {rowno}: exposure must be positive")
    return value


def load_csv(path: str | os.PathLike, schema: Sequence[ColumnSchema]) -> Dataset:
    """Read a comma-separated file with a header row into a :class:`Dataset`.

    Row numbers in error messages count data rows from 1 (the header is row 0).
    Columns not named in the schema are ignored.
    """
    schema = list(schema)
    validate_schema(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [spec.name for spec in schema if spec.name not in header]
        if missing:
            raise SchemaError(f"{path}: missing column{'s' if len(missing) > 1 else ''} "
                              + ", ".join(repr(m) for m in missing))
        pos = [header.index(spec.name) for spec in schema]
        values: list[list] = [[] for _ in schema]
        for rowno, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"row {rowno}: expected {len(header)} fields, got {len(row)}")
            for k, spec in enumerate(schema):
                values[k].append(_parse_cell(spec, row[pos[k]], rowno))
    if not values[0]:
        raise DataError(f"{path}: no data rows")
    return Dataset.from_columns(schema, {s.name: v for s, v in zip(schema, values)})


# ---------------------------------------------------------------------- #
# transforms
# ---------------------------------------------------------------------- #

def standardize(dataset: Dataset, column: str) -> Dataset:
    """Rescale a continuous column to sample mean 0 and variance 1 (N-1 denominator)."""
    spec = dataset.spec_of(column)
    if spec.kind != "continuous":
        raise DataError(f"column {column!r} is not continuous")
    x = dataset.column(column)
    if len(x) < 2:
        raise DataError(f"column {column!r}: need at least two values to standardize")
    mean = float(np.mean(x))
    sd = float(np.std(x, ddof=1))
    if not sd > 0:
        raise DataError(f"column {column!r} has zero variance; cannot standardize")
    prior = dict(dataset.transforms.get(column, {}))
    # compose with any earlier standardization so the original scale stays recoverable
    scale = prior.get("sd", 1.0) * sd
    shift = prior.get("mean", 0.0) + prior.get("sd", 1.0) * mean
    return dataset.with_column(spec, (x - mean) / sd, {"mean": shift, "sd": scale})


def bin_label_column(column: str) -> str:
    return f"{column}__bin"


def quartile_cutpoints(values: np.ndarray) -> np.ndarray:
    """Lower-boundary rank rule: cut ``q`` is the order statistic of 0-based index ``floor(q*N)``."""
    x = np.sort(np.asarray(values, dtype=float))
    n = len(x)
    cuts = [x[min(int(math.floor(q * n)), n - 1)] for q in (0.25, 0.5, 0.75)]
    return np.unique(cuts)


def bin_continuous(dataset: Dataset, column: str, scheme="quartiles") -> Dataset:
    """Add a categorical ``<column>__bin`` column; the raw column is kept.

    ``scheme`` is ``"quartiles"`` or a strictly increasing sequence of cut
    points.  Intervals are right-open, ``[c_k, c_{k+1})``; the maximum value
    falls in the top bin.
    """
    spec = dataset.spec_of(column)
    if spec.kind != "continuous":
        raise DataError(f"column {column!r} is not continuous")
    x = dataset.column(column)
    if isinstance(scheme, str):
        if scheme != "quartiles":
            raise DataError(f"unknown binning scheme {scheme!r}")
        if len(np.unique(x)) < 4:
            raise DataError(f"column {column!r} has fewer distinct values than the 4 requested bins")
        cuts = quartile_cutpoints(x)
        # the smallest cut is the minimum only under heavy ties; drop it so no bin is empty
        cuts = cuts[cuts > x.min()]
    else:
        cuts = np.asarray(list(scheme), dtype=float)
        if cuts.ndim != 1 or np.any(np.diff(cuts) <= 0):
            raise DataError("cut points must be strictly increasing")
        if len(np.unique(x)) < len(cuts) + 1:
            raise DataError(f"column {column!r} has fewer distinct values than requested bins")
    codes = np.searchsorted(cuts, x, side="right")
    levels = tuple(f"b{k}" for k in range(len(cuts) + 1))
    out = ColumnSchema(bin_label_column(column), "covariate", "categorical", levels)
    return dataset.with_column(out, codes, {"source": column, "cutpoints": cuts.tolist()})


# ---------------------------------------------------------------------- #
# design grids
# ---------------------------------------------------------------------- #

@dataclass(frozen=True)
class DesignGrid:
    """All admissible covariate combinations, in lexicographic level order.

    ``values[d]`` holds the numeric level values of design ``d``; for
    categorical covariates these are level codes.
    """

    columns: tuple[str, ...]
    levels: tuple[tuple[float, ...], ...]
    values: np.ndarray
    exclusion_groups: tuple[tuple[str, ...], ...] = ()

    def __len__(self) -> int:
        return len(self.values)

    def design(self, index: int) -> dict[str, float]:
        return dict(zip(self.columns, self.values[index].tolist()))

    def index_of(self, design: Sequence[float] | Mapping[str, float]) -> int:
        if isinstance(design, Mapping):
            design = [design[c] for c in self.columns]
        hit = np.flatnonzero(np.all(self.values == np.asarray(design, dtype=float), axis=1))
        if hit.size == 0:
            raise KeyError(f"design {tuple(design)} not in grid")
        return int(hit[0])


def _admissible(combo: Sequence[float], groups_pos: Sequence[Sequence[int]]) -> bool:
    return all(sum(combo[i] == 1 for i in pos) <= 1 for pos in groups_pos)


def enumerate_designs(levels: Mapping[str, Sequence[float]],
                      exclusion_groups: Sequence[Sequence[str]] = ()) -> DesignGrid:
    """Cartesian product of covariate levels minus combinations that switch on
    more than one indicator of any mutually exclusive group."""
    columns = tuple(levels)
    lv = tuple(tuple(float(v) for v in levels[c]) for c in columns)
    for c, l in zip(columns, lv):
        if not l:
            raise DataError(f"covariate {c!r} has no levels")
    groups = tuple(tuple(g) for g in exclusion_groups)
    pos = []
    for g in groups:
        missing = [c for c in g if c not in columns]
        if missing:
            raise DataError(f"exclusion group refers to unknown covariates {missing}")
        pos.append([columns.index(c) for c in g])
    rows = [combo for combo in itertools.product(*lv) if _admissible(combo, pos)]
    values = np.array(rows, dtype=float).reshape(len(rows), len(columns))
    values.flags.writeable = False
    return DesignGrid(columns, lv, values, groups)


def observed_grid(data: _Table, columns: Sequence[str]) -> DesignGrid:
    """Grid of the covariate combinations that occur in ``data``."""
    columns = tuple(columns)
    vals = np.unique(np.column_stack([np.asarray(data.column(c), dtype=float) for c in columns]),
                     axis=0)
    levels = tuple(tuple(np.unique(vals[:, k]).tolist()) for k in range(len(columns)))
    vals.flags.writeable = False
    return DesignGrid(columns, levels, vals)


def assign_designs(grid: DesignGrid, data: _Table) -> np.ndarray:
    """Grid index of every row, matching each covariate to its nearest level.

    Rows whose nearest-level combination is excluded from the grid get -1.
    """
    n = data.n_rows
    radix = [len(l) for l in grid.levels]
    flat = np.zeros(n, dtype=np.int64)
    for c, levels in zip(grid.columns, grid.levels):
        lv = np.asarray(levels)
        x = np.asarray(data.column(c), dtype=float)
        order = np.argsort(lv, kind="stable")
        sl = lv[order]
        j = np.clip(np.searchsorted(sl, x), 1, max(len(sl) - 1, 1))
        if len(sl) == 1:
            idx = np.zeros(n, dtype=np.int64)
        else:
            left = sl[j - 1]
            right = sl[j]
            idx = np.where(np.abs(x - left) <= np.abs(right - x), j - 1, j)
        flat = flat * len(levels) + order[idx]
    lookup = np.full(int(np.prod(radix)), -1, dtype=np.int64)
    for d, row in enumerate(grid.values):
        key = 0
        for val, levels in zip(row, grid.levels):
            key = key * len(levels) + levels.index(float(val))
        lookup[key] = d
    return lookup[flat]


# ---------------------------------------------------------------------- #
# collapsing
# ---------------------------------------------------------------------- #

def mean_column(column: str) -> str:
    return f"{column}__mean"


@dataclass(frozen=True)
class CollapsedDataset(_Table):
    """Unique (outcome, covariates, cluster, exposure) rows with weights.

    For every averaged continuous covariate, ``columns[name]`` holds the
    within-group mean of the raw values, so model code reads it transparently.
    """

    schema: tuple[ColumnSchema, ...]
    columns: Mapping[str, np.ndarray]
    cluster_labels: tuple[str, ...]
    weights: np.ndarray
    source_n: int
    averaged: tuple[str, ...] = ()
    transforms: Mapping[str, dict] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.n_rows

    def take(self, index) -> CollapsedDataset:
        index = np.asarray(index, dtype=np.int64)
        cols = {k: v[index] for k, v in self.columns.items()}
        used = np.unique(cols[self.cluster_name])
        remap = np.full(self.n_clusters, -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        cols[self.cluster_name] = remap[cols[self.cluster_name]]
        w = self.weights[index]
        return CollapsedDataset(self.schema, MappingProxyType({k: _freeze(v) for k, v in cols.items()}),
                                tuple(self.cluster_labels[i] for i in used), _freeze(w),
                                int(w.sum()), self.averaged, self.transforms)

    def to_csv(self, path: str | os.PathLike) -> None:
        names = [c.name for c in self.schema]
        header = [mean_column(n) if n in self.averaged else n for n in names] + ["weight"]
        decoded = [_decode_column(self, nm) for nm in names]
        decoded.append([str(int(w)) for w in self.weights])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(zip(*decoded))


def collapse(dataset: Dataset, continuous_columns: Sequence[str] | None = None) -> CollapsedDataset:
    """Collapse replicated rows into weighted unique rows.

    The key is (outcome, every covariate, cluster, exposure).  Continuous
    covariates named in ``continuous_columns`` are keyed by their
    ``<col>__bin`` label and replaced by the group mean of their raw values;
    by default every continuous covariate must be binned.  Exposure is an
    exact key.  Rows come out in lexicographic key order.
    """
    if continuous_columns is None:
        continuous_columns = [c.name for c in dataset.schema
                              if c.role == "covariate" and c.kind == "continuous"]
    continuous_columns = tuple(continuous_columns)
    names = {c.name for c in dataset.schema}
    for c in continuous_columns:
        if bin_label_column(c) not in names:
            raise DataError(f"continuous column {c!r} has no bin labels; call bin_continuous first")
    key_names = [c.name for c in dataset.schema if c.name not in continuous_columns]
    keys = np.column_stack([np.asarray(dataset.column(k), dtype=float) for k in key_names])
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    cols: dict[str, np.ndarray] = {}
    for k, name in enumerate(key_names):
        spec = dataset.spec_of(name)
        col = uniq[:, k]
        if spec.kind in ("binary", "count", "categorical") or spec.role == "cluster":
            col = col.astype(np.int64)
        cols[name] = _freeze(col)
    for name in continuous_columns:
        sums = np.bincount(inverse, weights=dataset.column(name), minlength=len(uniq))
        cols[name] = _freeze(sums / counts)
    return CollapsedDataset(dataset.schema, MappingProxyType(cols), dataset.cluster_labels,
                            _freeze(counts.astype(float)), dataset.n_rows, continuous_columns,
                            dataset.transforms)


def partition_by_practice(dataset: _Table) -> list:
    """Split into one table per cluster, in cluster-code order; row order kept."""
    codes = dataset.cluster
    order = np.argsort(codes, kind="stable")
    bounds = np.searchsorted(codes[order], np.arange(dataset.n_clusters + 1))
    return [dataset.take(order[bounds[j]:bounds[j + 1]]) for j in range(dataset.n_clusters)]
