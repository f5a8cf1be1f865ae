"""Sequential D-optimal subsampling over a covariate design grid.

Starting from a simple random sample, each step fits the GLMM to the current
subsample, scores every grid design by the determinant of the augmented
fixed-effects information, resolves the winner to the nearest design still
present in the pool, and moves rows with that design into the subsample:
all of them (``full_design``) or a seeded random fraction (``fraction``).
"""

from __future__ import annotations

import csv
import logging
import math
import os
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .data import DataError, Dataset, DesignGrid, assign_designs, collapse, enumerate_designs
from .families import NEGATIVE_BINOMIAL
from .glm import _weighted_gram
from .glmm import DEFAULT_QUAD_POINTS, GlmmFit, glmm_fit
from .model import GlmmSpec, GlmSpec, design_row, model_matrix, offset_vector, schema_kinds

log = logging.getLogger(__name__)

MAX_GRID_LEVELS = 50


class PoolExhausted(RuntimeError):
    """No design with remaining pool rows."""


class SubsampleError(RuntimeError):
    """A step could not complete; ``state`` is the last consistent state."""

    def __init__(self, message: str, state: SubsampleState, fit=None):
        super().__init__(message)
        self.state = state
        self.fit = fit


@dataclass(frozen=True)
class SubsampleMode:
    """``full_design`` moves every pool row of the chosen design; ``fraction``
    moves ``ceil(p * count)`` of them."""

    kind: str = "fraction"
    p: float = 0.25

    def __post_init__(self):
        if self.kind not in ("full_design", "fraction"):
            raise ValueError(f"unknown subsample mode {self.kind!r}")
        if self.kind == "fraction" and not 0.0 < self.p <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")

    @classmethod
    def full_design(cls) -> SubsampleMode:
        return cls("full_design", 1.0)

    @classmethod
    def fraction(cls, p: float = 0.25) -> SubsampleMode:
        return cls("fraction", p)

    def rows_to_take(self, count: int) -> int:
        if self.kind == "full_design":
            return count
        return min(count, math.ceil(self.p * count))


@dataclass(frozen=True)
class HistoryEntry:
    iteration: int
    chosen: int
    realized: int
    rows_added: int
    utility: float
    cumulative_size: int


@dataclass
class SubsampleState:
    """Membership of every original row plus the step history.

    ``in_subsample`` is a boolean mask over the original rows; the pool is
    its complement.  ``design_index`` caches each row's grid index (-1 when
    the row's nearest-level combination is not a grid design).
    """

    data: Dataset
    grid: DesignGrid
    design_index: np.ndarray
    in_subsample: np.ndarray
    seed: int
    target_n: int
    history: list[HistoryEntry] = field(default_factory=list)
    last_fit: GlmmFit | None = None

    @property
    def size(self) -> int:
        return int(self.in_subsample.sum())

    @property
    def subsample_index(self) -> np.ndarray:
        return np.flatnonzero(self.in_subsample)

    @property
    def pool_index(self) -> np.ndarray:
        return np.flatnonzero(~self.in_subsample)

    @property
    def subsample(self) -> Dataset:
        return self.data.take(self.subsample_index)

    @property
    def pool(self) -> Dataset | None:
        idx = self.pool_index
        return self.data.take(idx) if idx.size else None

    def available(self) -> np.ndarray:
        """Grid indices with at least one pool row."""
        d = self.design_index[~self.in_subsample]
        return np.unique(d[d >= 0])

    def copy(self) -> SubsampleState:
        return SubsampleState(self.data, self.grid, self.design_index, self.in_subsample.copy(),
                              self.seed, self.target_n, list(self.history), self.last_fit)

    def distinct_designs(self) -> int:
        return len({h.realized for h in self.history})


def default_grid(data: Dataset, spec: GlmSpec,
                 exclusion_groups: Sequence[Sequence[str]] = ()) -> DesignGrid:
    """Product of the observed levels of every model covariate."""
    levels = {}
    for c in spec.base_columns:
        u = np.unique(np.asarray(data.column(c), dtype=float))
        if len(u) > MAX_GRID_LEVELS:
            raise DataError(f"covariate {c!r} has {len(u)} distinct values; supply design levels")
        levels[c] = u.tolist()
    return enumerate_designs(levels, exclusion_groups)


def initial_sample(data: Dataset, n0: int, seed: int, grid: DesignGrid | None = None,
                   spec: GlmSpec | None = None, target_n: int | None = None) -> SubsampleState:
    """Simple random sample of ``n0`` rows without replacement."""
    N = data.n_rows
    if not 1 <= n0 <= N:
        raise ValueError(f"initial sample size {n0} outside 1..{N}")
    if grid is None:
        if spec is None:
            raise ValueError("need a design grid or a model spec to derive one")
        grid = default_grid(data, spec)
    rng = np.random.default_rng(seed)
    mask = np.zeros(N, dtype=bool)
    mask[rng.choice(N, size=n0, replace=False)] = True
    return SubsampleState(data, grid, assign_designs(grid, data), mask, seed,
                          N if target_n is None else target_n)


def _family_at(fit, spec: GlmSpec):
    fam = spec.family
    if fam.name == NEGATIVE_BINOMIAL and getattr(fit, "theta_hat", None):
        fam = fam.with_theta(fit.theta_hat)
    return fam


def current_information(fit, spec: GlmSpec, data) -> np.ndarray:
    """Fixed-effects expected information of ``data`` at ``fit.beta`` with b = 0."""
    X, _ = model_matrix(spec, data)
    eta = X @ fit.beta + offset_vector(spec, data)
    v = _family_at(fit, spec).info_weight(eta) * np.asarray(data.weights, dtype=float)
    return _weighted_gram(X, v)


def grid_matrix(spec: GlmSpec, grid: DesignGrid, kinds: Mapping | None = None) -> np.ndarray:
    return np.array([design_row(spec, grid.design(d), kinds) for d in range(len(grid))])


def utilities(fit, spec: GlmSpec, grid_X: np.ndarray, info: np.ndarray) -> np.ndarray:
    """``det(info + unit_information(d))`` for every row of ``grid_X``;
    singular or non-finite determinants give 0."""
    v = _family_at(fit, spec).info_weight(grid_X @ fit.beta)
    aug = info[None, :, :] + v[:, None, None] * grid_X[:, :, None] * grid_X[:, None, :]
    det = np.linalg.det(aug)
    return np.where(np.isfinite(det) & (det > 0), det, 0.0)


def utility(fit, candidate: Mapping[str, float], current_information: np.ndarray,
            spec: GlmSpec, kinds: Mapping | None = None) -> float:
    """D-optimality utility of adding one observation at ``candidate``.

    Equals ``1 / det(VAR)`` for the augmented design, where VAR is the
    inverse expected information.
    """
    x = design_row(spec, candidate, kinds)[None, :]
    return float(utilities(fit, spec, x, np.asarray(current_information, dtype=float))[0])


def select_design(state: SubsampleState, fit, spec: GlmSpec,
                  grid_X: np.ndarray | None = None) -> tuple[int, float]:
    """Argmax of the utility over every grid design; ties go to the lowest index."""
    if len(state.grid) == 0:
        raise ValueError("empty design grid")
    if grid_X is None:
        grid_X = grid_matrix(spec, state.grid, schema_kinds(state.data))
    info = current_information(fit, spec, state.subsample)
    u = utilities(fit, spec, grid_X, info)
    best = int(np.argmax(u))
    return best, float(u[best])


def nearest_design(grid: DesignGrid, chosen: int, available: Sequence[int]) -> int:
    """Available grid index closest to ``chosen`` in Euclidean distance on the
    raw level values; ties go to the lowest grid index."""
    available = np.sort(np.asarray(available, dtype=np.int64))
    if available.size == 0:
        raise PoolExhausted("no pool rows match any grid design")
    diff = grid.values[available] - grid.values[chosen]
    dist = np.sqrt((diff * diff).sum(axis=1))
    return int(available[np.argmin(dist)])


def _fit_table(data: Dataset, spec: GlmmSpec):
    # collapsing is exact when every model column is discrete
    cont = [c for c in spec.glm.base_columns if data.spec_of(c).kind == "continuous"]
    if cont or spec.glm.offset is not None:
        return data
    return collapse(data, continuous_columns=())


def fit_subsample(state: SubsampleState, spec: GlmmSpec, quad_points: int = DEFAULT_QUAD_POINTS,
                  backend: str | None = None) -> GlmmFit:
    return glmm_fit(spec, _fit_table(state.subsample, spec), quad_points=quad_points,
                    start=state.last_fit, backend=backend)


def step(state: SubsampleState, mode: SubsampleMode, spec: GlmmSpec,
         quad_points: int = DEFAULT_QUAD_POINTS, backend: str | None = None,
         grid_X: np.ndarray | None = None) -> SubsampleState:
    """One iteration: fit, select, resolve to an available design, add rows.

    Returns a new state; ``state`` itself is not modified.  A non-converged
    GLMM fit raises :class:`SubsampleError` carrying ``state`` for resumption.
    """
    avail = state.available()
    if avail.size == 0:
        raise PoolExhausted("pool has no rows with a grid design")
    fit = fit_subsample(state, spec, quad_points, backend)
    if not fit.converged:
        raise SubsampleError(
            f"GLMM fit on subsample of {state.size} rows did not converge "
            f"(max |grad| {fit.max_abs_grad:.3g})", state, fit)
    chosen, u = select_design(state, fit, spec.glm, grid_X)
    realized = nearest_design(state.grid, chosen, avail)
    it = len(state.history) + 1
    rows = np.flatnonzero(~state.in_subsample & (state.design_index == realized))
    k = mode.rows_to_take(rows.size)
    if k < rows.size:
        rng = np.random.default_rng([state.seed, it])
        rows = np.sort(rng.choice(rows, size=k, replace=False))
    new = state.copy()
    new.in_subsample[rows] = True
    new.last_fit = fit
    new.history.append(HistoryEntry(it, chosen, realized, int(rows.size), u, new.size))
    log.info("step %d: chose %s, took %d rows of %s (size %d)", it,
             state.grid.design(chosen), rows.size, state.grid.design(realized), new.size)
    return new


def run(data: Dataset, spec: GlmmSpec, n0: int, target_n: int, mode: SubsampleMode,
        seed: int, grid: DesignGrid | None = None, quad_points: int = DEFAULT_QUAD_POINTS,
        backend: str | None = None, state: SubsampleState | None = None
        ) -> tuple[SubsampleState, GlmmFit]:
    """Step until the subsample reaches ``target_n`` rows or the pool runs dry.

    Pass ``state`` (for example from a :class:`SubsampleError`) to resume.
    """
    N = data.n_rows
    if not n0 < target_n <= N:
        raise ValueError(f"need n0 < target_n <= N, got {n0}, {target_n}, {N}")
    if state is None:
        state = initial_sample(data, n0, seed, grid, spec.glm, target_n)
    grid_X = grid_matrix(spec.glm, state.grid, schema_kinds(data))
    while state.size < target_n and state.available().size:
        state = step(state, mode, spec, quad_points, backend, grid_X)
    fit = fit_subsample(state, spec, quad_points, backend)
    state.last_fit = fit
    return state, fit


def history_rows(state: SubsampleState) -> list[dict]:
    out = []
    for h in state.history:
        row = {"iteration": h.iteration}
        for c, v in zip(state.grid.columns, state.grid.values[h.chosen]):
            row[f"chosen_{c}"] = v
        for c, v in zip(state.grid.columns, state.grid.values[h.realized]):
            row[f"realized_{c}"] = v
        row.update(rows_added=h.rows_added, utility=h.utility, cumulative_size=h.cumulative_size)
        out.append(row)
    return out


def write_history(state: SubsampleState, path: str | os.PathLike) -> None:
    cols = (["iteration"] + [f"chosen_{c}" for c in state.grid.columns]
            + [f"realized_{c}" for c in state.grid.columns]
            + ["rows_added", "utility", "cumulative_size"])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in history_rows(state):
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
