"""Synthetic clustered datasets with known generating parameters.

Two shapes: an interrupted-time-series logistic model (binary outcome,
yearly time 1..19, two step interventions) and a negative-binomial
consultation-count model with exposure time and one-hot morbidity groups.
Cluster sizes are heterogeneous (log-normal multipliers) so that small
clusters exist.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import ColumnSchema, Dataset, standardize
from .families import Family
from .model import GlmmSpec, GlmSpec

ITSA_TERMS = (
    ("time",), ("case",), ("case", "time"),
    ("int1",), ("time", "int1"), ("case", "int1"), ("case", "time", "int1"),
    ("int2",), ("time", "int2"), ("case", "int2"), ("case", "time", "int2"),
)
ITSA_LEVELS = {"time": list(range(1, 20)), "case": [0, 1], "int1": [0, 1], "int2": [0, 1]}

CONSULT_TERMS = (("age",), ("gender",), ("morb_moderate",), ("morb_high",), ("morb_veryhigh",))
CONSULT_MORBIDITY = ("morb_moderate", "morb_high", "morb_veryhigh")
CONSULT_AGE_LEVELS = [-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 2.5]


def _default_itsa_beta():
    return [-1.0, 0.05, -0.3, 0.02, -0.1, -0.05, 0.3, 0.02, 0.1, 0.03, 0.5, -0.04]


def _default_consult_beta():
    return [float(np.log(3.0)), float(np.log(1.25)), float(np.log(0.68)),
            float(np.log(2.12)), float(np.log(2.94)), float(np.log(3.94))]


@dataclass
class ItsaParams:
    """Generating parameters for the ITSA logistic shape.

    ``beta`` is ordered as intercept followed by :data:`ITSA_TERMS`.
    Intervention indicators are step functions of time: ``int1 = time >= 9``,
    ``int2 = time >= 16``.
    """

    beta: list[float] = field(default_factory=_default_itsa_beta)
    tau2: float = 0.05
    J: int = 50
    N: int = 50_000
    case_prob: float = 0.5
    size_sdlog: float = 0.5
    int1_start: int = 9
    int2_start: int = 16

    def __post_init__(self):
        if len(self.beta) != len(ITSA_TERMS) + 1:
            raise ValueError(f"ITSA beta needs {len(ITSA_TERMS) + 1} entries")
        if self.tau2 < 0:
            raise ValueError("tau2 must be >= 0")
        if self.N < self.J or self.J < 1:
            raise ValueError("need N >= J >= 1")


@dataclass
class ConsultParams:
    """Generating parameters for the negative-binomial consultation shape.

    ``beta`` is ordered intercept, standardized age, gender, moderate, high,
    very-high morbidity.  Exposure (years) is uniform on ``exposure_range``.
    """

    beta: list[float] = field(default_factory=_default_consult_beta)
    tau2: float = 0.1
    theta: float = 1.25
    J: int = 200
    N: int = 100_000
    exposure_range: tuple[float, float] = (0.5, 4.0)
    morbidity_probs: tuple[float, float, float, float] = (0.4, 0.3, 0.2, 0.1)
    age_mean: float = 50.0
    age_sd: float = 17.0
    size_sdlog: float = 0.5

    def __post_init__(self):
        if len(self.beta) != len(CONSULT_TERMS) + 1:
            raise ValueError(f"consultation beta needs {len(CONSULT_TERMS) + 1} entries")
        if not self.theta > 0:
            raise ValueError("theta must be > 0")
        if self.tau2 < 0:
            raise ValueError("tau2 must be >= 0")
        if abs(sum(self.morbidity_probs) - 1.0) > 1e-12 or len(self.morbidity_probs) != 4:
            raise ValueError("morbidity probabilities must be 4 values summing to 1")
        if self.N < self.J or self.J < 1:
            raise ValueError("need N >= J >= 1")


def itsa_schema() -> list[ColumnSchema]:
    return [
        ColumnSchema("y", "outcome", "binary"),
        ColumnSchema("time", "covariate", "count"),
        ColumnSchema("case", "covariate", "binary"),
        ColumnSchema("int1", "covariate", "binary"),
        ColumnSchema("int2", "covariate", "binary"),
        ColumnSchema("practice", "cluster", "categorical"),
    ]


def consult_schema() -> list[ColumnSchema]:
    return [
        ColumnSchema("y", "outcome", "count"),
        ColumnSchema("age", "covariate", "continuous"),
        ColumnSchema("gender", "covariate", "binary"),
        ColumnSchema("morb_moderate", "covariate", "binary"),
        ColumnSchema("morb_high", "covariate", "binary"),
        ColumnSchema("morb_veryhigh", "covariate", "binary"),
        ColumnSchema("practice", "cluster", "categorical"),
        ColumnSchema("exposure", "exposure", "continuous"),
    ]


def itsa_spec() -> GlmmSpec:
    return GlmmSpec(GlmSpec(Family.bernoulli(), ITSA_TERMS), "practice")


def consult_spec(theta: float = 1.0) -> GlmmSpec:
    return GlmmSpec(GlmSpec(Family.negative_binomial(theta), CONSULT_TERMS, offset="exposure"), "practice")


def cluster_assignment(rng: np.random.Generator, N: int, J: int, sdlog: float) -> np.ndarray:
    """Cluster index per row (sorted); every cluster gets at least one row."""
    mult = rng.lognormal(0.0, sdlog, size=J)
    extra = rng.multinomial(N - J, mult / mult.sum())
    return np.repeat(np.arange(J), extra + 1)


def _labels(J: int) -> np.ndarray:
    width = max(3, len(str(J)))
    return np.array([f"P{j + 1:0{width}d}" for j in range(J)])


def simulate_itsa_logistic(params: ItsaParams, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    cl = cluster_assignment(rng, params.N, params.J, params.size_sdlog)
    b = rng.normal(0.0, np.sqrt(params.tau2), size=params.J) if params.tau2 > 0 else np.zeros(params.J)
    time = rng.integers(1, 20, size=params.N)
    case = (rng.random(params.N) < params.case_prob).astype(np.int64)
    int1 = (time >= params.int1_start).astype(np.int64)
    int2 = (time >= params.int2_start).astype(np.int64)
    cols = {"time": time, "case": case, "int1": int1, "int2": int2}
    X = np.column_stack([np.ones(params.N)] + [np.prod([cols[c] for c in t], axis=0) for t in ITSA_TERMS])
    eta = X @ np.asarray(params.beta) + b[cl]
    y = (rng.random(params.N) < 1.0 / (1.0 + np.exp(-eta))).astype(np.int64)
    values = dict(cols, y=y, practice=_labels(params.J)[cl])
    return Dataset.from_columns(itsa_schema(), values)


def simulate_negbin_consults(params: ConsultParams, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    N = params.N
    cl = cluster_assignment(rng, N, params.J, params.size_sdlog)
    b = rng.normal(0.0, np.sqrt(params.tau2), size=params.J) if params.tau2 > 0 else np.zeros(params.J)
    age_raw = rng.normal(params.age_mean, params.age_sd, size=N)
    gender = (rng.random(N) < 0.5).astype(np.int64)
    morb = rng.choice(4, size=N, p=np.asarray(params.morbidity_probs))
    exposure = rng.uniform(*params.exposure_range, size=N)
    onehot = {name: (morb == k + 1).astype(np.int64) for k, name in enumerate(CONSULT_MORBIDITY)}
    values = {"y": np.zeros(N, dtype=np.int64), "age": age_raw, "gender": gender, **onehot,
              "practice": _labels(params.J)[cl], "exposure": exposure}
    ds = standardize(Dataset.from_columns(consult_schema(), values), "age")
    age = ds.column("age")
    X = np.column_stack([np.ones(N), age, gender] + [onehot[m] for m in CONSULT_MORBIDITY])
    mu = exposure * np.exp(X @ np.asarray(params.beta) + b[cl])
    t = params.theta
    y = rng.negative_binomial(t, t / (t + mu))
    return ds.with_column(ds.spec_of("y"), y)


def truth_record(params, seed: int, realized_tau2: float | None = None) -> str:
    d = asdict(params)
    d["shape"] = "itsa" if isinstance(params, ItsaParams) else "consults"
    d["seed"] = seed
    d["terms"] = ["(Intercept)"] + [":".join(t) for t in (ITSA_TERMS if d["shape"] == "itsa" else CONSULT_TERMS)]
    return json.dumps(d, indent=2, sort_keys=True)
