import numpy as np
import pytest

from tallmixed.data import ColumnSchema, Dataset
from tallmixed.kernels import BACKENDS

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(params=sorted(BACKENDS))
def backend(request):
    return request.param


def make_dataset(columns: dict, kinds: dict, outcome="y", cluster="g", exposure=None) -> Dataset:
    schema = []
    for name in columns:
        if name == outcome:
            schema.append(ColumnSchema(name, "outcome", kinds.get(name, "binary")))
        elif name == cluster:
            schema.append(ColumnSchema(name, "cluster", "categorical"))
        elif name == exposure:
            schema.append(ColumnSchema(name, "exposure", "continuous"))
        else:
            kind = kinds.get(name, "binary")
            levels = ()
            if isinstance(kind, tuple):
                kind, levels = kind
            schema.append(ColumnSchema(name, "covariate", kind, levels))
    return Dataset.from_columns(schema, columns)


def small_logistic(seed=0, n=400, J=8, tau2=0.5, beta=(-0.3, 0.8, -0.5)):
    """Discrete two-covariate logistic data with a random intercept."""
    rng = np.random.default_rng(seed)
    g = rng.integers(0, J, size=n)
    x1 = rng.integers(0, 2, size=n)
    x2 = rng.integers(0, 3, size=n)
    b = rng.normal(0, np.sqrt(tau2), size=J)
    eta = beta[0] + beta[1] * x1 + beta[2] * x2 + b[g]
    y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(int)
    return make_dataset({"y": y, "x1": x1, "x2": x2, "g": [f"c{k}" for k in g]},
                        {"x1": "binary", "x2": "count"})


def small_counts(seed=0, n=300, J=6, tau2=0.3, theta=2.0, family="negative_binomial"):
    rng = np.random.default_rng(seed)
    g = rng.integers(0, J, size=n)
    x1 = rng.integers(0, 2, size=n)
    expo = rng.choice([0.5, 1.0, 2.0], size=n)
    b = rng.normal(0, np.sqrt(tau2), size=J)
    mu = expo * np.exp(0.4 + 0.5 * x1 + b[g])
    if family == "poisson":
        y = rng.poisson(mu)
    else:
        y = rng.negative_binomial(theta, theta / (theta + mu))
    return make_dataset({"y": y, "x1": x1, "g": [f"c{k}" for k in g], "e": expo},
                        {"y": "count", "x1": "binary"}, exposure="e")
