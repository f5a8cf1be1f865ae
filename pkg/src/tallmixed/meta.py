"""Divide and recombine: per-cluster GLM fits pooled by meta-analysis.

Each cluster is fitted separately with a fixed-effects GLM (the random
intercept is absorbed by the cluster's own intercept).  The estimates are
then pooled by inverse-variance weighting, by univariate random-effects
meta-analysis (REML or DerSimonian-Laird), or by multivariate GLS with a
between-cluster covariance that is either zero or free only in its
intercept entry.
"""

from __future__ import annotations

import csv
import math
import os
import time
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import linalg, optimize

from .families import NEGATIVE_BINOMIAL
from .glm import Prepared, RankDeficientError, fit_prepared, prepare
from .model import GlmSpec

INCLUDED = "included"
EXCLUDED = "excluded"
REASONS = ("no_outcome_variation", "nonconvergence", "rank_deficient")
LOG_TAU2_RANGE = (-30.0, 12.0)


class MetaError(ValueError):
    """Too few usable cluster estimates for the requested pooling."""


@dataclass
class PracticeEstimate:
    """One cluster's coefficient estimates and their covariance.

    Excluded entries carry ``reason`` and no estimates.
    """

    label: str
    beta: np.ndarray | None
    S: np.ndarray | None
    n: float
    theta: float | None = None
    status: str = INCLUDED
    reason: str | None = None

    @property
    def included(self) -> bool:
        return self.status == INCLUDED

    @classmethod
    def excluded(cls, label: str, n: float, reason: str) -> PracticeEstimate:
        if reason not in REASONS:
            raise ValueError(f"unknown exclusion reason {reason!r}")
        return cls(label, None, None, n, None, EXCLUDED, reason)


@dataclass
class MetaResult:
    names: list[str]
    beta: np.ndarray
    se: np.ndarray
    vcov: np.ndarray
    tau2: float
    method: str
    structure: str
    clusters_used: int
    clusters_excluded: int
    runtime_seconds: float
    Sigma: np.ndarray | None = None
    exclusions: dict[str, int] = field(default_factory=dict)
    theta: float | None = None
    n_obs: float = 0.0

    def to_dict(self) -> dict:
        return {
            "model": "meta",
            "names": list(self.names),
            "beta": self.beta.tolist(),
            "se": self.se.tolist(),
            "vcov": self.vcov.reshape(-1).tolist(),
            "tau2": self.tau2,
            "Sigma": None if self.Sigma is None else self.Sigma.reshape(-1).tolist(),
            "method": self.method,
            "structure": self.structure,
            "clusters_used": self.clusters_used,
            "clusters_excluded": self.clusters_excluded,
            "exclusions": dict(self.exclusions),
            "theta": self.theta,
            "n_obs": self.n_obs,
            "runtime_seconds": self.runtime_seconds,
        }


class UniMeta(NamedTuple):
    beta: float
    se: float
    tau2: float


# ---------------------------------------------------------------------- #
# per-cluster fitting
# ---------------------------------------------------------------------- #

def _centre(p: Prepared, means: np.ndarray) -> Prepared:
    return Prepared(p.X - means, p.names, p.y, p.w, p.offset)


def column_means(spec: GlmSpec, partitions: Sequence) -> np.ndarray:
    """Pooled weighted means of the model-matrix columns (0 for the intercept)."""
    tot = None
    wsum = 0.0
    for part in partitions:
        p = prepare(spec, part)
        s = p.w @ p.X
        tot = s if tot is None else tot + s
        wsum += p.w.sum()
    means = tot / wsum
    if spec.intercept:
        means[0] = 0.0
    return means


def fit_per_practice(partitions: Sequence, spec: GlmSpec, centre: bool = False,
                     estimate_theta: bool = True) -> list[PracticeEstimate]:
    """Fixed-effects GLM fit in every cluster table.

    Clusters with a constant outcome are excluded before fitting; fits that
    are rank deficient, fail to converge, separate, or give a covariance
    that is not positive definite are excluded with a reason.  With
    ``centre`` the non-intercept columns are centred at their pooled means,
    so intercepts refer to the average covariate profile.
    """
    means = column_means(spec, partitions) if centre else None
    out = []
    for part in partitions:
        label = part.cluster_labels[0] if part.n_clusters == 1 else ",".join(part.cluster_labels)
        n = float(np.sum(part.weights))
        y = np.asarray(part.y, dtype=float)
        if y.size == 0 or np.all(y == y[0]):
            out.append(PracticeEstimate.excluded(label, n, "no_outcome_variation"))
            continue
        p = prepare(spec, part)
        if means is not None:
            p = _centre(p, means)
        try:
            fit = fit_prepared(spec, p, estimate_theta=estimate_theta)
        except RankDeficientError:
            out.append(PracticeEstimate.excluded(label, n, "rank_deficient"))
            continue
        S = fit.vcov
        if not fit.converged or not np.all(np.isfinite(S)) or not _is_pd(S):
            out.append(PracticeEstimate.excluded(label, n, "nonconvergence"))
            continue
        theta = fit.theta_hat if spec.family.name == NEGATIVE_BINOMIAL else None
        out.append(PracticeEstimate(label, fit.beta, S, n, theta))
    return out


def _is_pd(S: np.ndarray) -> bool:
    try:
        linalg.cholesky(S)
    except linalg.LinAlgError:
        return False
    return True


def _usable(estimates: Sequence[PracticeEstimate]) -> list[PracticeEstimate]:
    # label order makes every pooled result independent of input order
    return sorted((e for e in estimates if e.included), key=lambda e: e.label)


def _exclusions(estimates: Sequence[PracticeEstimate]) -> dict[str, int]:
    return dict(sorted(Counter(e.reason for e in estimates if not e.included).items()))


# ---------------------------------------------------------------------- #
# univariate pooling
# ---------------------------------------------------------------------- #

def dersimonian_laird(y: np.ndarray, v: np.ndarray) -> float:
    """Moment estimator of the between-cluster variance, truncated at 0."""
    w = 1.0 / v
    sw = w.sum()
    ybar = np.dot(w, y) / sw
    Q = np.dot(w, (y - ybar) ** 2)
    c = sw - np.dot(w, w) / sw
    if c <= 0:
        return 0.0
    return max(0.0, (Q - (len(y) - 1)) / c)


def reml_objective(tau2: float, y: np.ndarray, v: np.ndarray) -> float:
    """Univariate restricted log-likelihood, up to a constant."""
    w = 1.0 / (v + tau2)
    sw = w.sum()
    mu = np.dot(w, y) / sw
    return float(-0.5 * (np.sum(np.log(v + tau2)) + math.log(sw) + np.dot(w, (y - mu) ** 2)))


def _bounded_log_search(objective, scale: float) -> float:
    """Maximise ``objective(tau2)`` over tau2 >= 0 by a bounded search on
    log tau2, then compare against the boundary tau2 = 0."""
    lo = LOG_TAU2_RANGE[0]
    hi = math.log(max(scale, 1e-12)) + 5.0
    res = optimize.minimize_scalar(lambda r: -objective(math.exp(r)), bounds=(lo, hi),
                                   method="bounded", options={"xatol": 1e-10, "maxiter": 500})
    tau2 = math.exp(res.x)
    return tau2 if objective(tau2) > objective(0.0) else 0.0


def reml_tau2(y: np.ndarray, v: np.ndarray) -> float:
    scale = float(np.var(y) + np.max(v)) if len(y) > 1 else 1.0
    return _bounded_log_search(lambda t: reml_objective(t, y, v), scale)


def uni_meta(estimates: Sequence[PracticeEstimate], coef_index: int, mode: str = "reml",
             estimate_tau2: bool = True) -> UniMeta:
    """Pool coefficient ``coef_index`` across clusters.

    ``mode`` is ``fixed``, ``reml`` or ``mom``; with ``estimate_tau2=False``
    the between-cluster variance is fixed at zero.
    """
    if mode not in ("fixed", "reml", "mom"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    used = _usable(estimates)
    if not used:
        raise MetaError("no included cluster estimates")
    y = np.array([e.beta[coef_index] for e in used])
    v = np.array([e.S[coef_index, coef_index] for e in used])
    random = mode != "fixed" and estimate_tau2
    if random and len(used) < 2:
        raise MetaError("random-effects pooling needs at least 2 included clusters")
    tau2 = 0.0
    if random:
        tau2 = dersimonian_laird(y, v) if mode == "mom" else reml_tau2(y, v)
    w = 1.0 / (v + tau2)
    sw = w.sum()
    return UniMeta(float(np.dot(w, y) / sw), float(1.0 / math.sqrt(sw)), float(tau2))


def uni_meta_all(estimates: Sequence[PracticeEstimate], names: Sequence[str], mode: str = "reml",
                 tau2_index: int | None = 0) -> MetaResult:
    """One univariate pooling per coefficient.

    Only coefficient ``tau2_index`` (the intercept by default) gets an
    estimated between-cluster variance; all others are pooled with it fixed
    at zero.  The reported ``vcov`` is diagonal.
    """
    t0 = time.perf_counter()
    p = len(names)
    res = [uni_meta(estimates, k, mode, estimate_tau2=(k == tau2_index)) for k in range(p)]
    beta = np.array([r.beta for r in res])
    se = np.array([r.se for r in res])
    used = _usable(estimates)
    tau2 = res[tau2_index].tau2 if tau2_index is not None else 0.0
    return MetaResult(list(names), beta, se, np.diag(se ** 2), tau2, mode, "univariate",
                      len(used), len(estimates) - len(used), time.perf_counter() - t0,
                      exclusions=_exclusions(estimates), theta=_maybe_dispersion(used),
                      n_obs=float(sum(e.n for e in used)))


# ---------------------------------------------------------------------- #
# multivariate pooling
# ---------------------------------------------------------------------- #

def gls_pool(betas: np.ndarray, precisions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``beta = (sum P_j)^-1 sum P_j beta_j`` and its covariance ``(sum P_j)^-1``."""
    A = precisions.sum(axis=0)
    b = np.einsum("jab,jb->a", precisions, betas)
    A = 0.5 * (A + A.T)
    vcov = linalg.inv(A)
    return linalg.solve(A, b, assume_a="pos"), 0.5 * (vcov + vcov.T)


class _InterceptModel:
    """Stacked quantities for ``V_j = S_j + sigma e0 e0^T`` via Sherman-Morrison."""

    def __init__(self, betas: np.ndarray, P: np.ndarray, logdetS: np.ndarray):
        self.betas = betas
        self.P = P
        self.u = P[:, :, 0]
        self.c = P[:, 0, 0]
        self.logdetS = logdetS
        self.A0 = P.sum(axis=0)
        self.b0 = np.einsum("jab,jb->a", P, betas)
        self.ub = np.einsum("ja,ja->j", self.u, betas)

    def precisions(self, sigma: float) -> np.ndarray:
        s = sigma / (1.0 + sigma * self.c)
        return self.P - s[:, None, None] * self.u[:, :, None] * self.u[:, None, :]

    def pooled(self, sigma: float) -> tuple[np.ndarray, np.ndarray]:
        s = sigma / (1.0 + sigma * self.c)
        A = self.A0 - np.einsum("j,ja,jb->ab", s, self.u, self.u)
        b = self.b0 - np.einsum("j,ja->a", s * self.ub, self.u)
        return A, b

    def reml(self, sigma: float) -> float:
        A, b = self.pooled(sigma)
        A = 0.5 * (A + A.T)
        try:
            L = linalg.cholesky(A, lower=True)
        except linalg.LinAlgError:
            return -np.inf
        beta = linalg.cho_solve((L, True), b)
        r = self.betas - beta
        s = sigma / (1.0 + sigma * self.c)
        quad = np.einsum("ja,jab,jb->", r, self.P, r) - np.dot(s, np.einsum("ja,ja->j", self.u, r) ** 2)
        logdetV = self.logdetS.sum() + np.log1p(sigma * self.c).sum()
        return float(-0.5 * (logdetV + 2.0 * np.log(np.diag(L)).sum() + quad))

    def moments(self) -> float:
        """Multivariate Cochran-Q moment estimator for the [0,0] entry."""
        J, p = self.betas.shape
        A = 0.5 * (self.A0 + self.A0.T)
        # LU keeps small hand cases exact; Cholesky would round through sqrt
        beta = linalg.solve(A, self.b0)
        r = self.betas - beta
        Q = float(np.einsum("ja,jab,jb->", r, self.P, r))
        Ainv_u = linalg.solve(A, self.u.T)
        denom = A[0, 0] - float(np.einsum("ja,aj->", self.u, Ainv_u))
        if denom <= 0:
            return 0.0
        return max(0.0, (Q - p * (J - 1)) / denom)


def _stack(used: Sequence[PracticeEstimate]):
    betas = np.array([e.beta for e in used], dtype=float)
    P = np.empty((len(used),) + used[0].S.shape)
    logdet = np.empty(len(used))
    for j, e in enumerate(used):
        L = linalg.cholesky(e.S, lower=True)
        Linv = linalg.solve_triangular(L, np.eye(len(L)), lower=True)
        P[j] = Linv.T @ Linv
        logdet[j] = 2.0 * np.log(np.diag(L)).sum()
    return betas, 0.5 * (P + P.transpose(0, 2, 1)), logdet


def _screen_invertible(estimates: Sequence[PracticeEstimate]) -> list[PracticeEstimate]:
    out = []
    for e in estimates:
        if e.included and not _is_pd(e.S):
            e = PracticeEstimate.excluded(e.label, e.n, "rank_deficient")
        out.append(e)
    return out


def mv_meta(estimates: Sequence[PracticeEstimate], structure: str = "intercept_only",
            method: str = "reml", names: Sequence[str] | None = None) -> MetaResult:
    """Multivariate pooling under ``beta_j ~ MVN(beta, S_j + Sigma)``.

    ``structure='zero'`` fixes ``Sigma = 0`` (GLS pooling).  With
    ``'intercept_only'`` only ``Sigma[0, 0]`` is free, estimated by REML
    (bounded search on its log, beta profiled by GLS) or by the moment
    estimator (``method='mom'``).
    """
    if structure not in ("zero", "intercept_only"):
        raise ValueError(f"unknown between-cluster structure {structure!r}")
    if method not in ("reml", "mom"):
        raise ValueError(f"unknown estimation method {method!r}")
    t0 = time.perf_counter()
    estimates = _screen_invertible(estimates)
    used = _usable(estimates)
    if not used:
        raise MetaError("no included cluster estimates")
    if structure == "intercept_only" and len(used) < 2:
        raise MetaError("random-effects pooling needs at least 2 included clusters")
    betas, P, logdet = _stack(used)
    p = betas.shape[1]
    sigma = 0.0
    if structure == "zero":
        beta, vcov = gls_pool(betas, P)
        method = "fixed"
    else:
        model = _InterceptModel(betas, P, logdet)
        if method == "mom":
            sigma = model.moments()
        else:
            scale = float(np.var(betas[:, 0]) + np.max(1.0 / model.c))
            sigma = _bounded_log_search(model.reml, scale)
        beta, vcov = gls_pool(betas, model.precisions(sigma))
    Sigma = np.zeros((p, p))
    Sigma[0, 0] = sigma
    names = list(names) if names is not None else [f"b{k}" for k in range(p)]
    return MetaResult(names, beta, np.sqrt(np.diag(vcov)), vcov, float(sigma), method, structure,
                      len(used), len(estimates) - len(used), time.perf_counter() - t0,
                      Sigma=Sigma, exclusions=_exclusions(estimates), theta=_maybe_dispersion(used),
                      n_obs=float(sum(e.n for e in used)))


# ---------------------------------------------------------------------- #
# dispersion and serialisation
# ---------------------------------------------------------------------- #

def aggregate_dispersion(estimates: Sequence[PracticeEstimate]) -> float:
    """Size-weighted mean of the included clusters' dispersion estimates."""
    pairs = [(e.n, e.theta) for e in _usable(estimates) if e.theta is not None]
    if not pairs:
        raise MetaError("no dispersion estimates among included clusters")
    n = np.array([a for a, _ in pairs])
    t = np.array([b for _, b in pairs])
    return float(np.dot(n, t) / n.sum())


def _maybe_dispersion(used) -> float | None:
    try:
        return aggregate_dispersion(used)
    except MetaError:
        return None


def _triu_header(p: int) -> list[str]:
    return [f"S[{a},{b}]" for a in range(p) for b in range(a, p)]


def write_estimates(estimates: Sequence[PracticeEstimate], names: Sequence[str],
                    path: str | os.PathLike) -> None:
    """CSV with one row per cluster: estimates, upper-triangular S_j, size,
    dispersion and status.  Floats are written with full precision."""
    p = len(names)
    header = (["cluster", "status", "reason", "n", "theta"] + [f"beta[{nm}]" for nm in names]
              + _triu_header(p))
    iu = np.triu_indices(p)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for e in estimates:
            row = [e.label, e.status, e.reason or "", repr(float(e.n)),
                   "" if e.theta is None else repr(float(e.theta))]
            if e.included:
                row += [repr(float(b)) for b in e.beta] + [repr(float(s)) for s in e.S[iu]]
            else:
                row += [""] * (p + len(iu[0]))
            w.writerow(row)


def read_estimates(path: str | os.PathLike) -> tuple[list[PracticeEstimate], list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        names = [h[5:-1] for h in header if h.startswith("beta[")]
        p = len(names)
        iu = np.triu_indices(p)
        out = []
        for lineno, row in enumerate(r, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
            label, status, reason, n, theta = row[:5]
            if status == EXCLUDED:
                out.append(PracticeEstimate.excluded(label, float(n), reason))
                continue
            beta = np.array([float(x) for x in row[5:5 + p]])
            S = np.zeros((p, p))
            S[iu] = [float(x) for x in row[5 + p:]]
            S = S + np.triu(S, 1).T
            out.append(PracticeEstimate(label, beta, S, float(n), float(theta) if theta else None))
    return out, names
