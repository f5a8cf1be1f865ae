import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg

from tallmixed import meta
from tallmixed.data import partition_by_practice
from tallmixed.families import Family
from tallmixed.meta import MetaError, PracticeEstimate
from tallmixed.model import GlmSpec

from conftest import make_dataset, small_counts, small_logistic


def est(label, beta, S, n=100.0, theta=None):
    return PracticeEstimate(label, np.atleast_1d(np.asarray(beta, float)), np.atleast_2d(np.asarray(S, float)),
                            n, theta)


def random_estimates(seed, J=12, p=3, sigma=0.5):
    rng = np.random.default_rng(seed)
    out = []
    for j in range(J):
        A = rng.normal(scale=0.3, size=(p, p))
        S = A @ A.T + 0.05 * np.eye(p)
        b = np.array([0.5, -0.2, 0.1][:p]) + rng.multivariate_normal(np.zeros(p), S)
        b[0] += rng.normal(0, math.sqrt(sigma))
        out.append(est(f"p{j:03d}", b, S, n=50 + j))
    return out


# ---------------------------------------------------------------------- univariate

def test_fixed_two_estimates():
    r = meta.uni_meta([est("a", 1.0, 1.0), est("b", 3.0, 1.0)], 0, mode="fixed")
    assert r.beta == pytest.approx(2.0) and r.se == pytest.approx(0.70710678, abs=1e-8) and r.tau2 == 0


def test_dersimonian_laird_oracle():
    assert meta.dersimonian_laird(np.array([0.0, 2.0]), np.array([1.0, 1.0])) == pytest.approx(1.0)
    r = meta.uni_meta([est("a", 0.0, 1.0), est("b", 2.0, 1.0)], 0, mode="mom")
    assert r.tau2 == pytest.approx(1.0) and r.se == pytest.approx(1.0)


def test_dersimonian_laird_truncates():
    assert meta.dersimonian_laird(np.array([1.0, 1.1, 0.9]), np.ones(3)) == 0.0


def test_reml_matches_grid_maximum():
    rng = np.random.default_rng(1)
    v = rng.uniform(0.05, 0.3, size=15)
    y = rng.normal(0, np.sqrt(v + 0.4))
    t = meta.reml_tau2(y, v)
    grid = np.linspace(1e-6, 3, 30001)
    best = grid[np.argmax([meta.reml_objective(g, y, v) for g in grid])]
    assert t == pytest.approx(best, abs=2e-4)


def test_reml_boundary_zero():
    y = np.array([1.0, 1.01, 0.99, 1.0])
    assert meta.reml_tau2(y, np.ones(4)) == 0.0


def test_single_estimate():
    r = meta.uni_meta([est("a", 0.7, 0.04)], 0, mode="fixed")
    assert r.beta == 0.7 and r.se == pytest.approx(0.2)
    with pytest.raises(MetaError):
        meta.uni_meta([est("a", 0.7, 0.04)], 0, mode="reml")


def test_no_estimates():
    with pytest.raises(MetaError):
        meta.uni_meta([PracticeEstimate.excluded("a", 10, "rank_deficient")], 0, mode="fixed")


def test_uni_meta_all_only_intercept_gets_tau2():
    ests = random_estimates(2)
    names = ["(Intercept)", "x1", "x2"]
    r = meta.uni_meta_all(ests, names, mode="reml")
    assert r.tau2 == meta.uni_meta(ests, 0, "reml").tau2
    assert r.beta[1] == pytest.approx(meta.uni_meta(ests, 1, "fixed").beta, abs=0)
    assert np.count_nonzero(r.vcov - np.diag(np.diag(r.vcov))) == 0


# ---------------------------------------------------------------------- multivariate

def test_gls_identity():
    rng = np.random.default_rng(3)
    betas = rng.normal(size=(5, 2))
    P = np.array([np.eye(2) * k for k in range(1, 6)])
    beta, vcov = meta.gls_pool(betas, P)
    A = P.sum(0)
    np.testing.assert_allclose(beta, linalg.solve(A, sum(P[j] @ betas[j] for j in range(5))), atol=1e-10)
    np.testing.assert_allclose(vcov, linalg.inv(A), atol=1e-10)


def test_identical_identity_covariances_give_mean():
    ests = [est(f"p{j}", b, np.eye(2)) for j, b in enumerate([[0, 1], [2, 3], [4, 8]])]
    r = meta.mv_meta(ests, structure="zero")
    np.testing.assert_allclose(r.beta, [2, 4], atol=1e-12)
    np.testing.assert_allclose(r.vcov, np.eye(2) / 3, atol=1e-12)
    assert r.method == "fixed"


def test_diagonal_covariances_equal_univariate_fixed():
    rng = np.random.default_rng(4)
    ests = [est(f"p{j}", rng.normal(size=3), np.diag(rng.uniform(0.1, 1, 3))) for j in range(6)]
    r = meta.mv_meta(ests, structure="zero")
    for k in range(3):
        u = meta.uni_meta(ests, k, mode="fixed")
        assert r.beta[k] == pytest.approx(u.beta, abs=1e-12)
        assert r.se[k] == pytest.approx(u.se, abs=1e-12)


def test_scalar_mv_reml_equals_univariate_reml():
    ests = [est(e.label, e.beta[:1], e.S[:1, :1]) for e in random_estimates(5)]
    mv = meta.mv_meta(ests, "intercept_only", "reml")
    uni = meta.uni_meta(ests, 0, "reml")
    assert mv.tau2 == pytest.approx(uni.tau2, rel=1e-6)
    assert mv.beta[0] == pytest.approx(uni.beta, abs=1e-8)


def test_scalar_mv_mom_equals_dersimonian_laird():
    ests = [est(e.label, e.beta[:1], e.S[:1, :1]) for e in random_estimates(6)]
    assert meta.mv_meta(ests, "intercept_only", "mom").tau2 == pytest.approx(
        meta.uni_meta(ests, 0, "mom").tau2, rel=1e-10)


def dense_reml(sigma, ests):
    V = [e.S + sigma * np.outer(np.eye(len(e.beta))[0], np.eye(len(e.beta))[0]) for e in ests]
    Vi = [linalg.inv(v) for v in V]
    A = sum(Vi)
    b = linalg.solve(A, sum(vi @ e.beta for vi, e in zip(Vi, ests)))
    quad = sum((e.beta - b) @ vi @ (e.beta - b) for vi, e in zip(Vi, ests))
    return -0.5 * (sum(np.linalg.slogdet(v)[1] for v in V) + np.linalg.slogdet(A)[1] + quad)


def test_intercept_model_reml_matches_dense():
    ests = random_estimates(7)
    betas, P, logdet = meta._stack(ests)
    model = meta._InterceptModel(betas, P, logdet)
    for s in (0.0, 0.1, 0.7, 2.0):
        assert model.reml(s) == pytest.approx(dense_reml(s, ests), abs=1e-9)


def test_mv_reml_is_maximum():
    ests = random_estimates(8)
    r = meta.mv_meta(ests, "intercept_only", "reml")
    f0 = dense_reml(r.tau2, ests)
    for d in (-1e-3, 1e-3):
        assert dense_reml(max(r.tau2 + d, 0.0), ests) <= f0 + 1e-10
    assert r.Sigma[0, 0] == r.tau2 and np.count_nonzero(r.Sigma) <= 1


def test_mv_reml_recovers_sigma_in_simulation():
    got = [meta.mv_meta(random_estimates(100 + s, J=60, sigma=0.5), "intercept_only", "reml").tau2
           for s in range(20)]
    assert abs(np.mean(got) - 0.5) < 0.15


@settings(max_examples=20, deadline=None)
@given(st.randoms(use_true_random=False))
def test_permutation_invariance(rnd):
    ests = random_estimates(9)
    shuffled = list(ests)
    rnd.shuffle(shuffled)
    for kw in (dict(structure="zero"), dict(method="reml"), dict(method="mom")):
        a, b = meta.mv_meta(ests, **kw), meta.mv_meta(shuffled, **kw)
        assert np.array_equal(a.beta, b.beta) and np.array_equal(a.vcov, b.vcov) and a.tau2 == b.tau2
    assert meta.uni_meta(ests, 1, "reml") == meta.uni_meta(shuffled, 1, "reml")


def test_mv_meta_validation():
    ests = random_estimates(10)
    with pytest.raises(ValueError):
        meta.mv_meta(ests, structure="full")
    with pytest.raises(ValueError):
        meta.mv_meta(ests, method="ml")
    with pytest.raises(MetaError):
        meta.mv_meta(ests[:1], "intercept_only")


def test_singular_covariance_screened_out():
    ests = random_estimates(11, J=5)
    ests.append(est("zz", [0, 0, 0], np.zeros((3, 3))))
    r = meta.mv_meta(ests, "zero")
    assert r.clusters_used == 5 and r.exclusions == {"rank_deficient": 1}


# ---------------------------------------------------------------------- per-cluster fits

def test_fit_per_practice_exclusion_reasons():
    rows = {"y": [], "x": [], "g": []}

    def add(label, ys, xs):
        rows["y"] += ys
        rows["x"] += xs
        rows["g"] += [label] * len(ys)

    add("const", [1, 1, 1, 1], [0, 1, 0, 1])
    add("rank", [0, 1, 0, 1], [1, 1, 1, 1])
    add("sep", [0, 0, 1, 1], [0, 0, 1, 1])
    add("ok", [0, 1, 1, 0, 1, 0, 0, 1], [0, 0, 1, 1, 0, 1, 0, 1])
    ds = make_dataset(rows, {})
    spec = GlmSpec(Family.bernoulli(), ["x"])
    out = {e.label: e for e in meta.fit_per_practice(partition_by_practice(ds), spec)}
    assert out["const"].reason == "no_outcome_variation"
    assert out["rank"].reason == "rank_deficient"
    assert out["sep"].reason == "nonconvergence"
    assert out["ok"].included and out["ok"].n == 8
    r = meta.mv_meta(list(out.values()), "zero", names=["(Intercept)", "x"])
    assert r.clusters_used == 1 and r.clusters_excluded == 3
    assert r.exclusions == {"no_outcome_variation": 1, "nonconvergence": 1, "rank_deficient": 1}


def test_fit_per_practice_centring_changes_intercept_only():
    ds = small_logistic(seed=12, n=800, J=4)
    spec = GlmSpec(Family.bernoulli(), ["x1", "x2"])
    parts = partition_by_practice(ds)
    a = meta.fit_per_practice(parts, spec)
    b = meta.fit_per_practice(parts, spec, centre=True)
    for ea, eb in zip(a, b):
        np.testing.assert_allclose(ea.beta[1:], eb.beta[1:], atol=1e-8)
    assert not np.allclose(a[0].beta[0], b[0].beta[0])


def test_negbin_per_practice_dispersion():
    ds = small_counts(seed=13, n=2000, J=5, theta=2.0)
    spec = GlmSpec(Family.negative_binomial(1.0), ["x1"], offset="e")
    ests = meta.fit_per_practice(partition_by_practice(ds), spec)
    assert all(e.theta is not None for e in ests if e.included)
    agg = meta.aggregate_dispersion(ests)
    used = [e for e in ests if e.included]
    assert agg == pytest.approx(sum(e.n * e.theta for e in used) / sum(e.n for e in used))


def test_aggregate_dispersion_oracle():
    ests = [est("a", 0, 1, n=100, theta=1.0), est("b", 0, 1, n=300, theta=2.0),
            PracticeEstimate.excluded("c", 50, "nonconvergence")]
    assert meta.aggregate_dispersion(ests) == pytest.approx(1.75)
    with pytest.raises(MetaError):
        meta.aggregate_dispersion([est("a", 0, 1)])


def test_excluded_reason_validation():
    with pytest.raises(ValueError):
        PracticeEstimate.excluded("a", 1, "bored")


def test_estimates_csv_round_trip(tmp_path):
    ests = random_estimates(14, J=4)
    ests[1].theta = 1.2345678901234567
    ests.append(PracticeEstimate.excluded("p999", 12.0, "no_outcome_variation"))
    path = tmp_path / "est.csv"
    names = ["(Intercept)", "x1", "x2"]
    meta.write_estimates(ests, names, path)
    back, back_names = meta.read_estimates(path)
    assert back_names == names
    for a, b in zip(ests, back):
        assert (a.label, a.status, a.reason, a.n, a.theta) == (b.label, b.status, b.reason, b.n, b.theta)
        if a.included:
            assert np.array_equal(a.beta, b.beta)
            assert np.array_equal(np.triu(a.S), np.triu(b.S))
    assert np.array_equal(meta.mv_meta(ests, "zero").beta, meta.mv_meta(back, "zero").beta)


def test_read_estimates_rejects_ragged(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("cluster,status,reason,n,theta,beta[a],S[0,0]\nx,included,,1\n")
    with pytest.raises(ValueError, match="line 2"):
        meta.read_estimates(path)


def test_meta_result_dict():
    r = meta.mv_meta(random_estimates(15), "intercept_only", names=["a", "b", "c"])
    d = r.to_dict()
    assert d["names"] == ["a", "b", "c"] and d["structure"] == "intercept_only"
    assert len(d["vcov"]) == 9 and d["clusters_used"] == 12
