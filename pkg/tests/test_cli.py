import csv
import hashlib
import json
import os

import numpy as np
import pytest

from tallmixed import cli


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def itsa(tmp_path_factory):
    d = tmp_path_factory.mktemp("itsa")
    assert cli.main(["simulate", "itsa", "--n", "6000", "--j", "12", "--seed", "1", "--out", str(d / "itsa")]) == 0
    return d / "itsa"


@pytest.fixture(scope="module")
def consults(tmp_path_factory):
    d = tmp_path_factory.mktemp("consults")
    assert cli.main(["simulate", "consults", "--n", "4000", "--j", "15", "--seed", "2",
                     "--out", str(d / "consults")]) == 0
    return d / "consults"


ITSA_FORMULA = "y ~ time + case + int1"


def model_args(prefix, formula=ITSA_FORMULA):
    return ["--data", f"{prefix}.csv", "--schema", f"{prefix}.schema", "--formula", formula]


# ---------------------------------------------------------------------- simulate

def test_simulate_writes_three_reproducible_files(tmp_path, itsa):
    prefix = tmp_path / "again"
    assert cli.main(["simulate", "itsa", "--n", "6000", "--j", "12", "--seed", "1", "--out", str(prefix)]) == 0
    for ext in (".csv", ".schema", ".truth.json"):
        assert sha(f"{prefix}{ext}") == sha(f"{itsa}{ext}")
    truth = json.loads(open(f"{prefix}.truth.json").read())
    assert truth["seed"] == 1 and truth["N"] == 6000


def test_simulate_default_prefix(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(["simulate", "consults", "--n", "500", "--j", "5", "--seed", "3"]) == 0
    assert sorted(os.listdir(tmp_path)) == ["consults.csv", "consults.schema", "consults.truth.json"]
    assert "exposure" in open("consults.csv").readline()
    assert oct(os.stat("consults.csv").st_mode & 0o777) != oct(0o600)


# ---------------------------------------------------------------------- fit

def test_fit_weighted_equals_full(tmp_path, itsa):
    recs = {}
    for m in ("full", "weighted"):
        out = tmp_path / f"{m}.json"
        assert cli.main(["fit", *model_args(itsa), "--method", m, "--out", str(out)]) == 0
        recs[m] = json.loads(out.read_text())
    np.testing.assert_allclose(recs["full"]["result"]["beta"], recs["weighted"]["result"]["beta"], atol=1e-6)
    assert recs["weighted"]["details"]["source_rows"] == 6000
    assert recs["weighted"]["n_obs"] < recs["full"]["n_obs"] == 6000
    assert recs["full"]["method"] == "full" and recs["full"]["runtime_seconds"] > 0


def test_fit_subsample_writes_history(tmp_path, itsa):
    out = tmp_path / "sub.json"
    assert cli.main(["fit", *model_args(itsa), "--method", "subsample_modified", "--target-fraction", "0.3",
                     "--seed", "3", "--grid", "observed", "--out", str(out)]) == 0
    rec = json.loads(out.read_text())
    hist = read_csv(tmp_path / "sub.history.csv")
    assert len(hist) == rec["details"]["iterations"] > 0
    assert int(hist[-1]["cumulative_size"]) == rec["n_obs"] >= 1800


def test_fit_subsample_is_deterministic(tmp_path, itsa):
    outs = []
    for k in range(2):
        out = tmp_path / f"s{k}.json"
        assert cli.main(["fit", *model_args(itsa), "--method", "subsample", "--target-fraction", "0.2",
                         "--seed", "4", "--out", str(out), "--history", str(tmp_path / f"h{k}.csv")]) == 0
        rec = json.loads(out.read_text())
        rec.pop("runtime_seconds")
        rec["result"].pop("runtime_seconds")
        outs.append(rec)
    assert outs[0] == outs[1]
    assert sha(tmp_path / "h0.csv") == sha(tmp_path / "h1.csv")


def test_fit_meta_mv_reports_exclusions(tmp_path, consults):
    out, est = tmp_path / "mv.json", tmp_path / "est.csv"
    formula = "y ~ age + gender + morb_moderate + morb_high + morb_veryhigh"
    assert cli.main(["fit", *model_args(consults, formula), "--method", "meta_mv", "--tau2", "intercept_only",
                     "--bins", "quartiles", "--estimates", str(est), "--out", str(out)]) == 0
    res = json.loads(out.read_text())["result"]
    assert res["clusters_used"] + res["clusters_excluded"] == 15
    assert sum(res["exclusions"].values()) == res["clusters_excluded"]
    assert res["theta"] is not None
    out2 = tmp_path / "mv2.json"
    assert cli.main(["fit", *model_args(consults, formula), "--method", "meta_mv", "--from-estimates", str(est),
                     "--out", str(out2)]) == 0
    assert json.loads(out2.read_text())["result"]["beta"] == res["beta"]


@pytest.mark.parametrize("method", ["meta_uni", "meta_fixed"])
def test_fit_univariate_meta(tmp_path, itsa, method):
    out = tmp_path / "m.json"
    assert cli.main(["fit", *model_args(itsa), "--method", method, "--out", str(out)]) == 0
    res = json.loads(out.read_text())["result"]
    assert res["structure"] == "univariate" and len(res["beta"]) == 4


def test_fit_fitted_values_export(tmp_path, itsa):
    out, fv = tmp_path / "f.json", tmp_path / "fv.csv"
    assert cli.main(["fit", *model_args(itsa), "--method", "weighted", "--fitted", str(fv), "--out", str(out)]) == 0
    rows = read_csv(fv)
    assert len(rows) == 6000 and 0 < float(rows[0]["fitted"]) < 1


# ---------------------------------------------------------------------- compare

def test_compare_full_weighted_meta(tmp_path, itsa):
    out = tmp_path / "cmp.csv"
    assert cli.main(["compare", *model_args(itsa), "--methods", "full,weighted,meta_mv", "--repeats", "1",
                     "--out", str(out)]) == 0
    rows = {r["method"]: r for r in read_csv(out)}
    assert set(rows) == {"full", "weighted", "meta_mv"}
    assert all(r["status"] == "ok" for r in rows.values())
    for k in ("OR[(Intercept)]", "OR[time]", "OR[case]", "OR[int1]"):
        assert float(rows["full"][k]) == pytest.approx(float(rows["weighted"][k]), rel=1e-6)
        assert abs(np.log(float(rows["meta_mv"][k]) / float(rows["full"][k]))) < \
            3 * float(rows["full"][k.replace("OR", "se")]) / float(rows["full"][k])
    assert float(rows["weighted"]["n_obs"]) < float(rows["full"]["n_obs"])


def test_compare_records_failures_in_row(tmp_path, itsa):
    out = tmp_path / "cmp.csv"
    # no seed: the subsample row fails, the full row still runs
    code = cli.main(["compare", *model_args(itsa), "--methods", "weighted,subsample", "--repeats", "1",
                     "--out", str(out)])
    assert code == 1 and not out.exists()
    assert cli.main(["compare", *model_args(itsa), "--methods", "weighted,meta_mv", "--repeats", "1",
                     "--from-estimates", str(tmp_path / "missing.csv"), "--out", str(out)]) == 0
    rows = {r["method"]: r for r in read_csv(out)}
    assert rows["weighted"]["status"] == "ok"
    assert rows["meta_mv"]["status"] == "failed" and "missing.csv" in rows["meta_mv"]["error"]


def test_compare_needs_two_methods(tmp_path, itsa):
    assert cli.main(["compare", *model_args(itsa), "--methods", "full", "--out", str(tmp_path / "x.csv")]) == 1


# ---------------------------------------------------------------------- collapse and designs

def test_collapse_command(tmp_path, itsa):
    out = tmp_path / "col.csv"
    assert cli.main(["collapse", "--data", f"{itsa}.csv", "--schema", f"{itsa}.schema", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert sum(float(r["weight"]) for r in rows) == 6000
    assert len(rows) < 6000


@pytest.mark.parametrize("preset, count", [("itsa", 152), ("consults", 72)])
def test_designs_presets(preset, count, capsys):
    assert cli.main(["designs", "--preset", preset]) == 0
    assert capsys.readouterr().out.strip() == f"{count} designs"


def test_designs_presence_counts(tmp_path, itsa, capsys):
    out = tmp_path / "g.csv"
    assert cli.main(["designs", "--preset", "itsa", "--data", f"{itsa}.csv", "--schema", f"{itsa}.schema",
                     "--out", str(out)]) == 0
    assert capsys.readouterr().out.strip() == "152 designs, 38 present in data"
    rows = read_csv(out)
    assert len(rows) == 152 and sum(int(r["rows"]) for r in rows) == 6000


def test_designs_custom_levels(capsys):
    assert cli.main(["designs", "--levels", "a=0,1;b=0,1;c=1:3", "--exclusive", "a,b"]) == 0
    assert capsys.readouterr().out.strip() == "9 designs"


# ---------------------------------------------------------------------- exit codes

def test_exit_usage(tmp_path, itsa):
    assert cli.main([]) == 1
    assert cli.main(["fit", *model_args(itsa), "--method", "bogus", "--out", str(tmp_path / "x")]) == 1
    assert cli.main(["fit", *model_args(itsa), "--method", "subsample", "--out", str(tmp_path / "x")]) == 1
    assert cli.main(["designs"]) == 1


def test_exit_data(tmp_path, itsa):
    assert cli.main(["fit", "--data", str(tmp_path / "nope.csv"), "--schema", f"{itsa}.schema",
                     "--formula", ITSA_FORMULA, "--out", str(tmp_path / "x.json")]) == 2
    assert cli.main(["fit", *model_args(itsa, "y ~ time + nosuch"), "--out", str(tmp_path / "x.json")]) == 2
    assert cli.main(["fit", *model_args(itsa, "z ~ time"), "--out", str(tmp_path / "x.json")]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text(open(f"{itsa}.csv").read().replace("\n1,", "\nx,", 1))
    assert cli.main(["fit", "--data", str(bad), "--schema", f"{itsa}.schema", "--formula", ITSA_FORMULA,
                     "--out", str(tmp_path / "x.json")]) == 2


def test_exit_numerical_and_no_partial_outputs(tmp_path):
    data, schema = tmp_path / "d.csv", tmp_path / "d.schema"
    data.write_text("y,a,b,g\n0,0,0,p1\n1,1,1,p1\n0,0,0,p2\n1,1,1,p2\n")
    schema.write_text("y = outcome:binary\na = covariate:binary\nb = covariate:binary\ng = cluster:categorical\n")
    out, fv = tmp_path / "r.json", tmp_path / "fv.csv"
    code = cli.main(["fit", "--data", str(data), "--schema", str(schema), "--formula", "y ~ a + b",
                     "--fitted", str(fv), "--out", str(out)])
    assert code == 3
    assert sorted(os.listdir(tmp_path)) == ["d.csv", "d.schema"]
