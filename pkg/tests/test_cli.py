import csv
import json

import numpy as np
import pytest

from nersae.cli import main
from nersae.data import fixture_path

FAST_HB = ["--chains", "2", "--iterations", "1500", "--burn-in", "500", "--jobs", "1"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))


def run(argv, capsys):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr().out


def test_fit_nm_outputs(tmp_path, capsys):
    code, _ = run(["fit", "--method", "nm-hb", "--dataset", "corn", "--out", tmp_path, *FAST_HB], capsys)
    assert code == 0
    est = read_csv(tmp_path / "estimates.csv")
    assert len(est) == 12
    assert list(est[0]) == ["area", "estimate", "sd_or_rmse", "ci90_lo", "ci90_hi", "ci95_lo", "ci95_hi"]
    for r in est:
        v = {k: float(x) for k, x in r.items()}
        assert v["ci95_lo"] <= v["ci90_lo"] <= v["estimate"] <= v["ci90_hi"] <= v["ci95_hi"]
    assert abs(float(est[11]["estimate"]) - 135.3) < 3
    out = read_csv(tmp_path / "outliers.csv")
    assert len(out) == 37 and "posterior_outlier_prob" in out[0]
    params = json.loads((tmp_path / "params.json").read_text())
    assert {"sigma1_2", "sigma2_2", "p_e"} <= set(params["mean"])
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["schema"] == "nersae.fit/1" and man["seed"] == 20240101
    assert man["config"]["iterations"] == 1500


@pytest.mark.parametrize("method", ["reblup", "mq"])
def test_fit_frequentist_methods(tmp_path, capsys, method):
    code, stdout = run(["fit", "--method", method, "--dataset", "corn-reduced", "--out", tmp_path,
                        "--bootstrap-b", "10", "--jobs", "1"], capsys)
    assert code == 0 and "12 areas, 36 units" in stdout
    est = read_csv(tmp_path / "estimates.csv")
    assert all(float(r["sd_or_rmse"]) > 0 for r in est)
    assert not (tmp_path / "outliers.csv").exists()


def test_fit_from_csv_records_digests(tmp_path, capsys):
    u, a = fixture_path("corn_units.csv"), fixture_path("corn_areas.csv")
    code, _ = run(["fit", "--method", "mq", "--units", u, "--areas", a, "--out", tmp_path], capsys)
    assert code == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert len(man["inputs"]["units"]["sha256"]) == 64


def test_fit_toy_dataset_exit_2(tmp_path, capsys):
    u, a = tmp_path / "u.csv", tmp_path / "a.csv"
    u.write_text("area_id,unit_id,y,x1\n1,1,1.0,2.0\n2,1,3.0,1.0\n")
    a.write_text("area_id,N,xbar1\n1,10,1.0\n2,10,2.0\n")
    code, stdout = run(["fit", "--method", "mq", "--units", u, "--areas", a, "--out", tmp_path / "o"], capsys)
    assert code == 2
    err = json.loads(stdout.strip().splitlines()[-1])
    assert err["exit_code"] == 2 and "insufficient degrees of freedom" in err["message"]


def test_fit_convergence_exit_3(tmp_path, capsys):
    # two iterations cannot reach the R-hat gate
    code, stdout = run(["fit", "--method", "dg-hb", "--dataset", "corn", "--out", tmp_path,
                        "--chains", "2", "--iterations", "6", "--burn-in", "1"], capsys)
    assert code == 3
    assert json.loads(stdout.strip().splitlines()[-1])["error"] == "convergence"


def test_bad_input_files(tmp_path, capsys):
    code, stdout = run(["fit", "--method", "mq", "--units", tmp_path / "missing.csv",
                        "--areas", tmp_path / "missing.csv", "--out", tmp_path], capsys)
    assert code == 2


def test_seed_env_override(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SAE_SEED", "77")
    code, _ = run(["fit", "--method", "dg-hb", "--dataset", "corn", "--out", tmp_path, *FAST_HB], capsys)
    assert code == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 77
    monkeypatch.setenv("SAE_SEED", "abc")
    code, _ = run(["fit", "--method", "dg-hb", "--dataset", "corn", "--out", tmp_path, *FAST_HB], capsys)
    assert code == 2


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"iterations": 1200, "burn-in": 200, "chains": 2, "jobs": 1}))
    code, _ = run(["fit", "--method", "nm-hb", "--dataset", "corn", "--out", tmp_path / "o", "--config", cfg], capsys)
    assert code == 0
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["config"]["iterations"] == 1200
    cfg.write_text(json.dumps({"iters": 5}))
    code, _ = run(["fit", "--method", "nm-hb", "--dataset", "corn", "--out", tmp_path / "p", "--config", cfg], capsys)
    assert code == 2


def test_fit_rerun_is_bit_identical(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(["fit", "--method", "nm-hb", "--dataset", "corn", "--out", tmp_path / d, *FAST_HB], capsys)[0] == 0
    assert (tmp_path / "a" / "estimates.csv").read_bytes() == (tmp_path / "b" / "estimates.csv").read_bytes()


# ---------------------------------------------------------------- report

@pytest.fixture
def two_fits(tmp_path, capsys):
    for ds in ("corn", "corn-reduced"):
        assert run(["fit", "--method", "mq", "--dataset", ds, "--out", tmp_path / ds], capsys)[0] == 0
    return tmp_path / "corn", tmp_path / "corn-reduced"


def test_report_single_is_identity(two_fits, capsys, tmp_path):
    out = tmp_path / "r.csv"
    assert run(["report", "--in", two_fits[0], "--out", out], capsys)[0] == 0
    assert read_csv(out) == read_csv(two_fits[0] / "estimates.csv")


def test_report_merge_side_by_side(two_fits, capsys):
    code, stdout = run(["report", "--in", *two_fits, "--format", "json"], capsys)
    assert code == 0
    rows = json.loads(stdout)
    assert len(rows) == 12
    assert set(rows[0]) == {"area", "mq:corn.estimate", "mq:corn.sd_or_rmse",
                            "mq:corn-reduced.estimate", "mq:corn-reduced.sd_or_rmse"}


def test_report_schema_mismatch(two_fits, capsys):
    man = two_fits[1] / "manifest.json"
    m = json.loads(man.read_text())
    m["schema"] = "nersae.fit/0"
    man.write_text(json.dumps(m))
    code, stdout = run(["report", "--in", *two_fits], capsys)
    assert code == 2 and json.loads(stdout)["error"] == "schema"


# ---------------------------------------------------------------- simulate

SIM = ["simulate", "--scenario", "mixture", "--S", "2", "--methods", "dg,nm", "--jobs", "1",
       "--hb-iterations", "600", "--hb-burn-in", "100"]


def test_simulate_shape_and_determinism(tmp_path, capsys):
    assert run([*SIM, "--out", tmp_path / "a"], capsys)[0] == 0
    assert run([*SIM, "--out", tmp_path / "b"], capsys)[0] == 0
    rows = read_csv(tmp_path / "a" / "metrics.csv")
    assert len(rows) == 2 * 40 * 7
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["failures"] == {"dg": 0, "nm": 0}
    code, stdout = run(["report", "--in", tmp_path / "a", tmp_path / "b", "--format", "json"], capsys)
    assert code == 0 and len(json.loads(stdout)) == 2 * 2 * 40 * 7


def test_simulate_rejects_unknown_method(tmp_path, capsys):
    code, _ = run(["simulate", "--scenario", "none", "--S", "1", "--methods", "dg,foo", "--out", tmp_path], capsys)
    assert code == 2
