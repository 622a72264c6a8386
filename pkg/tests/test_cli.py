import csv
import hashlib
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from intermed import __version__
from intermed.cli import main, run

SCHEMA = {"outcome": "Y", "exposure": "A", "mediators": ["M1", "M2"], "covariates": ["L"],
          "moderators": ["L"]}


def write_data(path, n=10, seed=0, separated=False):
    g = np.random.default_rng(seed)
    L = g.normal(size=n)
    A = (L > 0).astype(int) if separated else np.array([0, 1] * (n // 2))
    M1 = 0.5 * A + L + g.normal(size=n)
    M2 = 0.3 * A + 0.4 * M1 + g.normal(size=n)
    Y = M1 + M2 + L + g.normal(size=n)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Y", "A", "M1", "M2", "L"])
        for row in zip(Y, A, M1, M2, L):
            w.writerow([repr(float(v)) for v in row])


def config(tmp_path, command="analyze", **extra):
    cfg = {"command": command, "seed": 7, "output": "out", "threads": 1,
           "data": {"path": "d.csv", "schema": SCHEMA},
           "estimator": {"method": "mc", "draws": 10, "force": True}}
    cfg.update(extra)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return p


def call(path, *flags):
    err = io.StringIO()
    return run(path, stderr=err, **dict(flags)), err.getvalue()


def test_analyze_ten_rows(tmp_path):
    write_data(tmp_path / "d.csv")
    p = config(tmp_path)
    rc, err = call(p)
    assert rc == 0, err
    out = json.loads((tmp_path / "out" / "estimates.json").read_text())
    params = out["results"]["mc"]["effect_parameters"]
    assert list(params) == ["gamma0", "gamma0c", "gamma1", "gamma1c",
                            "theta1", "theta1c", "theta2", "theta2c"]
    digest = hashlib.sha256(p.read_bytes()).hexdigest()
    assert out["provenance"] == {"config_sha256": digest, "version": __version__}
    lines = (tmp_path / "out" / "estimates.csv").read_text().splitlines()
    assert lines[0] == f"# config_sha256={digest} version={__version__}"
    assert lines[1] == "method,quantity,value"


def test_missing_schema_field_names_it(tmp_path):
    write_data(tmp_path / "d.csv")
    schema = {k: v for k, v in SCHEMA.items() if k != "outcome"}
    p = config(tmp_path, data={"path": "d.csv", "schema": schema})
    rc, err = call(p)
    assert rc == 2
    e = json.loads(err)["error"]
    assert e["field"] == "data.schema.outcome"
    assert "data.schema.outcome" in e["message"]


@pytest.mark.parametrize("mutate,field", [
    (lambda c: c.pop("seed"), "seed"),
    (lambda c: c.update(seed="7"), "seed"),
    (lambda c: c.update(command="plot"), "command"),
    (lambda c: c["estimator"].update(method="gformula"), "estimator.method"),
    (lambda c: c.pop("estimator"), "estimator"),
])
def test_config_errors_exit_2(tmp_path, mutate, field):
    write_data(tmp_path / "d.csv")
    p = config(tmp_path)
    cfg = json.loads(p.read_text())
    mutate(cfg)
    p.write_text(json.dumps(cfg))
    rc, err = call(p)
    assert rc == 2
    assert json.loads(err)["error"]["field"] == field


def test_unreadable_inputs_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert call(bad)[0] == 2
    assert call(tmp_path / "absent.json")[0] == 2
    p = config(tmp_path)
    rc, err = call(p)
    assert rc == 2 and json.loads(err)["error"]["type"] == "DataError"


def test_estimation_failure_exits_1(tmp_path):
    write_data(tmp_path / "d.csv", n=40, separated=True)
    p = config(tmp_path, estimator={"method": "iw", "draws": 10})
    rc, err = call(p)
    assert rc == 1
    assert json.loads(err)["error"]["type"] == "SeparationError"


def test_bootstrap_and_sensitivity(tmp_path):
    write_data(tmp_path / "d.csv", n=60)
    p = config(tmp_path, "bootstrap", bootstrap={"B": 5})
    assert call(p)[0] == 0
    rep = json.loads((tmp_path / "out" / "bootstrap.json").read_text())["results"]["mc"]
    assert rep["B"] == 5
    q = rep["quantities"]["IE1"]
    assert q["lower"] <= q["upper"]
    p = config(tmp_path, "sensitivity")
    assert call(p)[0] == 0
    rows = list(csv.DictReader((tmp_path / "out" / "sensitivity.csv").read_text()
                               .splitlines()[1:]))
    assert {r["effect"] for r in rows} >= {"M1", "M2", "jointIE", "DE"}


def test_simulate_writes_table_row(tmp_path):
    p = config(tmp_path, "simulate",
               simulate={"study": 1, "n": 50, "params": [0.8, 0.0, 0.0], "replicates": 2,
                         "estimators": ["mc"], "truth_n": 5000})
    rc, err = call(p)
    assert rc == 0, err
    lines = (tmp_path / "out" / "study.csv").read_text().splitlines()
    assert lines[0].startswith("# config_sha256=")
    rows = list(csv.DictReader(lines[1:]))
    ie1 = [r for r in rows if r["effect"] == "IE1"][0]
    assert ie1["estimator"] == "mc" and ie1["b1"] == "0.8" and ie1["n"] == "50"
    assert json.loads((tmp_path / "out" / "study.json").read_text())["custom"] is False


def test_simulate_bad_study(tmp_path):
    p = config(tmp_path, "simulate", simulate={"study": 9, "n": 100, "params": [0, 0, 0]})
    rc, err = call(p)
    assert rc == 2 and json.loads(err)["error"]["field"] == "simulate.study"


def test_diagnose_weights(tmp_path):
    write_data(tmp_path / "d.csv", n=60)
    p = config(tmp_path, "diagnose-weights", diagnose={"export_duplicated": True, "bins": 5})
    rc, err = call(p)
    assert rc == 0, err
    out = tmp_path / "out"
    summ = list(csv.DictReader(out.joinpath("weights_summary.csv").read_text().splitlines()[1:]))
    assert [r["position"] for r in summ] == ["1", "2", "3", "4", "5"]
    hist = out.joinpath("weights_histogram.csv").read_text().splitlines()
    assert len(hist) == 2 + 5 * 5
    assert out.joinpath("duplicated.csv").exists()


def test_reruns_are_byte_identical(tmp_path):
    write_data(tmp_path / "d.csv", n=60)
    p = config(tmp_path, "bootstrap", bootstrap={"B": 4},
               estimator={"method": ["mc", "iw"], "draws": 10, "force": True})
    assert call(p)[0] == 0
    first = {f.name: f.read_bytes() for f in (tmp_path / "out").iterdir()}
    assert call(p, ("threads", 2))[0] == 0
    second = {f.name: f.read_bytes() for f in (tmp_path / "out").iterdir()}
    assert first == second


def test_argparse_entry_and_module(tmp_path):
    write_data(tmp_path / "d.csv")
    p = config(tmp_path)
    assert main(["run", str(p), "--threads", "1"]) == 0
    r = subprocess.run([sys.executable, "-m", "intermed", "run", str(p)], capture_output=True)
    assert r.returncode == 0, r.stderr
    with pytest.raises(SystemExit):
        main([])
