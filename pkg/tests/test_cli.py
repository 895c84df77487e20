import csv
import io
import json

import pytest

from popcomp.cli import main
from popcomp.steady_state import predict_r


def _write(tmp_path, name, obj):
    path = tmp_path / name
    path.write_text(json.dumps(obj), encoding="utf-8")
    return str(path)


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_predict_r0_table(capsys):
    assert main(["predict", "--r0", "0.01", "--levels", "3"]) == 0
    rows = _rows(capsys.readouterr().out)
    assert [int(r["level"]) for r in rows] == [0, 1, 2, 3]
    assert float(rows[3]["r_tilde"]) == pytest.approx(0.0772553056, abs=1e-9)
    assert rows[0]["x_tilde"] == ""


def test_predict_full_columns(capsys):
    args = ["predict", "--x0", "0.02", "--y0", "0.01", "--levels", "4", "--zeta", "0.001", "--p", "0.25"]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "level,r_tilde,x_tilde,y_tilde,r_fp,r_fn,r_coin"
    rows = _rows(out)
    assert float(rows[2]["x_tilde"]) == pytest.approx(0.03707146, abs=1e-9)
    assert float(rows[4]["r_tilde"]) == pytest.approx(predict_r(0.03, 4)[4], rel=1e-12)


@pytest.mark.parametrize("args", [
    ["predict", "--r0", "2"],
    ["predict"],
    ["predict", "--r0", "0.1", "--x0", "0.1", "--y0", "0.0"],
    ["predict", "--r0", "0.1", "--zeta", "1.5"],
    ["predict", "--r0", "0.1", "--p", "0"],
    ["frobnicate"],
    ["reset", "--n", "100", "--variant", "gossip"],
])
def test_bad_arguments_exit_2(args):
    assert main(args) == 2


def _figure_config(**kw):
    cfg = {"n": 10_000, "x0": 60, "y0": 30, "variant": "comparison", "s": "auto",
           "parallel_time": 160, "switches": [{"at": 80, "x0": 30, "y0": 60}], "seed": 7}
    cfg.update(kw)
    return cfg


def test_run_zero_time_single_snapshot(tmp_path):
    conf = _write(tmp_path, "c.json", _figure_config(parallel_time=0, switches=[]))
    out = tmp_path / "t.csv"
    assert main(["run", "--config", conf, "--out", str(out)]) == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2
    side = json.loads((tmp_path / "t.csv.json").read_text(encoding="utf-8"))
    assert side["config"]["s"] == 22 and side["config"]["seed"] == 7
    assert side["final"]["counts"]["neutral"] == 10_000 - 90


def test_run_is_byte_identical(tmp_path):
    conf = _write(tmp_path, "c.json", _figure_config(parallel_time=20, switches=[]))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["run", "--config", conf, "--out", str(a)]) == 0
    assert main(["run", "--config", conf, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.csv.json").read_bytes() == (tmp_path / "b.csv.json").read_bytes()
    c = tmp_path / "c.csv"
    assert main(["run", "--config", conf, "--seed", "8", "--out", str(c)]) == 0
    assert a.read_bytes() != c.read_bytes()


def test_run_figure_outputs_cross_after_switch(tmp_path):
    conf = _write(tmp_path, "c.json", _figure_config())
    out = tmp_path / "fig.csv"
    assert main(["run", "--config", conf, "--out", str(out)]) == 0
    rows = _rows(out.read_text(encoding="utf-8"))
    before = [r for r in rows if 60 <= float(r["ptime"]) <= 80]
    after = [r for r in rows if float(r["ptime"]) >= 120]
    assert all(int(r["out_x"]) > int(r["out_y"]) for r in before)
    assert all(int(r["out_y"]) > int(r["out_x"]) for r in after)
    assert int(rows[-1]["y0"]) == 60 and int(rows[-1]["x0"]) == 30


@pytest.mark.parametrize("patch", [{"colour": "red"}, {"x0": 6000, "y0": 5000}, {"variant": "gossip"},
                                   {"s": 0}, {"rest_policy": "chaos"}])
def test_run_config_errors_exit_2(tmp_path, patch):
    conf = _write(tmp_path, "c.json", _figure_config(**patch))
    assert main(["run", "--config", conf, "--out", str(tmp_path / "t.csv")]) == 2


def test_run_unreadable_config_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2


def test_sweep_summary_and_csv(tmp_path):
    conf = _write(tmp_path, "c.json", {"n": 2000, "x0": 40, "y0": 20, "parallel_time": 30,
                                       "replications": 2, "metrics": ["ratio_end", "ratio_ok"]})
    out, per = tmp_path / "s.json", tmp_path / "s.csv"
    assert main(["sweep", "--config", conf, "--out", str(out), "--csv", str(per)]) == 0
    doc = json.loads(out.read_text(encoding="utf-8"))
    assert doc["config"]["replications"] == 2
    assert doc["config"]["s"] == 19 and doc["config"]["seed"] == 0
    assert len(doc["per_replication"]) == 2
    assert per.read_text(encoding="utf-8").splitlines()[0] == "rep,metric,value"


def test_sweep_swapped_colors_mirror_success(tmp_path):
    base = {"n": 5000, "parallel_time": 60, "replications": 4, "metrics": ["ratio_ok"], "seed": 3}
    docs = []
    for x0, y0 in ((100, 50), (50, 100)):
        conf = _write(tmp_path, f"c{x0}.json", {**base, "x0": x0, "y0": y0})
        out = tmp_path / f"s{x0}.json"
        assert main(["sweep", "--config", conf, "--out", str(out)]) == 0
        docs.append(json.loads(out.read_text(encoding="utf-8")))
    assert docs[0]["success"]["ratio_ok"] == docs[1]["success"]["ratio_ok"] == 1.0


def test_couple_lemma_zero_violations(tmp_path):
    conf = _write(tmp_path, "c.json", {"n": 500, "x0": 5, "y0": 3, "variant": "detection",
                                       "rest_policy": "arbitrary", "steps": 20_000})
    out = tmp_path / "r.json"
    assert main(["couple", "--config", conf, "--properties", "P1,P2", "--out", str(out)]) == 0
    doc = json.loads(out.read_text(encoding="utf-8"))
    assert doc["total_violations"] == 0 and doc["steps"] == 20_000


def test_couple_all_neutral_and_corrupted(tmp_path):
    n = 6
    neutral = ["N"] * n
    conf = _write(tmp_path, "c.json", {"n": n, "x0": 0, "y0": 0, "s": 4, "steps": 100,
                                       "populations": [neutral, neutral, neutral]})
    out = tmp_path / "r.json"
    assert main(["couple", "--config", conf, "--properties", "P2", "--out", str(out)]) == 0
    assert json.loads(out.read_text(encoding="utf-8"))["total_violations"] == 0
    bad = _write(tmp_path, "bad.json", {"n": n, "x0": 0, "y0": 0, "s": 4, "steps": 100,
                                        "populations": [["X1"] * n, neutral, neutral]})
    assert main(["couple", "--config", bad, "--properties", "P2"]) == 3
    assert main(["couple", "--config", conf, "--properties", "P4"]) == 2


def test_reset_all_neutral_zero(tmp_path):
    out = tmp_path / "r.json"
    assert main(["reset", "--n", "200", "--init", "all_neutral", "--seeds", "3", "--out", str(out)]) == 0
    doc = json.loads(out.read_text(encoding="utf-8"))
    assert doc["results"][0]["first_hit_ptimes"] == [0.0, 0.0, 0.0]


def test_reset_p_sweep(tmp_path):
    out = tmp_path / "r.json"
    args = ["reset", "--n", "1000", "--variant", "coin", "--p", "1,0.25", "--seeds", "5",
            "--horizon", "1000", "--out", str(out)]
    assert main(args) == 0
    res = json.loads(out.read_text(encoding="utf-8"))["results"]
    assert all(r["all_reached"] for r in res)
    assert res[0]["median"] < res[1]["median"]
