import csv
import io
import json
import math

import pytest

from rootoram import simharness
from rootoram.cli import main, verify_report
from rootoram.core import Params


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def pairs(text):
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["name", "value"]
    return dict(rows[1:])


def test_accountant_uniform_remap_gives_zero_epsilon(capsys):
    code, out, _ = run(capsys, "accountant", "--N", "1024", "--p", str(1 - 1 / 1024))
    assert code == 0
    assert float(pairs(out)["epsilon"]) == 0.0


def test_accountant_bandwidth(capsys):
    code, out, _ = run(capsys, "accountant", "--Z", "2", "--k", "1", "--lambda", "4")
    assert code == 0 and float(pairs(out)["bandwidth"]) == 10.0


def test_accountant_full_row(capsys):
    code, out, _ = run(capsys, "accountant", "--N", "16", "--p", "1/2", "--Z", "2", "--k", "3",
                       "--C", "1", "--compose", "3")
    got = pairs(out)
    assert float(got["epsilon"]) == pytest.approx(2 * math.log(15))
    assert float(got["delta"]) == pytest.approx(0.5 ** (2 * 4 + 1 + 1))
    assert float(got["composed_epsilon"]) == pytest.approx(6 * math.log(15))


def test_solve(capsys):
    code, out, _ = run(capsys, "solve", "--N", "1024", "--epsilon", "2", "--budget", "40",
                       "--Z", "2", "--lambda", "4")
    got = pairs(out)
    assert code == 0 and int(got["k"]) == 7
    p = float(got["p"])
    assert 2 * math.log(1023 * (1 - p) / p) <= 2 + 1e-9


def test_verify_reports_below_bound(capsys):
    code, out, err = run(capsys, "verify", "--N", "4", "--p", "1/2")
    assert code == 0
    assert "max ratio 9/2 < bound 9, PASS" in err
    assert pairs(out)["max_ratio"] == "9/2"


def test_verify_json_and_report():
    rep = verify_report(4, "1/2", 4, 2)
    assert rep["attains_bound"] and rep["pattern_witness"] is not None


def test_usage_errors_exit_1(capsys):
    assert run(capsys, "accountant", "--N", "nope")[0] == 1
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "accountant")[0] == 1
    assert run(capsys, "accountant", "--N", "4", "--p", "0.9")[0] == 1


def test_io_error_exits_2(capsys, tmp_path):
    code, _, err = run(capsys, "metrics", "--dist", str(tmp_path / "missing.csv"))
    assert code == 2 and "I/O error" in err


def test_simulate_matches_library(capsys):
    code, out, _ = run(capsys, "simulate", "--L", "6", "--k", "3", "--Z", "2", "--p", "0.5",
                       "--M", "300", "--seed", "5")
    assert code == 0
    (row,) = list(csv.DictReader(io.StringIO(out)))
    params = Params(L=6, k=3, p=0.5, Z=2)
    st = simharness.run_sim(params, 300, 5)
    assert int(row["max_stash"]) == st.max_stash
    assert row["seed"] == "5"


def test_seed_from_environment(capsys, monkeypatch):
    monkeypatch.setenv("ROOTORAM_SEED", "9")
    _, out, _ = run(capsys, "simulate", "--L", "5", "--M", "64")
    monkeypatch.delenv("ROOTORAM_SEED")
    _, explicit, _ = run(capsys, "--seed", "9", "simulate", "--L", "5", "--M", "64")
    assert out == explicit
    assert list(csv.DictReader(io.StringIO(out)))[0]["seed"] == "9"


def test_global_flags_after_subcommand(capsys, tmp_path):
    target = tmp_path / "o.json"
    code, out, _ = run(capsys, "accountant", "--k", "2", "--Z", "1", "--format", "json",
                       "--out", str(target))
    assert code == 0 and out == ""
    assert json.loads(target.read_text())["bandwidth"] == 6.0


def test_metrics_csv(capsys, tmp_path):
    d = tmp_path / "d.csv"
    d.write_text("outcome,mass\na,0.5\nb,0.5\n")
    q = tmp_path / "q.csv"
    q.write_text("a,1\n")
    ch = tmp_path / "c.csv"
    ch.write_text("x,u,1\ny,u,1\nz,v,1\n")
    code, out, _ = run(capsys, "metrics", "--dist", str(d), "--against", str(q),
                       "--channel", str(ch), "--bits")
    got = pairs(out)
    assert code == 0
    assert float(got["shannon_entropy"]) == pytest.approx(1.0)
    assert float(got["kl_to_uniform"]) == pytest.approx(0.0)
    assert got["kl_divergence"] == "inf"
    assert int(got["k_anonymity"]) == 1


def test_snapshot_round_trip(capsys, tmp_path):
    path = str(tmp_path / "store.bin")
    code, out, _ = run(capsys, "snapshot", "save", path, "--L", "5", "--k", "3", "--Z", "2",
                       "--p", "0.5", "--M", "50", "--cipher", "null")
    assert code == 0
    state = pairs(out)["state"]
    code, out, _ = run(capsys, "snapshot", "load", path, "--state", state)
    got = pairs(out)
    assert code == 0 and got["audit"] == "ok"
    assert (got["L"], got["k"], got["Z"]) == ("5", "3", "2")


def test_snapshot_corrupt_file(capsys, tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a snapshot at all")
    assert run(capsys, "snapshot", "load", str(bad))[0] in (1, 2)


def test_mgrowth_json(capsys):
    code, out, _ = run(capsys, "--format", "json", "mgrowth", "--L", "5", "--k", "2",
                       "--M", "32,64")
    rows = json.loads(out)
    assert code == 0 and [r["M"] for r in rows] == [32, 64]
    assert rows[0]["max_stash"] <= rows[1]["max_stash"]


def test_sweep_from_file(capsys, tmp_path):
    grid = tmp_path / "g.json"
    grid.write_text(json.dumps({"L": [4], "k": [2, 4], "Z": [2], "p_i": [1], "M": [50]}))
    code, out, _ = run(capsys, "sweep", "--grid", str(grid))
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and [r["k"] for r in rows] == ["2", "4"]
    assert list(rows[0]) == simharness.SWEEP_COLUMNS


def test_bench_unthrottled(capsys):
    code, out, _ = run(capsys, "bench", "--L", "5", "--k", "1,5", "--B", "64", "--rate-bps",
                       "0", "--accesses", "5", "--cipher", "null")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and [r["k"] for r in rows] == ["1", "5"]
