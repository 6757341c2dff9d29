import json
from pathlib import Path

import pytest

from osiris import database
from osiris.database import make_engine, make_session_factory
from osiris.gsc_scheduler import ChipConfig
from osiris.main import EXIT_ERROR, EXIT_MISMATCH, EXIT_OK, PERF_COLUMNS, main, run_perf, run_sweep
from osiris.perf_model import KernelModel
from osiris.schemas import load_workload

WORKLOADS = Path(__file__).parent / "workloads"
CHIPS = Path(__file__).parent / "chips"


def workload(name):
    return str(WORKLOADS / f"{name}.json")


def write_workload(tmp_path, **fields):
    doc = {"schema": "osiris.workload/1", "name": "tmp", "parameter_set": "desk-16", "ops": []}
    doc.update(fields)
    path = tmp_path / "w.json"
    path.write_text(json.dumps(doc))
    return str(path)


def run_json(capsys, argv):
    code = main(argv)
    return code, json.loads(capsys.readouterr().out)


@pytest.fixture
def store(tmp_path, monkeypatch):
    engine = make_engine(f"sqlite:///{tmp_path}/runs.db")
    monkeypatch.setattr(database, "engine", engine)
    monkeypatch.setattr(database, "SessionLocal", make_session_factory(engine))
    return engine


def test_six_diagonal_example(capsys):
    code, report = run_json(capsys, ["simulate", "--workload", workload("bsgs_six_diagonals")])
    assert code == EXIT_OK
    row = report["rows"][0]
    assert row["rotations"] == 3
    assert row["diagonal_rotations"] == 5
    assert row["bsgs_slots"] == 5
    assert row["counts_match"] and row["passed"]


def test_empty_workload_passes(tmp_path, capsys):
    code, report = run_json(capsys, ["simulate", "--workload", write_workload(tmp_path)])
    assert code == EXIT_OK
    assert report["rows"] == [] and report["totals"]["passed"]


def test_random_desk_workload(capsys):
    code, report = run_json(capsys, ["simulate", "--workload", workload("random_n64"), "--seed", "3"])
    assert code == EXIT_OK
    assert report["n"] == 64
    assert [r["op"] for r in report["rows"]] == ["matvec", "keyswitch", "hmult", "hadd", "matvec"]
    assert all(r["counts_match"] for r in report["rows"])


def test_count_mismatch_fails_functional_rows(tmp_path, capsys, monkeypatch):
    path = write_workload(tmp_path, parameter_set="desk-64",
                          ops=[{"op": "keyswitch", "level": 3}, {"op": "hadd", "level": 2}])
    rotation = KernelModel.rotation
    monkeypatch.setattr(KernelModel, "rotation", lambda self, l1, alpha: rotation(self, l1, alpha).scaled(2))
    code, report = run_json(capsys, ["simulate", "--workload", path])
    assert code == EXIT_MISMATCH
    keyswitch, hadd = report["rows"]
    assert keyswitch["max_error"] <= keyswitch["tolerance"]
    assert not keyswitch["counts_match"] and not keyswitch["passed"]
    assert hadd["mults"] == hadd["model_mults"] == 0
    assert hadd["counts_match"] and hadd["passed"]
    assert report["totals"]["failures"] == 1


def test_functional_run_refuses_full_ring(tmp_path, capsys):
    path = write_workload(tmp_path, parameter_set="IV", ops=[{"op": "matvec", "d": 4, "level": 3}])
    assert main(["simulate", "--workload", path]) == EXIT_ERROR
    assert capsys.readouterr().out == ""


def test_bad_inputs_exit_with_error(tmp_path):
    assert main(["perf", "--workload", str(tmp_path / "missing.json")]) == EXIT_ERROR
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema": "osiris.workload/9", "name": "x", "parameter_set": "IV"}))
    assert main(["perf", "--workload", str(bad)]) == EXIT_ERROR
    rising = write_workload(tmp_path, ops=[{"op": "hadd", "level": 1}, {"op": "hadd", "level": 2}])
    assert main(["perf", "--workload", rising]) == EXIT_ERROR
    assert main(["perf", "--workload", workload("bsgs_six_diagonals"), "--format", "xlsx"]) == EXIT_ERROR


def test_trace_written_for_streamed_units(tmp_path, capsys):
    path = write_workload(tmp_path, parameter_set="desk-64",
                          ops=[{"op": "matvec", "d": 4, "level": 2, "n1": 2, "n2": 2, "width": 8}])
    trace = tmp_path / "trace.csv"
    assert main(["simulate", "--workload", path, "--trace", str(trace)]) == EXIT_OK
    lines = trace.read_text().splitlines()
    assert lines[0] == "cycle,stage,lane,op,unit"
    assert len(lines) > 1


def test_perf_report_is_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["perf", "--workload", workload("matvec_set4_l12"), "--out", str(a)]) == EXIT_OK
    assert main(["perf", "--workload", workload("matvec_set4_l12"), "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    report = json.loads(a.read_text())
    assert report["rows"][0]["n1"] == 16 and report["rows"][0]["n2"] == 4
    assert len(report["roofline"]) == 3


def test_perf_csv_and_side_files(tmp_path, capsys):
    timeline, roof = tmp_path / "t.json", tmp_path / "r.csv"
    argv = ["perf", "--workload", workload("matvec_set4_l12"), "--format", "csv",
            "--chip", str(CHIPS / "osiris.json"), "--timeline", str(timeline), "--roofline", str(roof)]
    assert main(argv) == EXIT_OK
    header = capsys.readouterr().out.splitlines()[0]
    assert header.split(",") == list(PERF_COLUMNS)
    phases = json.loads(timeline.read_text())[0]["phases"]
    assert phases[0]["phase"] == "prologue" and phases[-1]["phase"] == "rescale"
    assert len(roof.read_text().splitlines()) == 1 + 3


def test_single_sweep_point_equals_perf():
    spec = load_workload(Path(workload("matvec_set4_l12")))
    perf = run_perf(spec)
    sweep = run_sweep(spec, "bandwidth", points=[1e12], workers=1)
    assert len(sweep["rows"]) == 1
    assert sweep["rows"][0]["cycles"] == perf["totals"]["cycles"]
    assert sweep["rows"][0]["mults"] == perf["totals"]["mults"]


def test_bsgs_ratio_sweep_keeps_point_order():
    spec = load_workload(Path(workload("matvec_set4_l12")))
    report = run_sweep(spec, "bsgs_ratio", workers=4)
    assert [r["value"] for r in report["rows"]] == [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0]
    by_n2 = {r["value"]: r for r in report["rows"]}
    assert by_n2[1.0]["stall_fraction"] > by_n2[4.0]["stall_fraction"]
    assert by_n2[64.0]["n2"] <= 8


def test_bootstrap_amortized_and_scaling():
    spec = load_workload(Path(workload("bootstrap_set3")))
    base = run_perf(spec)
    assert [r["n2"] for r in base["rows"]] == [4, 4, 4, 4]
    assert base["amortized"]["t_mxv_as_s"] > 0
    assert base["amortized"]["t_mult_as_s"] is None
    doubled = run_perf(spec, ChipConfig().scaled(2))
    assert doubled["totals"]["cycles"] / base["totals"]["cycles"] == pytest.approx(0.5, rel=0.15)


def test_storage_command(capsys):
    code, report = run_json(capsys, ["storage", "--parameter-set", "IV", "--level", "12"])
    assert code == EXIT_OK
    items = {r["item"]: r["value"] for r in report["rows"]}
    assert items["fitting_n2"] == 8
    assert items["working_sram"] < 210


def test_version(capsys):
    assert main(["version"]) == EXIT_OK
    assert capsys.readouterr().out.startswith("osiris ")


def test_saved_runs_show_in_history(store, capsys):
    assert main(["perf", "--workload", workload("matvec_set4_l12"), "--save"]) == EXIT_OK
    assert main(["sweep", "--workload", workload("matvec_set4_l12"), "--vary", "bandwidth",
                 "--points", "5e11", "1e12", "--workers", "1", "--save"]) == EXIT_OK
    capsys.readouterr()
    code, listing = run_json(capsys, ["history"])
    assert code == EXIT_OK
    assert [r["command"] for r in listing["rows"]] == ["sweep", "perf"]
    sweep_id = listing["rows"][0]["id"]
    code, detail = run_json(capsys, ["history", "--run-id", str(sweep_id)])
    assert detail["run"]["points"] == 2
    assert [p["value"] for p in detail["rows"]] == [5e11, 1e12]
    assert main(["history", "--run-id", "999"]) == EXIT_ERROR


def test_mismatch_exit_code_is_distinct():
    assert EXIT_MISMATCH not in (EXIT_OK, EXIT_ERROR)
