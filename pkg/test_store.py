import json

import pytest

from osiris import crud, schemas
from osiris.database import init_db, make_engine, make_session_factory
from osiris.seeds import PARAMETER_SETS, seed_presets


@pytest.fixture
def db(tmp_path):
    engine = make_engine(f"sqlite:///{tmp_path}/store.db")
    init_db(engine)
    session = make_session_factory(engine)()
    try:
        yield session
    finally:
        session.close()


def perf_report(cycles):
    return {"command": "perf", "totals": {"cycles": cycles, "stall_cycles": 10, "mults": 500,
                                          "dram_bytes": 64, "utilization": 0.25, "intensity": 7.8}}


def test_runs_roundtrip(db):
    first = crud.create_run(db, "perf", perf_report(100), workload="w", parameter_set="IV", chip_digest="ab")
    crud.create_run(db, "storage", {"command": "storage", "rows": []})
    crud.create_run(db, "perf", perf_report(200), workload="w")

    assert first.cycles == 100 and first.utilization == 0.25
    assert [r.cycles for r in crud.list_runs(db, command="perf")] == [200, 100]
    assert len(crud.list_runs(db)) == 3
    assert len(crud.list_runs(db, limit=1)) == 1

    row = schemas.to_dict_run(crud.get_run(db, first.id), with_report=True)
    assert row["report"]["totals"]["cycles"] == 100
    assert row["parameter_set"] == "IV" and row["points"] == 0
    assert crud.get_run(db, 999) is None


def test_sweep_points_follow_their_run(db):
    run = crud.create_run(db, "sweep", {"command": "sweep"})
    rows = [
        {"varied": "bandwidth", "value": v, "cycles": c, "stall_fraction": 0.1, "utilization": 0.5,
         "mults": 1000, "intensity": 2.0}
        for v, c in ((5e11, 900), (1e12, 600))
    ]
    crud.add_sweep_points(db, run.id, rows)
    points = crud.list_sweep_points(db, run.id)
    assert [p.cycles for p in points] == [900, 600]
    assert schemas.to_dict_sweep_point(points[0])["value"] == 5e11
    db.delete(run)
    db.commit()
    assert crud.list_sweep_points(db, run.id) == []


def test_seeded_parameter_sets(db):
    assert seed_presets(db) == len(PARAMETER_SETS)
    assert seed_presets(db) == 0
    stored = schemas.to_dict_parameter_set(crud.get_parameter_set(db, "III"))
    assert stored["q0_bits"] == [24, 24]
    assert stored["boot_alpha"] == 14
    assert [r.name for r in crud.list_parameter_sets(db)] == ["I", "II", "III", "IV"]
    assert schemas.to_dict_parameter_set(crud.get_parameter_set(db, "V")) is None


def test_unusable_url_falls_back_to_memory():
    engine = make_engine("not a database url")
    assert engine.url.drivername == "sqlite"
    init_db(engine)
    session = make_session_factory(engine)()
    crud.create_run(session, "perf", perf_report(1))
    assert json.loads(crud.list_runs(session)[0].report_json)["command"] == "perf"
    session.close()
