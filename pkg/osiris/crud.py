import json
from typing import Any, Dict, Iterable, List, Optional

from sqlalchemy import select
from sqlalchemy.orm import Session

from . import models


def create_run(db: Session, command: str, report: Dict[str, Any], workload: Optional[str] = None,
               parameter_set: Optional[str] = None, chip_digest: Optional[str] = None) -> models.Run:
    totals = report.get("totals", {})
    run = models.Run(
        command=command,
        workload=workload,
        parameter_set=parameter_set,
        chip_digest=chip_digest,
        cycles=totals.get("cycles"),
        stall_cycles=totals.get("stall_cycles"),
        mults=totals.get("mults"),
        dram_bytes=totals.get("dram_bytes"),
        utilization=totals.get("utilization"),
        intensity=totals.get("intensity"),
        report_json=json.dumps(report, sort_keys=True),
    )
    db.add(run)
    db.commit()
    db.refresh(run)
    return run


def add_sweep_points(db: Session, run_id: int, rows: Iterable[Dict[str, Any]]) -> List[models.SweepPoint]:
    points = [
        models.SweepPoint(
            run_id=run_id,
            varied=row["varied"],
            value=float(row["value"]),
            cycles=int(row["cycles"]),
            stall_fraction=float(row["stall_fraction"]),
            utilization=float(row["utilization"]),
            mults=int(row["mults"]),
            intensity=float(row["intensity"]),
        )
        for row in rows
    ]
    db.add_all(points)
    db.commit()
    return points


def get_run(db: Session, run_id: int) -> Optional[models.Run]:
    return db.get(models.Run, run_id)


def list_runs(db: Session, command: Optional[str] = None, limit: int = 20) -> List[models.Run]:
    stmt = select(models.Run)
    if command:
        stmt = stmt.where(models.Run.command == command)
    stmt = stmt.order_by(models.Run.id.desc()).limit(limit)
    return list(db.scalars(stmt))


def list_sweep_points(db: Session, run_id: int) -> List[models.SweepPoint]:
    return list(db.scalars(
        select(models.SweepPoint).where(models.SweepPoint.run_id == run_id).order_by(models.SweepPoint.id)
    ))


def get_parameter_set(db: Session, name: str) -> Optional[models.ParameterSetRow]:
    return db.scalar(select(models.ParameterSetRow).where(models.ParameterSetRow.name == name))


def list_parameter_sets(db: Session) -> List[models.ParameterSetRow]:
    return list(db.scalars(select(models.ParameterSetRow).order_by(models.ParameterSetRow.name)))
