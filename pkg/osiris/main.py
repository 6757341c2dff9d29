"""Command-line harness: functional simulation at desk scale, analytical runs at full scale."""
import argparse
import dataclasses
import hashlib
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sqlalchemy.exc import SQLAlchemyError

from . import __version__, counters, crud, exports, schemas
from .ckks_ops import Ciphertext, KeySet, decrypt_message, encrypt, h_add, h_mult, h_rot, keygen
from .config import get_settings
from .errors import OsirisError, ScheduleError, WorkloadError
from .gsc_scheduler import (
    ChipConfig,
    ScheduleTimeline,
    fitting_n2,
    run_scheduled_matvec,
    schedule_hadd,
    schedule_hmult,
    schedule_keyswitch,
    schedule_matvec,
)
from .matvec_algos import (
    BsgsPlan,
    DiagonalizedMatrix,
    HoistingMode,
    choose_bsgs_split,
    extract_diagonals,
    matvec_bsgs,
    matvec_reference,
    read_diagonal_json,
    read_matrix_csv,
    rotate_cleartext,
    tile,
)
from .perf_model import (
    KernelModel,
    OpCounts,
    ParameterSet,
    amortized_metrics,
    kernel_breakdown,
    roofline,
    storage_report,
)
from .rns_core import ModulusChain
from .schemas import BootMarkerOp, HAddOp, HMultOp, KeySwitchOp, MatvecOp, WorkloadSpec
from .seeds import DEFAULT_CHIP, DESK_SETS, desk_chain, get_parameter_set

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_MISMATCH = 1
EXIT_ERROR = 2

DECODE_TOLERANCE = 2.0 ** -20
SWEEP_KEYS = ("bsgs_ratio", "bandwidth", "p")
DEFAULT_BANDWIDTHS = (0.5e12, 1e12, 2e12, 4e12)
TRACE_LANES = 8

PERF_COLUMNS = (
    "index", "op", "level", "mode", "d", "n1", "n2", "repeat", "cycles", "seconds", "stall_cycles",
    "stall_fraction", "mults", "adds", "dram_bytes", "intensity", "utilization", "rotations",
    "diagonal_rotations", "bsgs_slots", "peak_sram_mib",
)
SIMULATE_COLUMNS = (
    "index", "op", "level", "mode", "d", "n1", "n2", "width", "rotations", "diagonal_rotations",
    "bsgs_slots", "mults", "model_mults", "counts_match", "max_error", "tolerance", "checksum", "passed",
)
SWEEP_COLUMNS = (
    "varied", "value", "n1", "n2", "ratio", "cycles", "seconds", "stall_cycles", "stall_fraction",
    "utilization", "mults", "intensity", "dram_bytes",
)
STORAGE_COLUMNS = ("item", "value", "unit")


# -- workload helpers ---------------------------------------------------------------------

def matvec_diagonals(op: MatvecOp, seed: int, index: int) -> Tuple[int, ...]:
    """Nonzero generalized diagonals of a synthetic matvec: the first d, thinned by `density`."""
    if op.density >= 1.0:
        return tuple(range(op.d))
    rng = np.random.default_rng([seed, index])
    keep = [k for k in range(op.d) if rng.random() < op.density]
    return tuple(keep or [0])


def load_matrix(op: MatvecOp, base: Optional[Path]) -> Optional[DiagonalizedMatrix]:
    if not op.matrix:
        return None
    path = Path(op.matrix)
    if not path.is_absolute() and base is not None:
        path = base / path
    if not path.exists():
        raise WorkloadError(f"matrix file {path} not found")
    if path.suffix.lower() == ".json":
        return read_diagonal_json(path)
    return extract_diagonals(read_matrix_csv(path))


def op_diagonals(op: MatvecOp, seed: int, index: int, base: Optional[Path]) -> Tuple[Tuple[int, ...], Optional[DiagonalizedMatrix]]:
    matrix = load_matrix(op, base)
    if matrix is not None:
        if not matrix.diagonals:
            raise WorkloadError(f"op {index}: matrix {op.matrix} has no nonzero diagonal")
        return tuple(matrix.indices()), matrix
    return matvec_diagonals(op, seed, index), None


def plan_for(op: MatvecOp, diagonals: Sequence[int], n2_cap: Optional[int], n2: Optional[int] = None) -> BsgsPlan:
    """BSGS split of a matvec: explicit n1/n2 from the op, else the cheapest split under `n2_cap`."""
    span = max(diagonals) + 1
    if n2 is not None:
        return BsgsPlan(-(-span // n2), n2, tuple(diagonals))
    if op.n1 and op.n2:
        n1, n2 = op.n1, op.n2
    elif op.n1:
        n1, n2 = op.n1, -(-span // op.n1)
    elif op.n2:
        n1, n2 = -(-span // op.n2), op.n2
    else:
        n1, n2 = choose_bsgs_split(span, n2_cap)
    return BsgsPlan(n1, n2, tuple(diagonals))


def diagonal_rotations(diagonals: Sequence[int]) -> int:
    return sum(1 for k in diagonals if k)


def default_chip(params: ParameterSet) -> ChipConfig:
    chip = DEFAULT_CHIP
    if params.n >= chip.p and params.n % chip.p == 0 and params.n <= chip.mdc.n_max:
        return chip
    return ChipConfig.desk(params.n, max(2, min(TRACE_LANES, params.n // 2)))


def chip_digest(chip: ChipConfig) -> str:
    return hashlib.sha256(json.dumps(chip.to_dict(), sort_keys=True).encode()).hexdigest()


def _roofline_counts(counts: OpCounts, chip: ChipConfig) -> OpCounts:
    """DRAM traffic that competes with key loads; streamed diagonals ride a separate port otherwise."""
    if chip.shared_bandwidth:
        return counts
    kept = dataclasses.replace(counts, dram_bytes=counts.dram_bytes.copy())
    kept.dram_bytes.pop("diagonals", None)
    return kept


def _ratio(num: float, den: float) -> Optional[float]:
    return num / den if den else None


# -- perf -----------------------------------------------------------------------------------

@dataclasses.dataclass
class OpRun:
    index: int
    op: Any
    timeline: ScheduleTimeline
    repeat: int
    plan: Optional[BsgsPlan] = None
    mode: Optional[HoistingMode] = None

    @property
    def cycles(self) -> int:
        return self.timeline.total_cycles * self.repeat

    @property
    def counts(self) -> OpCounts:
        return self.timeline.counts.scaled(self.repeat)


def schedule_op(op: Any, index: int, params: ParameterSet, chip: ChipConfig, mode: Optional[str], seed: int,
                base: Optional[Path], n2: Optional[int] = None, shrink: bool = False) -> Optional[OpRun]:
    if isinstance(op, BootMarkerOp):
        return None
    params.check_level(op.level)
    if isinstance(op, KeySwitchOp):
        return OpRun(index, op, schedule_keyswitch(op.level, chip, params), op.repeat)
    if isinstance(op, HMultOp):
        return OpRun(index, op, schedule_hmult(op.level, chip, params, op.fuse_moddown), op.repeat)
    if isinstance(op, HAddOp):
        return OpRun(index, op, schedule_hadd(op.level, chip, params), op.repeat)

    hoisting = HoistingMode(mode or op.mode)
    diagonals, _ = op_diagonals(op, seed, index, base)
    cap = min(chip.n2_cap, max(1, fitting_n2(params, op.level, chip, hoisting)))
    plan = plan_for(op, diagonals, cap, n2)
    try:
        timeline = schedule_matvec(plan, op.level, chip, params, hoisting)
    except ScheduleError as exc:
        if not shrink or not exc.suggested_n2:
            raise
        logger.warning("op %d: %s; shrinking n2 %d -> %d", index, exc, plan.n2, exc.suggested_n2)
        plan = plan_for(op, diagonals, None, exc.suggested_n2)
        timeline = schedule_matvec(plan, op.level, chip, params, hoisting)
    return OpRun(index, op, timeline, op.repeat, plan, hoisting)


def perf_row(run: OpRun, chip: ChipConfig) -> Dict[str, Any]:
    counts = run.counts
    cycles = run.cycles
    dram = counts.total_dram
    row = {
        "index": run.index,
        "op": run.op.op,
        "level": run.op.level,
        "mode": run.mode.value if run.mode else None,
        "d": None,
        "n1": None,
        "n2": None,
        "repeat": run.repeat,
        "cycles": cycles,
        "seconds": cycles / chip.clock_hz,
        "stall_cycles": run.timeline.stall_cycles * run.repeat,
        "stall_fraction": run.timeline.stall_fraction,
        "mults": counts.total_mults,
        "adds": counts.adds,
        "dram_bytes": dram,
        "intensity": _ratio(counts.total_mults, dram),
        "utilization": _ratio(counts.total_mults, cycles * chip.multiplier_count),
        "rotations": None,
        "diagonal_rotations": None,
        "bsgs_slots": None,
        "peak_sram_mib": run.timeline.ledger.peak / 2**20 if run.timeline.ledger else None,
    }
    if run.plan is not None:
        row.update(
            d=run.plan.n,
            n1=run.plan.n1,
            n2=run.plan.n2,
            rotations=len(run.plan.rotations()),
            diagonal_rotations=diagonal_rotations(run.plan.diagonals),
            bsgs_slots=run.plan.n1 + run.plan.n2,
        )
    return row


def schedule_workload(spec: WorkloadSpec, params: ParameterSet, chip: ChipConfig, mode: Optional[str] = None,
                      seed: int = 0, base: Optional[Path] = None, n2: Optional[int] = None,
                      shrink: bool = False) -> List[OpRun]:
    runs = []
    for index, op in enumerate(spec.ops):
        run = schedule_op(op, index, params, chip, mode, seed, base, n2, shrink)
        if run is not None:
            runs.append(run)
    return runs


def workload_totals(runs: Sequence[OpRun], chip: ChipConfig, repetitions: int = 1) -> Tuple[Dict[str, Any], OpCounts, int]:
    counts = OpCounts()
    for run in runs:
        counts = counts + run.counts
    counts = counts.scaled(repetitions)
    cycles = sum(run.cycles for run in runs) * repetitions
    stalls = sum(run.timeline.stall_cycles * run.repeat for run in runs) * repetitions
    totals = {
        "cycles": cycles,
        "seconds": cycles / chip.clock_hz,
        "stall_cycles": stalls,
        "stall_fraction": _ratio(stalls, cycles) or 0.0,
        "mults": counts.total_mults,
        "adds": counts.adds,
        "dram_bytes": counts.total_dram,
        "utilization": _ratio(counts.total_mults, cycles * chip.multiplier_count),
        "intensity": _ratio(counts.total_mults, counts.total_dram),
    }
    return totals, counts, cycles


def run_perf(spec: WorkloadSpec, chip: Optional[ChipConfig] = None, mode: Optional[str] = None, seed: int = 0,
             base: Optional[Path] = None, n2: Optional[int] = None, shrink: bool = False,
             rooflines: bool = True) -> Dict[str, Any]:
    """Analytical run of a workload on a chip; the report is a pure function of its inputs."""
    params = get_parameter_set(spec.parameter_set)
    chip = chip or default_chip(params)
    runs = schedule_workload(spec, params, chip, mode, seed, base, n2, shrink)
    totals, counts, cycles = workload_totals(runs, chip, spec.repetitions)

    points = []
    if rooflines and counts.total_mults and cycles:
        for bw in spec.bandwidths or [chip.dram_bw_bytes_per_s]:
            at = chip.with_bandwidth(bw)
            bw_runs = runs if bw == chip.dram_bw_bytes_per_s else schedule_workload(spec, params, at, mode, seed, base, n2, shrink)
            _, bw_counts, bw_cycles = workload_totals(bw_runs, at, spec.repetitions)
            points.append(roofline(_roofline_counts(bw_counts, at), at, bw_cycles, spec.name))

    amortized = None
    if spec.usable_levels:
        rows_by_kind: Dict[str, List[float]] = {}
        for run in runs:
            rows_by_kind.setdefault(run.op.op, []).append(run.cycles / chip.clock_hz)
        amortized = amortized_metrics(
            spec.t_boot(), params.n, spec.usable_levels,
            rows_by_kind.get("matvec"), rows_by_kind.get("hmult"),
        ).as_dict()

    breakdown = [
        {"index": run.index, **kernel_breakdown(params, run.plan, run.op.level, run.mode)}
        for run in runs if run.plan is not None
    ]
    report = {
        "command": "perf",
        "workload": spec.name,
        "parameter_set": params.name,
        "chip": chip.to_dict(),
        "columns": list(PERF_COLUMNS),
        "rows": [perf_row(run, chip) for run in runs],
        "totals": totals,
        "roofline": [pt.as_row() for pt in points],
        "amortized": amortized,
        "breakdown": breakdown,
    }
    logger.info("perf %s: %d ops, %d cycles, %d stalled", spec.name, len(runs), totals["cycles"], totals["stall_cycles"])
    report["_timelines"] = [run.timeline for run in runs]
    report["_roofline_points"] = points
    return report


# -- sweep ----------------------------------------------------------------------------------

def _span(spec: WorkloadSpec, seed: int, base: Optional[Path]) -> int:
    spans = [max(op_diagonals(op, seed, i, base)[0]) + 1 for i, op in enumerate(spec.ops) if isinstance(op, MatvecOp)]
    if not spans:
        raise WorkloadError(f"{spec.name}: a bsgs_ratio sweep needs at least one matvec")
    return max(spans)


def sweep_points(spec: WorkloadSpec, chip: ChipConfig, vary: str, seed: int = 0,
                 base: Optional[Path] = None) -> List[float]:
    if vary == "bsgs_ratio":
        span = _span(spec, seed, base)
        return [float(1 << k) for k in range(int(math.log2(span)) + 1) if (1 << k) <= span]
    if vary == "bandwidth":
        return list(spec.bandwidths or DEFAULT_BANDWIDTHS)
    return [float(chip.p), float(2 * chip.p)]


def _sweep_point(spec: WorkloadSpec, chip: ChipConfig, vary: str, value: float, mode: Optional[str], seed: int,
                 base: Optional[Path]) -> Dict[str, Any]:
    n2 = None
    if vary == "bsgs_ratio":
        n2 = int(value)
        if n2 < 1:
            raise WorkloadError(f"n2 point {value} must be at least 1")
    elif vary == "bandwidth":
        chip = chip.with_bandwidth(value)
    else:
        factor = int(value) // chip.p
        if factor < 1 or factor * chip.p != int(value) or factor & (factor - 1):
            raise WorkloadError(f"p point {value} is not a power-of-two multiple of p={chip.p}")
        if factor > 1:
            chip = chip.scaled(factor)
    params = get_parameter_set(spec.parameter_set)
    runs = schedule_workload(spec, params, chip, mode, seed, base, n2, shrink=True)
    totals, _, _ = workload_totals(runs, chip, spec.repetitions)
    plan = next((run.plan for run in runs if run.plan is not None), None)
    return {
        "varied": vary,
        "value": value,
        "n1": plan.n1 if plan else None,
        "n2": plan.n2 if plan else None,
        "ratio": plan.ratio if plan else None,
        "cycles": totals["cycles"],
        "seconds": totals["seconds"],
        "stall_cycles": totals["stall_cycles"],
        "stall_fraction": totals["stall_fraction"],
        "utilization": totals["utilization"] or 0.0,
        "mults": totals["mults"],
        "intensity": totals["intensity"] or 0.0,
        "dram_bytes": totals["dram_bytes"],
    }


def run_sweep(spec: WorkloadSpec, vary: str, chip: Optional[ChipConfig] = None,
              points: Optional[Sequence[float]] = None, mode: Optional[str] = None, seed: int = 0,
              base: Optional[Path] = None, workers: Optional[int] = None) -> Dict[str, Any]:
    """One row per point; points run on a worker pool and come back in input order."""
    if vary not in SWEEP_KEYS:
        raise WorkloadError(f"cannot vary {vary!r}; choose one of {', '.join(SWEEP_KEYS)}")
    params = get_parameter_set(spec.parameter_set)
    chip = chip or default_chip(params)
    values = list(points) if points else sweep_points(spec, chip, vary, seed, base)
    workers = workers or get_settings().workers
    with ThreadPoolExecutor(max_workers=max(1, min(workers, len(values)))) as executor:
        rows = list(executor.map(lambda v: _sweep_point(spec, chip, vary, float(v), mode, seed, base), values))
    logger.info("swept %s over %d points", vary, len(rows))
    return {
        "command": "sweep",
        "workload": spec.name,
        "parameter_set": params.name,
        "chip": chip.to_dict(),
        "vary": vary,
        "columns": list(SWEEP_COLUMNS),
        "rows": rows,
    }


# -- storage --------------------------------------------------------------------------------

def run_storage(params: ParameterSet, chip: Optional[ChipConfig] = None, level: Optional[int] = None,
                n2: Optional[int] = None) -> Dict[str, Any]:
    chip = chip or default_chip(params)
    level = params.max_level if level is None else level
    params.check_level(level)
    rows = [
        {"item": name, "value": value / 2**20, "unit": "MiB"}
        for name, value in dataclasses.asdict(storage_report(chip, params, level, n2)).items()
    ]
    rows += [{"item": f"unit_{name}", "value": value / 2**20, "unit": "MiB"} for name, value in chip.unit_sram(params.n).items()]
    rows.append({"item": "working_sram", "value": chip.working_sram(params.n) / 2**20, "unit": "MiB"})
    rows.append({"item": "fitting_n2", "value": fitting_n2(params, level, chip), "unit": "count"})
    return {
        "command": "storage",
        "workload": None,
        "parameter_set": params.name,
        "level": level,
        "chip": chip.to_dict(),
        "columns": list(STORAGE_COLUMNS),
        "rows": rows,
    }


# -- functional simulation ------------------------------------------------------------------

def functional_ring(spec: WorkloadSpec, params: ParameterSet, n_override: Optional[int]) -> int:
    n = n_override or spec.n_override or params.n
    limit = get_settings().functional_max_n
    if n > limit:
        raise WorkloadError(
            f"functional mode runs real arithmetic and is limited to N <= {limit}; "
            f"{spec.name} asks for N={n}, pass --n-override"
        )
    return n


def functional_chain(spec: WorkloadSpec, n: int) -> ModulusChain:
    top = max((op.level for op in spec.ops if not isinstance(op, BootMarkerOp)), default=1)
    desk = DESK_SETS.get(spec.parameter_set)
    if desk is not None and desk.n == n and top <= desk.levels:
        return desk.chain()
    base = desk or DESK_SETS["desk-16"]
    return desk_chain(n, max(top, 2), base.alpha, base.prime_bits, base.scale_bits)


def tolerance(expected: np.ndarray, scale: float, chain: ModulusChain) -> float:
    """Decode tolerance relative to the largest expected slot and to the loss of scale."""
    magnitude = max(1.0, float(np.max(np.abs(expected))) if expected.size else 1.0)
    return DECODE_TOLERANCE * magnitude * max(1.0, 2.0 ** chain.scale_bits / scale)


def ct_checksum(ct: Ciphertext) -> str:
    h = hashlib.sha256()
    for poly in (ct.c0, ct.c1):
        h.update(",".join(str(int(v)) for v in poly.data.ravel()).encode())
    return h.hexdigest()[:16]


def matvec_width(op: MatvecOp, diagonals: Sequence[int], slots: int, matrix: Optional[DiagonalizedMatrix]) -> int:
    if matrix is not None:
        return matrix.width
    if op.width:
        return op.width
    span = max(diagonals) + 1
    width = 1
    while width < span:
        width *= 2
    if width > slots:
        raise WorkloadError(f"{span} diagonals do not fit {slots} slots")
    return width


def _compare(got: np.ndarray, expected: np.ndarray, scale: float, chain: ModulusChain) -> Tuple[float, float]:
    err = float(np.max(np.abs(np.real(got) - expected))) if expected.size else 0.0
    return err, tolerance(expected, scale, chain)


def simulate_op(op: Any, index: int, keys: KeySet, chain: ModulusChain, n: int, seed: int, base: Optional[Path],
                trace_events: Optional[list]) -> Dict[str, Any]:
    slots = n // 2
    rng = np.random.default_rng([seed, index, 0x51])
    l1 = op.level + 1
    model = KernelModel(n)
    row: Dict[str, Any] = {k: None for k in SIMULATE_COLUMNS}
    row.update(index=index, op=op.op, level=op.level)

    if isinstance(op, MatvecOp):
        diagonals, matrix = op_diagonals(op, seed, index, base)
        width = matvec_width(op, diagonals, slots, matrix)
        if matrix is None:
            matrix = DiagonalizedMatrix(width, {k: rng.uniform(-1, 1, width) for k in diagonals})
        plan = plan_for(op, matrix.indices(), DEFAULT_CHIP.n2_cap)
        mode = HoistingMode(op.mode)
        v = rng.uniform(-1, 1, width)
        ct = encrypt(tile(v, slots), keys, chain, op.level, seed=seed + index)
        with counters.counting() as counter:
            out = matvec_bsgs(ct, matrix, plan, mode, keys, chain)
        expected = tile(matvec_reference(matrix.to_matrix(), v), slots)
        got = decrypt_message(out, keys.secret)
        err, tol = _compare(got, expected, out.scale, chain)
        model_mults = model.matvec(plan, l1, chain.alpha, mode).total().total_mults
        passed = err <= tol and counter.total == model_mults
        if trace_events is not None:
            streamed = run_scheduled_matvec(ct, matrix, plan, keys, chain, min(TRACE_LANES, n // 2), mode, trace=True)
            s_err, _ = _compare(decrypt_message(streamed.ciphertext, keys.secret), expected, out.scale, chain)
            if s_err > tol:
                logger.error("op %d: streamed units disagree with the reference path (error %.3g)", index, s_err)
                passed = False
            trace_events.extend(streamed.events)
        row.update(
            mode=mode.value, d=plan.n, n1=plan.n1, n2=plan.n2, width=width,
            rotations=counter.events["rotation"],
            diagonal_rotations=diagonal_rotations(plan.diagonals),
            bsgs_slots=plan.n1 + plan.n2,
            mults=counter.total, model_mults=model_mults, counts_match=counter.total == model_mults,
            max_error=err, tolerance=tol, checksum=ct_checksum(out), passed=passed,
        )
        return row

    a = rng.uniform(-1, 1, slots)
    ct_a = encrypt(a, keys, chain, op.level, seed=seed + index)
    if isinstance(op, KeySwitchOp):
        with counters.counting() as counter:
            out = h_rot(ct_a, 1, keys.rotation_key(1), chain)
        expected = rotate_cleartext(a, 1)
        model_mults = model.rotation(l1, chain.alpha).total_mults
    else:
        b = rng.uniform(-1, 1, slots)
        ct_b = encrypt(b, keys, chain, op.level, seed=seed + index + 0x10000)
        with counters.counting() as counter:
            if isinstance(op, HMultOp):
                out = h_mult(ct_a, ct_b, keys.relin, chain, fuse_moddown=op.fuse_moddown)
            else:
                out = h_add(ct_a, ct_b)
        if isinstance(op, HMultOp):
            expected = a * b
            model_mults = model.h_mult(l1, chain.alpha, op.fuse_moddown).total_mults
        else:
            expected = a + b
            model_mults = 0
    err, tol = _compare(decrypt_message(out, keys.secret), expected, out.scale, chain)
    counts_match = counter.total == model_mults
    row.update(
        mults=counter.total, model_mults=model_mults, counts_match=counts_match,
        max_error=err, tolerance=tol, checksum=ct_checksum(out), passed=err <= tol and counts_match,
    )
    return row


def run_simulate(spec: WorkloadSpec, n_override: Optional[int] = None, seed: int = 0,
                 base: Optional[Path] = None, trace_events: Optional[list] = None) -> Dict[str, Any]:
    """Run every op on real ciphertexts and check each against its cleartext oracle."""
    params = get_parameter_set(spec.parameter_set)
    ops = [(i, op) for i, op in enumerate(spec.ops) if not isinstance(op, BootMarkerOp)]
    report = {
        "command": "simulate",
        "workload": spec.name,
        "parameter_set": params.name,
        "n": None,
        "columns": list(SIMULATE_COLUMNS),
        "rows": [],
        "totals": {"ops": 0, "failures": 0, "mults": 0, "passed": True},
    }
    if not ops:
        return report

    n = functional_ring(spec, params, n_override)
    chain = functional_chain(spec, n)
    rotations = set()
    for i, op in ops:
        if isinstance(op, MatvecOp):
            diagonals, matrix = op_diagonals(op, seed, i, base)
            rotations.update(plan_for(op, diagonals, DEFAULT_CHIP.n2_cap).rotations())
        elif isinstance(op, KeySwitchOp):
            rotations.add(1)
    h = max(1, min(params.h, n // 2))
    keys = keygen(chain, h, seed, sorted(rotations), n=n)
    logger.info("simulating %s at N=%d with %d rotation keys", spec.name, n, len(rotations))

    rows = [simulate_op(op, i, keys, chain, n, seed, base, trace_events) for i, op in ops]
    failures = sum(1 for r in rows if not r["passed"])
    for r in rows:
        if not r["passed"]:
            logger.error("op %d (%s) failed: error %.3g, tolerance %.3g, mults %s vs model %s",
                         r["index"], r["op"], r["max_error"], r["tolerance"], r["mults"], r["model_mults"])
    report.update(
        n=n,
        rows=rows,
        totals={"ops": len(rows), "failures": failures, "mults": sum(r["mults"] for r in rows), "passed": failures == 0},
    )
    return report


# -- output and persistence ----------------------------------------------------------------

def public(report: Dict[str, Any]) -> Dict[str, Any]:
    return {k: v for k, v in report.items() if not k.startswith("_")}


def emit(report: Dict[str, Any], out: Optional[str], fmt: str) -> None:
    report = public(report)
    if out:
        exports.write_report(Path(out), fmt, report)
        return
    if fmt == "json":
        sys.stdout.write(exports.json_text(report))
    elif fmt == "csv":
        sys.stdout.write(exports.csv_text(report.get("rows", []), report.get("columns")))
    else:
        raise WorkloadError(f"--format {fmt} needs --out")


def save(report: Dict[str, Any], chip: Optional[ChipConfig] = None) -> Optional[int]:
    """Persist a run; a failing store is logged and never fails the command."""
    from .database import get_db, init_db

    report = public(report)
    try:
        init_db()
        with next(get_db()) as db:
            run = crud.create_run(
                db, report["command"], report,
                workload=report.get("workload"),
                parameter_set=report.get("parameter_set"),
                chip_digest=chip_digest(chip) if chip else None,
            )
            if report["command"] == "sweep":
                crud.add_sweep_points(db, run.id, report["rows"])
            logger.info("saved run %d", run.id)
            return run.id
    except SQLAlchemyError as exc:
        logger.warning("results store unavailable, run not saved: %s", exc)
        return None


def history(command: Optional[str] = None, limit: int = 20, run_id: Optional[int] = None) -> Dict[str, Any]:
    from .database import get_db, init_db

    init_db()
    with next(get_db()) as db:
        if run_id is not None:
            run = crud.get_run(db, run_id)
            if run is None:
                raise WorkloadError(f"no stored run with id {run_id}")
            rows = [schemas.to_dict_sweep_point(p) for p in crud.list_sweep_points(db, run_id)]
            return {"command": "history", "run": schemas.to_dict_run(run, with_report=True), "rows": rows}
        rows = [schemas.to_dict_run(r) for r in crud.list_runs(db, command=command, limit=limit)]
    return {"command": "history", "rows": rows}


# -- argument parsing -----------------------------------------------------------------------

def _workload_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workload", required=True, help="workload JSON file")
    p.add_argument("--seed", type=int, default=None, help="seed for synthetic matrices and keys")


def _output_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="report path; stdout when absent")
    p.add_argument("--format", choices=exports.FORMATS, default="json")
    p.add_argument("--save", action="store_true", help="store the run in the results database")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="osiris", description="Systolic FHE accelerator simulator")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="functional run at desk scale with oracle checks")
    _workload_args(p)
    _output_args(p)
    p.add_argument("--n-override", type=int, default=None, help="ring degree for the functional run")
    p.add_argument("--trace", help="write a CSV event trace of the streamed unit models")

    p = sub.add_parser("perf", help="analytical cycles, counts and roofline")
    _workload_args(p)
    _output_args(p)
    p.add_argument("--chip", help="chip JSON file")
    p.add_argument("--mode", choices=[m.value for m in HoistingMode], help="hoisting mode for every matvec")
    p.add_argument("--timeline", help="write per-op phase timelines as JSON")
    p.add_argument("--roofline", help="write roofline points as CSV")

    p = sub.add_parser("sweep", help="vary one knob and emit one row per point")
    _workload_args(p)
    _output_args(p)
    p.add_argument("--chip", help="chip JSON file")
    p.add_argument("--vary", choices=SWEEP_KEYS, required=True)
    p.add_argument("--points", type=float, nargs="+", help="values to sweep")
    p.add_argument("--mode", choices=[m.value for m in HoistingMode])
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("storage", help="SRAM budget of a parameter set on a chip")
    _output_args(p)
    p.add_argument("--chip", help="chip JSON file")
    p.add_argument("--parameter-set", default="IV")
    p.add_argument("--level", type=int, default=None)
    p.add_argument("--n2", type=int, default=None)

    p = sub.add_parser("history", help="list stored runs")
    p.add_argument("--run-id", type=int, default=None)
    p.add_argument("--command-filter", dest="command_filter", default=None)
    p.add_argument("--limit", type=int, default=20)
    p.add_argument("--format", choices=("csv", "json"), default="json")

    sub.add_parser("version", help="print the version")
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "version":
        sys.stdout.write(f"osiris {__version__}\n")
        return EXIT_OK
    if args.command == "history":
        emit(history(args.command_filter, args.limit, args.run_id), None, args.format)
        return EXIT_OK

    chip = schemas.load_chip(Path(args.chip)) if getattr(args, "chip", None) else None
    if args.command == "storage":
        report = run_storage(get_parameter_set(args.parameter_set), chip, args.level, args.n2)
        emit(report, args.out, args.format)
        if args.save:
            save(report, chip)
        return EXIT_OK

    workload = Path(args.workload)
    spec = schemas.load_workload(workload)
    seed = get_settings().seed if args.seed is None else args.seed
    logger.info("loaded workload %s (%d ops) from %s", spec.name, len(spec.ops), workload)
    code = EXIT_OK
    if args.command == "simulate":
        events = [] if args.trace else None
        report = run_simulate(spec, args.n_override, seed, workload.parent, events)
        if args.trace:
            exports.write_trace(Path(args.trace), events)
        if not report["totals"]["passed"]:
            code = EXIT_MISMATCH
    elif args.command == "perf":
        report = run_perf(spec, chip, args.mode, seed, workload.parent)
        if args.timeline:
            exports.write_timeline(Path(args.timeline), report["_timelines"])
        if args.roofline:
            exports.write_roofline(Path(args.roofline), report["_roofline_points"])
    else:
        report = run_sweep(spec, args.vary, chip, args.points, args.mode, seed, workload.parent, args.workers)
    emit(report, args.out, args.format)
    if args.save:
        save(report, chip)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else getattr(logging, get_settings().log_level, logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return _dispatch(args)
    except OsirisError as exc:
        logger.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
