import json
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .bconv_array import BconvArrayConfig
from .errors import WorkloadError
from .gsc_scheduler import ChipConfig
from .hadamard_unit import HadamardConfig
from .mdc_pipeline import Direction, MdcConfig

WORKLOAD_SCHEMA = "osiris.workload/1"
CHIP_SCHEMA = "osiris.chip/1"


# -- workload files -----------------------------------------------------------------------

class _Op(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MatvecOp(_Op):
    op: Literal["matvec"]
    d: int = Field(..., ge=1)
    level: int = Field(..., ge=0)
    mode: Literal["nh", "sh", "dh"] = "dh"
    n1: Optional[int] = Field(None, ge=1)
    n2: Optional[int] = Field(None, ge=1)
    width: Optional[int] = Field(None, ge=1)
    matrix: Optional[str] = None
    density: float = Field(1.0, gt=0, le=1)
    repeat: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _split_covers_d(self):
        if self.n1 and self.n2 and self.n1 * self.n2 < self.d:
            raise ValueError(f"n1*n2={self.n1 * self.n2} does not cover d={self.d}")
        if self.width is not None and self.width < self.d:
            raise ValueError(f"width {self.width} is smaller than d={self.d}")
        return self


class KeySwitchOp(_Op):
    op: Literal["keyswitch"]
    level: int = Field(..., ge=0)
    repeat: int = Field(1, ge=1)


class HMultOp(_Op):
    op: Literal["hmult"]
    level: int = Field(..., ge=1)
    fuse_moddown: bool = True
    repeat: int = Field(1, ge=1)


class HAddOp(_Op):
    op: Literal["hadd"]
    level: int = Field(..., ge=0)
    repeat: int = Field(1, ge=1)


class BootMarkerOp(_Op):
    op: Literal["boot_marker"]
    t_boot_s: float = Field(0.0, ge=0)


WorkloadOp = Annotated[Union[MatvecOp, KeySwitchOp, HMultOp, HAddOp, BootMarkerOp], Field(discriminator="op")]


class WorkloadSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    schema_: Literal["osiris.workload/1"] = Field(WORKLOAD_SCHEMA, alias="schema")
    name: str
    parameter_set: str
    ops: List[WorkloadOp] = Field(default_factory=list)
    bandwidths: List[float] = Field(default_factory=list)
    repetitions: int = Field(1, ge=1)
    n_override: Optional[int] = None
    usable_levels: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _levels_descend(self):
        last = None
        for op in self.ops:
            if isinstance(op, BootMarkerOp):
                last = None
                continue
            if last is not None and op.level > last:
                raise ValueError(f"level rises from {last} to {op.level} without a boot marker")
            last = op.level
        return self

    def t_boot(self) -> float:
        return sum(op.t_boot_s for op in self.ops if isinstance(op, BootMarkerOp))


# -- chip files -------------------------------------------------------------------------------

class ChipFile(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    schema_: Literal["osiris.chip/1"] = Field(CHIP_SCHEMA, alias="schema")
    name: str = "osiris"
    clock_hz: float = Field(1e9, gt=0)
    p: int = 512
    mdc_stages: int = 16
    interleave_factor: int = 42
    butterfly_pipeline_depth: int = 2
    mdc_instances: int = 2
    bidirectional: bool = True
    bconv_height: int = 16
    smac_pipeline_depth: int = 2
    hadamard_height: int = 3
    hadamard_units: int = 2
    hadamard_mults_per_lane: int = 7
    sram_mib: float = Field(210, gt=0)
    dram_bw_bytes_per_s: float = Field(1e12, gt=0)
    word_bits: int = 40
    n2_cap: int = Field(4, ge=1)
    shared_bandwidth: bool = True

    def to_chip(self) -> ChipConfig:
        return ChipConfig(
            name=self.name,
            clock_hz=self.clock_hz,
            p=self.p,
            mdc=MdcConfig(
                p=self.p,
                s=self.mdc_stages,
                interleave_factor=self.interleave_factor,
                butterfly_pipeline_depth=self.butterfly_pipeline_depth,
                direction=Direction.BIDIRECTIONAL if self.bidirectional else Direction.FWD,
            ),
            mdc_instances=self.mdc_instances,
            bconv=BconvArrayConfig(height=self.bconv_height, width=self.p, smac_pipeline_depth=self.smac_pipeline_depth),
            hadamard=HadamardConfig(lanes=self.p, height=self.hadamard_height),
            hadamard_units=self.hadamard_units,
            hadamard_mults_per_lane=self.hadamard_mults_per_lane,
            benes_size=self.p,
            sram_bytes=int(self.sram_mib * 2**20),
            dram_bw_bytes_per_s=self.dram_bw_bytes_per_s,
            word_bits=self.word_bits,
            n2_cap=self.n2_cap,
            shared_bandwidth=self.shared_bandwidth,
        )


def _read(path: Path, expected: str) -> Dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise WorkloadError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise WorkloadError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise WorkloadError(f"{path}: top level must be an object")
    found = data.get("schema")
    if found != expected:
        raise WorkloadError(f"{path}: schema {found!r} is not supported, expected {expected!r}")
    return data


def _errors(exc: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(x) for x in e['loc'])}: {e['msg']}" for e in exc.errors())


def parse_workload(data: Dict[str, Any], source: str = "workload") -> WorkloadSpec:
    try:
        return WorkloadSpec.model_validate(data)
    except ValidationError as exc:
        raise WorkloadError(f"{source}: {_errors(exc)}") from exc


def parse_chip(data: Dict[str, Any], source: str = "chip") -> ChipConfig:
    try:
        return ChipFile.model_validate(data).to_chip()
    except ValidationError as exc:
        raise WorkloadError(f"{source}: {_errors(exc)}") from exc


def load_workload(path: Path) -> WorkloadSpec:
    return parse_workload(_read(path, WORKLOAD_SCHEMA), str(path))


def load_chip(path: Path) -> ChipConfig:
    return parse_chip(_read(path, CHIP_SCHEMA), str(path))


# -- stored rows ------------------------------------------------------------------------------

def to_dict_parameter_set(obj) -> Optional[Dict[str, Any]]:
    if not obj:
        return None
    return {
        "id": obj.id,
        "name": obj.name,
        "n": obj.n,
        "slots": obj.slots,
        "l_eff": obj.l_eff,
        "alpha": obj.alpha,
        "dnum": obj.dnum,
        "q0_bits": json.loads(obj.q0_bits) if obj.q0_bits else [],
        "qi_bits": obj.qi_bits,
        "p_bits": obj.p_bits,
        "h": obj.h,
        "boot_alpha": obj.boot_alpha,
        "boot_levels": obj.boot_levels,
    }


def to_dict_sweep_point(obj) -> Dict[str, Any]:
    return {
        "id": obj.id,
        "run_id": obj.run_id,
        "varied": obj.varied,
        "value": obj.value,
        "cycles": obj.cycles,
        "stall_fraction": obj.stall_fraction,
        "utilization": obj.utilization,
        "mults": obj.mults,
        "intensity": obj.intensity,
    }


def to_dict_run(obj, with_report: bool = False) -> Dict[str, Any]:
    out = {
        "id": obj.id,
        "command": obj.command,
        "workload": obj.workload,
        "parameter_set": obj.parameter_set,
        "chip_digest": obj.chip_digest,
        "cycles": obj.cycles,
        "stall_cycles": obj.stall_cycles,
        "mults": obj.mults,
        "dram_bytes": obj.dram_bytes,
        "utilization": obj.utilization,
        "intensity": obj.intensity,
        "created_at": obj.created_at.isoformat() if obj.created_at else None,
        "points": len(getattr(obj, "points", []) or []),
    }
    if with_report:
        out["report"] = json.loads(obj.report_json) if obj.report_json else {}
    return out
