"""Giant-step centric scheduling of BSGS matvecs on the chip model.

The baby-step loop is the steady state: while the MDC units regenerate the n2
diagonals of one baby step from their q0 limbs, the next rotation key streams in
from DRAM. A baby-step iteration stalls only when the key load outlasts the work
it hides behind. Every phase carries the exact closed-form counts of the work it
performs, so timeline totals and perf_model totals agree.
"""
import dataclasses
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from . import counters
from .bconv_array import BconvArray, BconvArrayConfig
from .benes_permuter import AutomorphismPlan, plan_automorphism, run_automorphism
from .ckks_ops import Backend, BaseTable, Ciphertext, KeySet
from .errors import ParameterError, RepresentationError, ScheduleError
from .hadamard_unit import HadamardConfig, HadamardUnit
from .matvec_algos import BsgsPlan, DiagonalizedMatrix, HoistingMode, matvec_bsgs
from .mdc_pipeline import Direction, MdcConfig, MdcPipeline, storage_bytes
from .perf_model import KernelModel, OpCounts, ParameterSet, effective_mode, mdc_buffer_bytes, sum_counts
from .poly import LimbMatrix, Rep, from_interleaved, to_bit_reversed, to_interleaved, to_natural
from .rns_core import ModulusChain, is_power_of_two

logger = logging.getLogger(__name__)

MIB = 2**20


# -- chip -----------------------------------------------------------------------------

@dataclass(frozen=True)
class ChipConfig:
    name: str = "osiris"
    clock_hz: float = 1e9
    p: int = 512
    mdc: MdcConfig = field(default_factory=MdcConfig)
    mdc_instances: int = 2
    bconv: BconvArrayConfig = field(default_factory=BconvArrayConfig)
    hadamard: HadamardConfig = field(default_factory=HadamardConfig)
    hadamard_units: int = 2
    hadamard_mults_per_lane: int = 7
    benes_size: int = 512
    sram_bytes: int = 210 * MIB
    dram_bw_bytes_per_s: float = 1e12
    word_bits: int = 40
    n2_cap: int = 4
    shared_bandwidth: bool = True

    def __post_init__(self):
        if not is_power_of_two(self.p) or self.p < 2:
            raise ParameterError(f"lane width {self.p} must be a power of two >= 2")
        widths = {"mdc": self.mdc.p, "bconv": self.bconv.width, "hadamard": self.hadamard.lanes, "benes": self.benes_size}
        off = {k: v for k, v in widths.items() if v != self.p}
        if off:
            raise ParameterError(f"unit widths {off} do not match p={self.p}")
        if self.word_bits % 8:
            raise ParameterError("word_bits must be a whole number of bytes")
        if self.clock_hz <= 0 or self.dram_bw_bytes_per_s <= 0:
            raise ParameterError("clock and bandwidth must be positive")

    @property
    def word_bytes(self) -> int:
        return self.word_bits // 8

    @property
    def multiplier_inventory(self) -> Dict[str, int]:
        prescale = self.bconv.width if self.bconv.prescale_row else 0
        return {
            "mdc": self.mdc_instances * self.mdc.s * self.mdc.p,
            "bconv": self.bconv.height * self.bconv.width + prescale,
            "hadamard": self.hadamard_units * self.hadamard.lanes * self.hadamard_mults_per_lane,
        }

    @property
    def multiplier_count(self) -> int:
        return sum(self.multiplier_inventory.values())

    def unit_sram(self, n: int) -> Dict[str, int]:
        twiddles = storage_bytes(n, self.mdc.interleave_factor, self.word_bits, sharing_groups=self.mdc_instances)
        return {
            "mdc_buffers": mdc_buffer_bytes(self.mdc, n, self.mdc_instances, self.word_bits),
            "twiddles": twiddles.decomposed_bytes,
        }

    def working_sram(self, n: int) -> int:
        left = self.sram_bytes - sum(self.unit_sram(n).values())
        if left < 0:
            raise ParameterError(f"unit buffers need more than the {self.sram_bytes} bytes of SRAM")
        return left

    def load_cycles(self, nbytes: int) -> int:
        if nbytes <= 0 or math.isinf(self.dram_bw_bytes_per_s):
            return 0
        return math.ceil(nbytes * self.clock_hz / self.dram_bw_bytes_per_s)

    def scaled(self, factor: int) -> "ChipConfig":
        """Chip with `factor` times the lanes and the bandwidth."""
        p = self.p * factor
        return dataclasses.replace(
            self,
            name=f"{self.name}x{factor}",
            p=p,
            mdc=dataclasses.replace(self.mdc, p=p),
            bconv=dataclasses.replace(self.bconv, width=p),
            hadamard=dataclasses.replace(self.hadamard, lanes=p),
            benes_size=p,
            dram_bw_bytes_per_s=self.dram_bw_bytes_per_s * factor,
        )

    def with_bandwidth(self, bw: float) -> "ChipConfig":
        return dataclasses.replace(self, dram_bw_bytes_per_s=bw)

    @classmethod
    def desk(cls, n: int, p: int, interleave_factor: int = 64, hadamard_height: int = 3) -> "ChipConfig":
        """Small chip for functional runs at ring degree n."""
        return cls(
            name=f"desk-n{n}-p{p}",
            p=p,
            mdc=MdcConfig(p=p, s=int(math.log2(n)), interleave_factor=interleave_factor),
            bconv=BconvArrayConfig(width=p),
            hadamard=HadamardConfig(lanes=p, height=hadamard_height),
            benes_size=p,
            sram_bytes=1 << 40,
        )

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "clock_hz": self.clock_hz,
            "p": self.p,
            "mdc": {"s": self.mdc.s, "interleave_factor": self.mdc.interleave_factor,
                    "butterfly_pipeline_depth": self.mdc.butterfly_pipeline_depth,
                    "direction": self.mdc.direction.value, "instances": self.mdc_instances},
            "bconv": {"height": self.bconv.height, "smac_pipeline_depth": self.bconv.smac_pipeline_depth,
                      "prescale_row": self.bconv.prescale_row},
            "hadamard": {"height": self.hadamard.height, "units": self.hadamard_units,
                         "mults_per_lane": self.hadamard_mults_per_lane},
            "sram_bytes": self.sram_bytes,
            "dram_bw_bytes_per_s": self.dram_bw_bytes_per_s,
            "word_bits": self.word_bits,
            "n2_cap": self.n2_cap,
            "shared_bandwidth": self.shared_bandwidth,
            "multipliers": self.multiplier_count,
        }


# -- timeline --------------------------------------------------------------------------

@dataclass
class PhaseRecord:
    phase: str
    start_cycle: int
    end_cycle: int
    units: Tuple[str, ...]
    dram_bytes: int = 0
    counts: OpCounts = field(default_factory=OpCounts)
    stall_cycles: int = 0
    t_load: int = 0
    t_compute: int = 0
    t_ofgen: int = 0

    @property
    def latency(self) -> int:
        return self.end_cycle - self.start_cycle

    def as_dict(self) -> Dict:
        return {
            "phase": self.phase,
            "start_cycle": self.start_cycle,
            "end_cycle": self.end_cycle,
            "units": list(self.units),
            "dram_bytes": self.dram_bytes,
            "mults": self.counts.total_mults,
            "stall_cycles": self.stall_cycles,
            "t_load": self.t_load,
            "t_compute": self.t_compute,
            "t_ofgen": self.t_ofgen,
        }


@dataclass
class CacheLedger:
    capacity: int
    resident: Dict[str, int] = field(default_factory=dict)
    peak: int = 0
    history: List[Tuple[str, int]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.resident.values())

    def place(self, name: str, nbytes: int, at: str) -> None:
        self.resident[name] = nbytes
        total = self.total
        if total > self.capacity:
            raise ScheduleError(f"{at}: {total / MIB:.2f} MiB resident exceeds {self.capacity / MIB:.2f} MiB of SRAM")
        self.peak = max(self.peak, total)
        self.history.append((at, total))

    def release(self, name: str, at: str) -> None:
        self.resident.pop(name, None)
        self.history.append((at, self.total))

    def rename(self, old: str, new: str) -> None:
        if old in self.resident:
            self.resident[new] = self.resident.pop(old)


@dataclass
class ScheduleTimeline:
    chip: ChipConfig
    phases: List[PhaseRecord] = field(default_factory=list)
    ledger: Optional[CacheLedger] = None
    hazards: List[str] = field(default_factory=list)
    limb_period: int = 0

    @property
    def total_cycles(self) -> int:
        return self.phases[-1].end_cycle if self.phases else 0

    @property
    def stall_cycles(self) -> int:
        return sum(ph.stall_cycles for ph in self.phases)

    @property
    def stall_fraction(self) -> float:
        return self.stall_cycles / self.total_cycles if self.total_cycles else 0.0

    @property
    def dram_bytes(self) -> int:
        return sum(ph.dram_bytes for ph in self.phases)

    @property
    def counts(self) -> OpCounts:
        return sum_counts(ph.counts for ph in self.phases)

    @property
    def seconds(self) -> float:
        return self.total_cycles / self.chip.clock_hz

    def iterations(self) -> List[PhaseRecord]:
        return [ph for ph in self.phases if ph.phase.startswith("baby")]

    def append(self, phase: str, units: Sequence[str], counts: OpCounts, t_compute: int,
               load_bytes: int = 0, t_ofgen: int = 0, extra_bytes: int = 0) -> PhaseRecord:
        """Add a phase after the last one; `load_bytes` competes with compute, `extra_bytes` streams alongside."""
        t_load = self.chip.load_cycles(load_bytes)
        floor = -(-counts.total_mults // self.chip.multiplier_count)
        latency = max(t_compute, t_load, self.chip.load_cycles(extra_bytes), floor, 1)
        start = self.total_cycles
        rec = PhaseRecord(
            phase, start, start + latency, tuple(units),
            dram_bytes=load_bytes + extra_bytes,
            counts=counts,
            stall_cycles=max(0, t_load - t_compute),
            t_load=t_load,
            t_compute=t_compute,
            t_ofgen=t_ofgen,
        )
        self.phases.append(rec)
        logger.debug("%s: %d..%d load=%d compute=%d stall=%d", phase, start, rec.end_cycle, t_load, t_compute, rec.stall_cycles)
        return rec

    def validate(self) -> None:
        """Phases are contiguous and never share a unit while overlapping."""
        at = 0
        for ph in self.phases:
            if ph.start_cycle != at:
                raise ScheduleError(f"{ph.phase} starts at {ph.start_cycle}, previous phase ended at {at}")
            at = ph.end_cycle
        if self.ledger and self.ledger.peak > self.ledger.capacity:
            raise ScheduleError("cache ledger exceeded its capacity")

    def summary(self) -> Dict:
        counts = self.counts
        return {
            "chip": self.chip.name,
            "cycles": self.total_cycles,
            "stall_cycles": self.stall_cycles,
            "stall_fraction": self.stall_fraction,
            "dram_bytes": self.dram_bytes,
            "mults": counts.total_mults,
            "seconds": self.seconds,
        }

    def to_dict(self) -> Dict:
        out = self.summary()
        out["phases"] = [ph.as_dict() for ph in self.phases]
        out["hazards"] = list(self.hazards)
        out["peak_sram_bytes"] = self.ledger.peak if self.ledger else 0
        return out


# -- macro-pipeline timing --------------------------------------------------------------

@dataclass(frozen=True)
class ModChangeTiming:
    """INTT -> BConv -> NTT with each unit starting once its producer's first output appears."""

    alpha: int
    beta: int
    intt_cycles: int
    bconv_cycles: int
    ntt_cycles: int
    bconv_start: int
    ntt_start: int
    limb_period: int

    @property
    def total(self) -> int:
        return max(self.intt_cycles, self.bconv_start + self.bconv_cycles, self.ntt_start + self.ntt_cycles)

    @property
    def overlap(self) -> int:
        return self.intt_cycles + self.bconv_cycles + self.ntt_cycles - self.total


def _check_ring(chip: ChipConfig, n: int) -> None:
    if n < chip.p or n % chip.p:
        raise ParameterError(f"N={n} cannot fill p={chip.p} lanes")
    if n > chip.mdc.n_max:
        raise ParameterError(f"N={n} exceeds the {chip.mdc.s}-stage MDC")


def modchange_timing(chip: ChipConfig, n: int, alpha: int, beta: int) -> ModChangeTiming:
    _check_ring(chip, n)
    mdc, bconv = chip.mdc, chip.bconv
    bconv_start = mdc.fill_latency(n, alpha)
    first_out = (bconv.height - 1) + (bconv.width - 1) + bconv.smac_pipeline_depth
    return ModChangeTiming(
        alpha,
        beta,
        mdc.cycle_count(n, alpha),
        bconv.cycle_count(n, alpha, beta),
        mdc.cycle_count(n, beta),
        bconv_start,
        bconv_start + first_out,
        n // chip.p,
    )


@dataclass(frozen=True)
class BidirectionalGrant:
    directions: int
    hazard: Optional[str] = None


def schedule_bidirectional_oflimb(active: bool, modchange_busy: bool = False,
                                  chip: Optional[ChipConfig] = None) -> BidirectionalGrant:
    """Throughput multiplier for OF-Limb NTTs: the ModChange INTT unit may run forward while it is idle."""
    chip = chip or ChipConfig()
    if not active:
        return BidirectionalGrant(1)
    if chip.mdc.direction is not Direction.BIDIRECTIONAL:
        return BidirectionalGrant(1, "mdc units are not bidirectional")
    if modchange_busy:
        return BidirectionalGrant(1, "ModChange holds the inverse direction; OF-Limb runs on one MDC")
    return BidirectionalGrant(2)


class _Timing:
    """Cycle costs of kernels at one level on one chip."""

    def __init__(self, chip: ChipConfig, n: int, l1: int, alpha: int):
        _check_ring(chip, n)
        self.chip, self.n, self.l1, self.alpha = chip, n, l1, alpha
        self.ext = l1 + alpha
        self.np = n // chip.p

    def modchange(self, a: int, b: int) -> int:
        return modchange_timing(self.chip, self.n, a, b).total

    def mod_up(self) -> int:
        return sum(self.modchange(min(self.alpha, self.l1 - s), self.ext - min(self.alpha, self.l1 - s))
                   for s in range(0, self.l1, self.alpha))

    def mod_down(self) -> int:
        return self.modchange(self.alpha, self.l1)

    def key_mult(self) -> int:
        return self.chip.hadamard.keymult_cycles(self.n, self.ext)

    def automorphism(self) -> int:
        return 2 * int(math.log2(self.chip.p)) - 1

    def rescale(self) -> int:
        mdc = self.chip.mdc
        return 2 * (mdc.cycle_count(self.n, 1) + mdc.cycle_count(self.n, self.l1 - 1))

    def of_limb(self, diagonals: int, limbs: int, directions: int) -> int:
        return -(-diagonals * limbs * self.np // directions)

    def diag_stream(self, diagonals: int, limbs: int) -> int:
        per = self.chip.hadamard.diag_cycles(self.n, limbs)
        return -(-diagonals * per // self.chip.hadamard_units)


# -- cache footprint ----------------------------------------------------------------------

def matvec_footprint(params: ParameterSet, level: int, n2: int, mode: HoistingMode, word_bytes: int = 5) -> Dict[str, int]:
    n = params.n
    l1, alpha = params.limb_count(level), params.alpha_at(level)
    ext = l1 + alpha
    dnum = -(-l1 // alpha)
    limbs = ext if HoistingMode(mode) is HoistingMode.DH else l1
    key = dnum * ext * n * word_bytes
    return {
        "decompose": key,
        "accumulators": n2 * 2 * limbs * n * word_bytes,
        "key_current": key,
        "key_next": key,
        "diagonal_staging": limbs * n * word_bytes,
    }


def fitting_n2(params: ParameterSet, level: int, chip: ChipConfig, mode: HoistingMode = HoistingMode.DH) -> int:
    """Largest n2 whose footprint fits the working SRAM; 0 when none does."""
    room = chip.working_sram(params.n)
    fixed = matvec_footprint(params, level, 0, mode, chip.word_bytes)
    per = matvec_footprint(params, level, 1, mode, chip.word_bytes)["accumulators"]
    spare = room - sum(fixed.values())
    return max(0, spare // per) if spare >= 0 else 0


# -- schedules -----------------------------------------------------------------------------

MODCHANGE_UNITS = ("mdc0", "bconv", "mdc1")


def schedule_matvec(plan: BsgsPlan, level: int, chip: ChipConfig, params: ParameterSet,
                    mode: HoistingMode = HoistingMode.DH, of_twiddle: bool = True,
                    of_limb: bool = True) -> ScheduleTimeline:
    mode = effective_mode(plan, mode)
    n = params.n
    l1, alpha = params.limb_count(level), params.alpha_at(level)
    ext = l1 + alpha
    limbs = ext if mode is HoistingMode.DH else l1
    word = chip.word_bytes
    model = KernelModel(n, of_twiddle=of_twiddle, of_limb=of_limb, word_bytes=word)
    timing = _Timing(chip, n, l1, alpha)

    footprint = matvec_footprint(params, level, plan.n2, mode, word)
    room = chip.working_sram(n)
    if sum(footprint.values()) > room:
        best = fitting_n2(params, level, chip, mode)
        raise ScheduleError(
            f"n2={plan.n2} needs {sum(footprint.values()) / MIB:.2f} MiB at level {level}, "
            f"{room / MIB:.2f} MiB available",
            suggested_n2=best or None,
        )

    timeline = ScheduleTimeline(chip, ledger=CacheLedger(room), limb_period=n // chip.p)
    ledger = timeline.ledger
    groups = plan.groups()
    babies = plan.baby_steps()
    giants = plan.giant_steps()
    key_bytes = model.key_bytes(l1, alpha)
    keys_left = len(babies) + len(giants)
    mod_up, key_mult, mod_down = model.mod_up(l1, alpha), model.key_mult(l1, alpha), model.mod_down(l1, alpha)
    for c in (mod_up, key_mult, mod_down):
        c.events.clear()

    def next_key(at: str) -> int:
        nonlocal keys_left
        if not keys_left:
            return 0
        keys_left -= 1
        ledger.place("key_next", key_bytes, at)
        return key_bytes

    # prologue: hoisted ModUp against the first key and the input ciphertext
    counts = OpCounts()
    t_pro = 0
    if mode is not HoistingMode.NH and babies:
        counts = counts + mod_up
        t_pro = timing.mod_up()
    if mode is HoistingMode.DH:
        counts = counts + model.lift(l1).scaled(2)
    ledger.place("decompose", footprint["decompose"], "prologue")
    ct_in = 2 * l1 * n * word
    first = next_key("prologue")
    ledger.rename("key_next", "key_current")
    timeline.append("prologue", MODCHANGE_UNITS + ("dram",), counts.with_dram(ct_io=ct_in, keys=first),
                    t_pro, load_bytes=ct_in + first)
    for j in range(plan.n2):
        ledger.place(f"acc{j}", footprint["accumulators"] // plan.n2, "prologue")
    ledger.place("diagonal_staging", footprint["diagonal_staging"], "prologue")

    # baby-step loop
    order = [0] + babies
    for t, i in enumerate(order):
        at = f"baby[{i}]"
        g = sum(1 for ids in groups.values() if i in ids)
        busy = i != 0 and mode is not HoistingMode.DH
        grant = schedule_bidirectional_oflimb(of_limb and g > 0, busy, chip)
        if grant.hazard and of_limb and g:
            timeline.hazards.append(f"{at}: {grant.hazard}")
        if of_limb:
            t_gen = timing.of_limb(g, limbs, grant.directions)
        else:
            t_gen = timing.diag_stream(g, limbs)
        counts = model.diag_mult(limbs).scaled(g)
        t_mc = 0
        t_km = 0
        if i:
            counts = counts + key_mult
            t_km = timing.key_mult()
            if mode is HoistingMode.SH:
                counts = counts + mod_down.scaled(2)
                t_mc = 2 * timing.mod_down() + timing.automorphism()
            elif mode is HoistingMode.NH:
                counts = counts + mod_up + mod_down.scaled(2)
                t_mc = timing.mod_up() + 2 * timing.mod_down() + timing.automorphism()
        diag_bytes = model.diagonal_bytes(g, limbs)
        key = next_key(at)
        counts = counts.with_dram(keys=key, diagonals=diag_bytes)
        shared = diag_bytes if chip.shared_bandwidth else 0
        units = ("mdc0", "mdc1", "hadamard0", "hadamard1", "dram") + (("bconv", "benes") if t_mc else ())
        timeline.append(at, units, counts, max(t_gen, t_km) + t_mc, load_bytes=key + shared,
                        t_ofgen=t_gen, extra_bytes=diag_bytes - shared)
        ledger.rename("key_next", "key_current")
    ledger.release("decompose", "baby-loop done")
    ledger.release("diagonal_staging", "baby-loop done")

    # epilogue: giant-step rotations serialized on the ModChange macro-pipeline
    for j in giants:
        at = f"giant[{j}]"
        if mode is HoistingMode.DH:
            counts = mod_down + mod_up + key_mult
            t = timing.mod_down() + timing.automorphism() + timing.mod_up() + timing.key_mult()
        else:
            counts = mod_up + key_mult + mod_down.scaled(2)
            t = timing.automorphism() + timing.mod_up() + timing.key_mult() + 2 * timing.mod_down()
        key = next_key(at)
        timeline.append(at, MODCHANGE_UNITS + ("benes", "hadamard0", "dram"), counts.with_dram(keys=key), t,
                        load_bytes=key)
        ledger.rename("key_next", "key_current")
        ledger.release(f"acc{j // plan.n1}", at)
    if mode is HoistingMode.DH:
        timeline.append("moddown", MODCHANGE_UNITS, mod_down.scaled(2), 2 * timing.mod_down())
    ct_out = 2 * (l1 - 1) * n * word
    timeline.append("rescale", ("mdc0", "mdc1", "dram"), model.rescale(l1).with_dram(ct_io=ct_out),
                    timing.rescale(), load_bytes=ct_out)
    for name in list(ledger.resident):
        ledger.release(name, "done")
    timeline.validate()
    logger.debug(
        "matvec %s level=%d n1=%d n2=%d: %d cycles, %d stalled",
        mode.value, level, plan.n1, plan.n2, timeline.total_cycles, timeline.stall_cycles,
    )
    return timeline


def schedule_keyswitch(level: int, chip: ChipConfig, params: ParameterSet, of_twiddle: bool = True) -> ScheduleTimeline:
    """Decompose -> ModUp -> KeyMult -> ModDown of one polynomial on the ModChange macro-pipeline."""
    n = params.n
    l1, alpha = params.limb_count(level), params.alpha_at(level)
    model = KernelModel(n, of_twiddle=of_twiddle, word_bytes=chip.word_bytes)
    timing = _Timing(chip, n, l1, alpha)
    timeline = ScheduleTimeline(chip, limb_period=n // chip.p)
    key = model.key_bytes(l1, alpha)
    timeline.append("modup", MODCHANGE_UNITS + ("dram",), model.mod_up(l1, alpha).with_dram(keys=key),
                    timing.mod_up(), load_bytes=key)
    timeline.append("keymult", ("hadamard0",), model.key_mult(l1, alpha), timing.key_mult())
    for k in range(2):
        timeline.append(f"moddown[{k}]", MODCHANGE_UNITS, model.mod_down(l1, alpha), timing.mod_down())
    timeline.validate()
    return timeline


def schedule_hmult(level: int, chip: ChipConfig, params: ParameterSet, fuse_moddown: bool = True,
                   of_twiddle: bool = True) -> ScheduleTimeline:
    """Tensor -> relinearize -> rescale; the fused path runs ModDown and Rescale as one ModChange pass."""
    n = params.n
    l1, alpha = params.limb_count(level), params.alpha_at(level)
    word = chip.word_bytes
    model = KernelModel(n, of_twiddle=of_twiddle, word_bytes=word)
    timing = _Timing(chip, n, l1, alpha)
    timeline = ScheduleTimeline(chip, limb_period=n // chip.p)
    key = model.key_bytes(l1, alpha)
    ct_in = 4 * l1 * n * word
    tensor = OpCounts.of(adds=l1 * n, tensor=4 * l1 * n)
    lanes = chip.hadamard_units * chip.p * chip.hadamard.diag_mults
    t_tensor = -(-4 * l1 * n // lanes)
    timeline.append("tensor", ("hadamard0", "hadamard1", "dram"), tensor.with_dram(ct_io=ct_in, keys=key),
                    t_tensor, load_bytes=ct_in + key)
    timeline.append("modup", MODCHANGE_UNITS, model.mod_up(l1, alpha), timing.mod_up())
    timeline.append("keymult", ("hadamard0",), model.key_mult(l1, alpha), timing.key_mult())
    ct_out = 2 * (l1 - 1) * n * word
    mdc = chip.mdc
    if fuse_moddown:
        fused = model.lift(l1) + model.fused_moddown_rescale(l1, alpha)
        t_fused = timing.mod_down() + mdc.cycle_count(n, 1) + mdc.cycle_count(n, l1 - 1)
        timeline.append("moddown_rescale[0]", MODCHANGE_UNITS, fused, t_fused)
        timeline.append("moddown_rescale[1]", MODCHANGE_UNITS + ("dram",), fused.with_dram(ct_io=ct_out),
                        t_fused, load_bytes=ct_out)
    else:
        for k in range(2):
            timeline.append(f"moddown[{k}]", MODCHANGE_UNITS, model.mod_down(l1, alpha), timing.mod_down())
        timeline.append("rescale", ("mdc0", "mdc1", "dram"), model.rescale(l1).with_dram(ct_io=ct_out),
                        timing.rescale(), load_bytes=ct_out)
    timeline.validate()
    return timeline


def schedule_hadd(level: int, chip: ChipConfig, params: ParameterSet) -> ScheduleTimeline:
    """Limb-wise addition of two resident ciphertexts on the Hadamard lanes."""
    n = params.n
    l1 = params.limb_count(level)
    _check_ring(chip, n)
    timeline = ScheduleTimeline(chip, limb_period=n // chip.p)
    t = -(-2 * l1 * (n // chip.p) // chip.hadamard_units)
    timeline.append("hadd", ("hadamard0", "hadamard1"), OpCounts.of(adds=2 * l1 * n), t)
    return timeline


# -- streamed functional backend --------------------------------------------------------------

@dataclass(frozen=True)
class TraceEvent:
    cycle: int
    stage: int
    lane: int
    op: str
    unit: str

    def as_row(self) -> Dict:
        return {"cycle": self.cycle, "stage": self.stage, "lane": self.lane, "op": self.op, "unit": self.unit}


class StreamedBackend(Backend):
    """Runs every kernel through the unit models: MDC for (I)NTT, the systolic array
    for BConv, the Benes unit for automorphisms and the Hadamard unit for KeyMult."""

    name = "streamed"

    def __init__(self, n: int, p: int, interleave_factor: int = 64, hadamard_height: int = 3, trace: bool = False):
        if n % p or not is_power_of_two(p):
            raise ParameterError(f"lane width {p} must be a power of two dividing N={n}")
        self.n, self.p = n, p
        self.mdc = MdcPipeline(MdcConfig(p=p, s=int(math.log2(n)), interleave_factor=interleave_factor), trace=trace)
        self.array = BconvArray(BconvArrayConfig(width=p), trace=trace)
        self.hadamard = HadamardUnit(HadamardConfig(lanes=p, height=hadamard_height))
        self.unit_cycles: Counter = Counter()
        self.events: List[TraceEvent] = []
        self._plans: Dict[int, AutomorphismPlan] = {}

    def _charge(self, unit: str, cycles: int, events: Sequence = ()) -> None:
        base = self.unit_cycles[unit]
        self.unit_cycles[unit] += cycles
        # unit events count from the start of their own run; place them on the unit's running clock
        self.events.extend(
            TraceEvent(base + e.cycle, e.stage, e.lane, getattr(e.op, "value", e.op), e.unit) for e in events
        )

    def intt(self, x: LimbMatrix) -> LimbMatrix:
        if x.rep is not Rep.EVAL:
            raise RepresentationError("intt expects the evaluation representation")
        res = self.mdc.run_intt(to_interleaved(to_natural(x), self.p))
        self._charge("mdc", res.cycle_count, res.events)
        return from_interleaved(res.stream)

    def ntt(self, x: LimbMatrix) -> LimbMatrix:
        if x.rep is not Rep.COEFF:
            raise RepresentationError("ntt expects the coefficient representation")
        res = self.mdc.run_ntt(to_interleaved(to_bit_reversed(x), self.p))
        self._charge("mdc", res.cycle_count, res.events)
        return from_interleaved(res.stream)

    def bconv(self, x: LimbMatrix, table: BaseTable) -> LimbMatrix:
        res = self.array.run_bconv(to_interleaved(x, self.p), table)
        self._charge("bconv", res.cycle_count, res.events)
        return from_interleaved(res.stream)

    def automorphism(self, x: LimbMatrix, r: int) -> LimbMatrix:
        plan = self._plans.get(r)
        if plan is None:
            plan = self._plans[r] = plan_automorphism(r, x.n, self.p)
        stream, cycles = run_automorphism(to_interleaved(x, self.p), plan)
        self._charge("benes", cycles)
        return from_interleaved(stream)

    def key_mult(self, digits, pairs):
        s0, s1, cycles = self.hadamard.run_keymult([to_interleaved(d, self.p) for d in digits], pairs)
        self._charge("hadamard", cycles)
        return from_interleaved(s0), from_interleaved(s1)


@dataclass
class ScheduledRun:
    ciphertext: Ciphertext
    timeline: ScheduleTimeline
    counter: counters.MultCounter
    unit_cycles: Dict[str, int]
    events: List[TraceEvent] = field(default_factory=list)


def run_scheduled_matvec(ct: Ciphertext, matrix: DiagonalizedMatrix, plan: BsgsPlan, keys: KeySet,
                         chain: ModulusChain, p: int, mode: HoistingMode = HoistingMode.DH,
                         chip: Optional[ChipConfig] = None, trace: bool = False) -> ScheduledRun:
    """Execute a matvec on real data through the streamed unit models and schedule it."""
    backend = StreamedBackend(ct.n, p, hadamard_height=max(3, chain.dnum_max), trace=trace)
    with counters.counting() as counter:
        out = matvec_bsgs(ct, matrix, plan, mode, keys, chain, backend=backend)
    params = ParameterSet.from_chain(chain, ct.n)
    chip = chip or ChipConfig.desk(ct.n, p, hadamard_height=max(3, chain.dnum_max))
    timeline = schedule_matvec(plan, ct.level, chip, params, mode, of_twiddle=True, of_limb=False)
    return ScheduledRun(out, timeline, counter, dict(backend.unit_cycles), sorted(backend.events, key=lambda e: (e.cycle, e.unit)))
