"""Analytical accounting for CKKS kernels on the accelerator.

Every closed form here counts exactly what the functional kernels record through
:mod:`osiris.counters`, using the same kernel names, so a desk-scale functional run
and the analytical model can be compared term by term. Level arithmetic is logical:
a split q0 still counts as one limb.
"""
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING, Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .errors import ParameterError, PerfModelError
from .matvec_algos import BsgsPlan, HoistingMode
from .mdc_pipeline import WORD_BYTES, MdcConfig, storage_bytes
from .rns_core import ModulusChain, is_power_of_two

if TYPE_CHECKING:
    from .gsc_scheduler import ChipConfig

logger = logging.getLogger(__name__)

DRAM_CLASSES = ("keys", "diagonals", "ct_io")
Number = Union[int, float, str, Fraction]


# -- parameter sets ----------------------------------------------------------------------

@dataclass(frozen=True)
class ParameterSet:
    """A residual parameter set, optionally extended with bootstrapping levels."""

    name: str
    n: int
    slots: int
    l_eff: int
    alpha: int
    dnum: int
    q0_bits: Tuple[int, ...]
    qi_bits: int
    p_bits: int
    h: int
    boot_alpha: Optional[int] = None
    boot_levels: int = 0
    log_qp_max: Optional[int] = None

    def __post_init__(self):
        if not is_power_of_two(self.n) or self.n < 4:
            raise ParameterError(f"{self.name}: ring degree {self.n} is not a power of two >= 4")
        # real-valued packing fills N slots, complex packing N/2
        if not 0 < self.slots <= self.n:
            raise ParameterError(f"{self.name}: {self.slots} slots outside (0, N]")
        if self.alpha < 1 or self.l_eff < 0:
            raise ParameterError(f"{self.name}: alpha and L_eff must be positive")
        if -(-(self.l_eff + 1) // self.alpha) != self.dnum:
            raise ParameterError(f"{self.name}: dnum={self.dnum} does not match ceil((L_eff+1)/alpha)")
        if self.boot_levels and self.boot_alpha is None:
            raise ParameterError(f"{self.name}: bootstrapping levels need a bootstrapping alpha")
        cap = self.log_qp_max
        if cap is not None and self.log_qp(self.max_level) > cap:
            raise ParameterError(f"{self.name}: log QP {self.log_qp(self.max_level)} exceeds {cap}")

    @property
    def max_level(self) -> int:
        return self.l_eff + self.boot_levels

    def check_level(self, level: int) -> None:
        if not 0 <= level <= self.max_level:
            raise ParameterError(f"{self.name}: level {level} outside [0, {self.max_level}]")

    def alpha_at(self, level: int) -> int:
        self.check_level(level)
        if level > self.l_eff and self.boot_alpha is not None:
            return self.boot_alpha
        return self.alpha

    def limb_count(self, level: int) -> int:
        self.check_level(level)
        return level + 1

    def ext_count(self, level: int) -> int:
        return self.limb_count(level) + self.alpha_at(level)

    def dnum_at(self, level: int) -> int:
        return -(-self.limb_count(level) // self.alpha_at(level))

    def digit_sizes(self, level: int) -> List[int]:
        l1, a = self.limb_count(level), self.alpha_at(level)
        return [min(a, l1 - s) for s in range(0, l1, a)]

    def log_qp(self, level: int) -> int:
        alpha = self.boot_alpha if level > self.l_eff and self.boot_alpha else self.alpha
        return sum(self.q0_bits) + level * self.qi_bits + alpha * self.p_bits

    @classmethod
    def from_chain(cls, chain: ModulusChain, n: int, name: str = "chain", h: int = 0) -> "ParameterSet":
        """Counting view of a concrete chain at ring degree n."""
        q0 = tuple(m.bit_width for m in chain.q_limbs[: chain.q0_count])
        qi = chain.q_limbs[-1].bit_width if chain.max_level else q0[0]
        return cls(
            name=name,
            n=n,
            slots=n // 2,
            l_eff=chain.max_level,
            alpha=chain.alpha,
            dnum=chain.dnum(chain.max_level),
            q0_bits=q0,
            qi_bits=qi,
            p_bits=chain.p_limbs[0].bit_width,
            h=h,
        )

    def to_dict(self) -> Dict:
        return {
            "name": self.name, "n": self.n, "slots": self.slots, "l_eff": self.l_eff,
            "alpha": self.alpha, "dnum": self.dnum, "q0_bits": list(self.q0_bits),
            "qi_bits": self.qi_bits, "p_bits": self.p_bits, "h": self.h,
            "boot_alpha": self.boot_alpha, "boot_levels": self.boot_levels,
            "log_qp_max": self.log_qp_max,
        }


# -- counts ---------------------------------------------------------------------------------

@dataclass
class OpCounts:
    mults: Counter = field(default_factory=Counter)
    adds: int = 0
    dram_bytes: Counter = field(default_factory=Counter)
    events: Counter = field(default_factory=Counter)

    @classmethod
    def of(cls, adds: int = 0, **mults: int) -> "OpCounts":
        return cls(Counter({k: int(v) for k, v in mults.items() if v}), int(adds))

    @property
    def total_mults(self) -> int:
        return sum(self.mults.values())

    @property
    def total_dram(self) -> int:
        return sum(self.dram_bytes.values())

    def __add__(self, other: "OpCounts") -> "OpCounts":
        return OpCounts(
            self.mults + other.mults,
            self.adds + other.adds,
            self.dram_bytes + other.dram_bytes,
            self.events + other.events,
        )

    def scaled(self, k: int) -> "OpCounts":
        if k < 0:
            raise PerfModelError("negative repetition count")
        return OpCounts(
            Counter({n: v * k for n, v in self.mults.items() if v * k}),
            self.adds * k,
            Counter({n: v * k for n, v in self.dram_bytes.items() if v * k}),
            Counter({n: v * k for n, v in self.events.items() if v * k}),
        )

    def with_dram(self, **classes: int) -> "OpCounts":
        for name in classes:
            if name not in DRAM_CLASSES:
                raise PerfModelError(f"unknown DRAM traffic class {name!r}")
        return self + OpCounts(dram_bytes=Counter({k: int(v) for k, v in classes.items() if v}))

    def as_dict(self) -> Dict:
        return {
            "mults": dict(sorted(self.mults.items())),
            "total_mults": self.total_mults,
            "adds": self.adds,
            "dram_bytes": {k: int(self.dram_bytes.get(k, 0)) for k in DRAM_CLASSES},
            "total_dram": self.total_dram,
            "events": dict(sorted(self.events.items())),
        }


def sum_counts(items: Iterable[OpCounts]) -> OpCounts:
    total = OpCounts()
    for c in items:
        total = total + c
    return total


@dataclass
class CostBreakdown:
    """Labelled parts of an algorithm's cost, in execution order."""

    parts: List[Tuple[str, OpCounts]] = field(default_factory=list)

    def add(self, label: str, counts: OpCounts, times: int = 1) -> "CostBreakdown":
        if times:
            self.parts.append((label, counts.scaled(times)))
        return self

    def extend(self, other: "CostBreakdown") -> "CostBreakdown":
        self.parts.extend(other.parts)
        return self

    def total(self) -> OpCounts:
        return sum_counts(c for _, c in self.parts)

    def by_part(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for label, c in self.parts:
            out[label] = out.get(label, 0) + c.total_mults
        return out


class KernelModel:
    """Closed-form counts of the functional kernels at ring degree n.

    With `of_twiddle` every butterfly also pays one twiddle reconstruction; with
    `of_limb` every plaintext diagonal is regenerated from its q0 limb by an NTT
    over the basis it multiplies.
    """

    def __init__(self, n: int, of_twiddle: bool = False, of_limb: bool = False, word_bytes: int = WORD_BYTES):
        if not is_power_of_two(n) or n < 2:
            raise ParameterError(f"ring degree {n} is not a power of two")
        self.n = n
        self.log_n = int(math.log2(n))
        self.of_twiddle = of_twiddle
        self.of_limb = of_limb
        self.word_bytes = word_bytes

    def ntt(self, limbs: int) -> OpCounts:
        butterflies = limbs * (self.n // 2) * self.log_n
        return OpCounts.of(
            adds=limbs * self.n * self.log_n,
            ntt=butterflies,
            twiddle=butterflies if self.of_twiddle else 0,
        )

    def intt(self, limbs: int) -> OpCounts:
        butterflies = limbs * (self.n // 2) * self.log_n
        return OpCounts.of(
            adds=limbs * self.n * self.log_n,
            intt=butterflies + limbs * self.n // 2,
            twiddle=butterflies if self.of_twiddle else 0,
        )

    def bconv(self, alpha: int, beta: int) -> OpCounts:
        return OpCounts.of(adds=alpha * beta * self.n, bconv=alpha * self.n + alpha * beta * self.n)

    def mod_change(self, alpha: int, beta: int) -> OpCounts:
        if not beta:
            return OpCounts()
        return self.intt(alpha) + self.bconv(alpha, beta) + self.ntt(beta)

    # key switching pieces over a level with l1 limbs and extension width alpha

    def mod_up(self, l1: int, alpha: int) -> OpCounts:
        ext = l1 + alpha
        total = OpCounts.of()
        for start in range(0, l1, alpha):
            size = min(alpha, l1 - start)
            total = total + self.mod_change(size, ext - size)
        total.events["decompose"] += 1
        return total

    def key_mult(self, l1: int, alpha: int) -> OpCounts:
        dnum = -(-l1 // alpha)
        size = dnum * (l1 + alpha) * self.n
        return OpCounts.of(adds=2 * size, keymult=2 * size)

    def mod_down(self, l1: int, alpha: int) -> OpCounts:
        return self.mod_change(alpha, l1) + OpCounts.of(adds=l1 * self.n, moddown=l1 * self.n)

    def key_switch(self, l1: int, alpha: int) -> OpCounts:
        out = self.mod_up(l1, alpha) + self.key_mult(l1, alpha) + self.mod_down(l1, alpha).scaled(2)
        out.events["keyswitch"] += 1
        return out

    def rotation(self, l1: int, alpha: int) -> OpCounts:
        out = self.key_switch(l1, alpha)
        out.events["rotation"] += 1
        return out

    def rescale_poly(self, l1: int) -> OpCounts:
        if l1 < 2:
            raise ParameterError("cannot rescale a single-limb polynomial")
        lower = l1 - 1
        return self.intt(1) + self.ntt(lower) + OpCounts.of(adds=lower * self.n, rescale=lower * self.n)

    def rescale(self, l1: int) -> OpCounts:
        return self.rescale_poly(l1).scaled(2)

    def lift(self, l1: int) -> OpCounts:
        return OpCounts.of(lift=l1 * self.n)

    def fused_moddown_rescale(self, l1: int, alpha: int) -> OpCounts:
        if l1 < 2:
            raise ParameterError("cannot rescale a single-limb polynomial")
        lower = l1 - 1
        return (
            self.intt(alpha) + self.bconv(alpha, l1) + self.intt(1)
            + OpCounts.of(adds=l1 * self.n, moddown=self.n + lower * self.n)
            + self.ntt(lower)
            + OpCounts.of(rescale=lower * self.n)
        )

    def h_mult(self, l1: int, alpha: int, fuse_moddown: bool = True) -> OpCounts:
        tensor = OpCounts.of(adds=l1 * self.n, tensor=4 * l1 * self.n)
        ks = self.mod_up(l1, alpha) + self.key_mult(l1, alpha)
        ks.events["keyswitch"] += 1
        if fuse_moddown:
            tail = self.lift(l1).scaled(2) + self.fused_moddown_rescale(l1, alpha).scaled(2)
        else:
            tail = self.mod_down(l1, alpha).scaled(2) + self.rescale(l1)
        return tensor + ks + tail

    def diag_mult(self, limbs: int) -> OpCounts:
        """One plaintext diagonal times a ciphertext over `limbs` limbs, with OF-Limb when enabled."""
        out = OpCounts.of(adds=2 * limbs * self.n, diagmult=2 * limbs * self.n)
        if self.of_limb:
            out = out + self.ntt(limbs)
        return out

    # -- whole matrix-vector products ---------------------------------------------

    def diagonal_bytes(self, count: int, limbs: int) -> int:
        per = self.n if self.of_limb else limbs * self.n
        return count * per * self.word_bytes

    def key_bytes(self, l1: int, alpha: int) -> int:
        """One switching key with its a-halves regenerated on chip: dnum * K * N words."""
        return -(-l1 // alpha) * (l1 + alpha) * self.n * self.word_bytes

    def ct_bytes(self, l1: int) -> int:
        return 2 * l1 * self.n * self.word_bytes + 2 * (l1 - 1) * self.n * self.word_bytes

    def matvec(self, plan: BsgsPlan, l1: int, alpha: int, mode: HoistingMode) -> CostBreakdown:
        """Cost of a BSGS matvec, mirroring matvec_bsgs step for step."""
        mode = effective_mode(plan, mode)
        babies, giants = len(plan.baby_steps()), len(plan.giant_steps())
        ext = l1 + alpha
        mod_up, key_mult, mod_down = self.mod_up(l1, alpha), self.key_mult(l1, alpha), self.mod_down(l1, alpha)
        cost = CostBreakdown()
        events = Counter(rotation=babies + giants)
        if mode is HoistingMode.DH:
            cost.add("modup", mod_up)
            cost.add("lift", self.lift(l1), 2)
            cost.add("keymult", key_mult, babies)
            cost.add("diagmult", self.diag_mult(ext), plan.n)
            cost.add("giant", mod_down + mod_up + key_mult, giants)
            cost.add("moddown", mod_down, 2)
            events.update(keyswitch=giants, decompose=1 + giants)
        else:
            hoisted = mode is HoistingMode.SH
            cost.add("modup", mod_up, (1 if babies else 0) if hoisted else babies)
            cost.add("keymult", key_mult, babies)
            cost.add("moddown", mod_down, 2 * babies)
            cost.add("diagmult", self.diag_mult(l1), plan.n)
            cost.add("giant", mod_up + key_mult + mod_down.scaled(2), giants)
            events.update(
                keyswitch=giants if hoisted else babies + giants,
                decompose=(1 if babies else 0) + giants if hoisted else babies + giants,
            )
        cost.add("rescale", self.rescale(l1))
        keys = (babies + giants) * self.key_bytes(l1, alpha)
        io = OpCounts().with_dram(
            keys=keys,
            diagonals=self.diagonal_bytes(plan.n, ext if mode is HoistingMode.DH else l1),
            ct_io=self.ct_bytes(l1),
        )
        for part in cost.parts:
            part[1].events.clear()
        io.events = events
        cost.add("io", io)
        return cost


def effective_mode(plan: BsgsPlan, mode: HoistingMode) -> HoistingMode:
    """Double hoisting with no baby-step rotations runs as single hoisting."""
    mode = HoistingMode(mode)
    if mode is HoistingMode.DH and not plan.baby_steps():
        return HoistingMode.SH
    return mode


def dense_plan(d: int, n1: int, n2: int) -> BsgsPlan:
    """Plan of a matrix whose first d generalized diagonals are all nonzero."""
    if d > n1 * n2:
        raise ParameterError(f"{d} diagonals do not fit an n1*n2={n1 * n2} grid")
    return BsgsPlan(n1, n2, tuple(range(d)))


def model_for(params: ParameterSet, of_twiddle: bool = True, of_limb: bool = True) -> KernelModel:
    return KernelModel(params.n, of_twiddle=of_twiddle, of_limb=of_limb)


def matvec_cost(params: ParameterSet, plan: BsgsPlan, level: int, mode: HoistingMode,
                of_twiddle: bool = True, of_limb: bool = True) -> CostBreakdown:
    model = model_for(params, of_twiddle, of_limb)
    return model.matvec(plan, params.limb_count(level), params.alpha_at(level), mode)


def kernel_breakdown(params: ParameterSet, plan: BsgsPlan, level: int, mode: HoistingMode,
                     of_twiddle: bool = True, of_limb: bool = True) -> Dict[str, int]:
    """Mults per algorithm stage: DiagMult (OF-Limb included), ModUp, KeyMult, ModDown, Decompose, Rescale.

    Giant-step rotations are folded into their stages. Decompose is a pure limb
    regrouping and always reports zero.
    """
    model = model_for(params, of_twiddle, of_limb)
    l1, alpha = params.limb_count(level), params.alpha_at(level)
    mode = effective_mode(plan, mode)
    giants = len(plan.giant_steps())
    out = {"diagmult": 0, "modup": 0, "keymult": 0, "moddown": 0, "decompose": 0, "rescale": 0, "lift": 0}
    for label, part in model.matvec(plan, l1, alpha, mode).parts:
        if label in out:
            out[label] += part.total_mults
    out["modup"] += giants * model.mod_up(l1, alpha).total_mults
    out["keymult"] += giants * model.key_mult(l1, alpha).total_mults
    moddowns = 1 if mode is HoistingMode.DH else 2
    out["moddown"] += giants * moddowns * model.mod_down(l1, alpha).total_mults
    return out


def count_ops(params: ParameterSet, op: Dict, of_twiddle: bool = True, of_limb: bool = True) -> OpCounts:
    """Counts of one workload op descriptor ({"op": "matvec" | "keyswitch" | "hmult" | "hadd" | "boot_marker", ...})."""
    kind = op.get("op")
    model = model_for(params, of_twiddle, of_limb)
    if kind == "boot_marker":
        return OpCounts()
    level = int(op.get("level", params.max_level))
    l1, alpha = params.limb_count(level), params.alpha_at(level)
    if kind == "matvec":
        plan = op.get("plan") or dense_plan(int(op["d"]), int(op["n1"]), int(op["n2"]))
        return model.matvec(plan, l1, alpha, HoistingMode(op.get("mode", "dh"))).total()
    if kind == "keyswitch":
        return model.key_switch(l1, alpha).with_dram(keys=model.key_bytes(l1, alpha))
    if kind == "hmult":
        fused = bool(op.get("fuse_moddown", True))
        ct_io = model.ct_bytes(l1) + 2 * l1 * params.n * model.word_bytes  # two operands in, one product out
        return model.h_mult(l1, alpha, fused).with_dram(keys=model.key_bytes(l1, alpha), ct_io=ct_io)
    if kind == "hadd":
        return OpCounts.of(adds=2 * l1 * params.n)
    raise PerfModelError(f"unknown op kind {kind!r}")


# -- storage --------------------------------------------------------------------------------

@dataclass(frozen=True)
class StorageReport:
    twiddle_full: int
    twiddle_decomposed: int
    mdc_buffers: int
    decompose: int
    key_sram: int
    partials: int

    def as_dict(self, unit: int = 2**20) -> Dict[str, float]:
        return {
            "twiddle_full_mb": self.twiddle_full / unit,
            "twiddle_decomposed_mb": self.twiddle_decomposed / unit,
            "mdc_buffers_mb": self.mdc_buffers / unit,
            "decompose_mb": self.decompose / unit,
            "key_sram_mb": self.key_sram / unit,
            "partials_mb": self.partials / unit,
        }


def mdc_buffer_bytes(mdc: MdcConfig, n: int, instances: int = 2, word_bits: int = 40, limbs: Optional[int] = None) -> int:
    if n <= mdc.p:
        return 0
    return instances * mdc.buffer_slots(n, limbs) * word_bits // 8


def storage_report(chip: "ChipConfig", params: ParameterSet, level: Optional[int] = None,
                   n2: Optional[int] = None) -> StorageReport:
    level = params.max_level if level is None else level
    n = params.n
    word = chip.word_bits // 8
    twiddles = storage_bytes(n, chip.mdc.interleave_factor, chip.word_bits, sharing_groups=chip.mdc_instances)
    l1, alpha = params.limb_count(level), params.alpha_at(level)
    ext = l1 + alpha
    dnum = -(-l1 // alpha)
    n2 = chip.n2_cap if n2 is None else n2
    return StorageReport(
        twiddle_full=twiddles.full_bytes,
        twiddle_decomposed=twiddles.decomposed_bytes,
        mdc_buffers=mdc_buffer_bytes(chip.mdc, n, chip.mdc_instances, chip.word_bits),
        decompose=dnum * ext * n * word,
        key_sram=2 * dnum * ext * n * word,
        partials=n2 * 2 * ext * n * word,
    )


# -- roofline ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class RooflinePoint:
    workload: str
    bw: float
    intensity: float
    achieved: float
    peak: float
    bw_bound: float

    @property
    def utilization(self) -> float:
        return self.achieved / self.peak

    @property
    def ridge(self) -> float:
        return self.peak / self.bw

    def as_row(self) -> Dict:
        return {
            "workload": self.workload,
            "bw": self.bw,
            "intensity": self.intensity,
            "achieved": self.achieved,
            "peak": self.peak,
            "utilization": self.utilization,
        }


def roofline(counts: OpCounts, chip: "ChipConfig", cycles: int, workload: str = "") -> RooflinePoint:
    """Roofline coordinates of a run; adds are excluded from the intensity."""
    mults = counts.total_mults
    if cycles <= 0 or mults <= 0:
        raise PerfModelError("roofline needs a run with positive cycles and mults")
    dram = counts.total_dram
    bw = chip.dram_bw_bytes_per_s
    peak = chip.multiplier_count * chip.clock_hz
    achieved = mults * chip.clock_hz / cycles
    if dram:
        intensity = mults / dram
        bw_bound = intensity * bw
    else:
        intensity = math.inf
        bw_bound = math.inf
    # tolerance covers float division only; cycles are integers
    if achieved > min(peak, bw_bound) * (1 + 1e-9):
        raise PerfModelError(
            f"{workload or 'run'}: achieved {achieved:.4g} mult/s exceeds min(peak {peak:.4g}, bw bound {bw_bound:.4g})"
        )
    point = RooflinePoint(workload, bw, intensity, achieved, peak, bw_bound)
    logger.debug("roofline %s intensity=%.3f utilization=%.3f", workload, intensity, point.utilization)
    return point


# -- amortized metrics ------------------------------------------------------------------------

def _exact(value: Number) -> Fraction:
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


@dataclass(frozen=True)
class AmortizedMetrics:
    t_mxv_as: Optional[Fraction]
    t_mult_as: Optional[Fraction]

    def as_dict(self) -> Dict[str, Optional[float]]:
        return {
            "t_mxv_as_s": None if self.t_mxv_as is None else float(self.t_mxv_as),
            "t_mult_as_s": None if self.t_mult_as is None else float(self.t_mult_as),
        }


def amortized_per_slot(t_boot: Number, per_level: Sequence[Number], usable_levels: int, n: int) -> Fraction:
    """(T_boot + sum of per-level times) / (L - L_boot) * 2/N, exactly."""
    if usable_levels < 1:
        raise PerfModelError("need at least one level between bootstraps")
    if n < 2:
        raise PerfModelError(f"ring degree {n} too small")
    total = _exact(t_boot) + sum((_exact(t) for t in per_level), Fraction(0))
    return total / usable_levels * Fraction(2, n)


def amortized_metrics(t_boot: Number, n: int, usable_levels: int,
                      matvec_times: Optional[Sequence[Number]] = None,
                      mult_times: Optional[Sequence[Number]] = None) -> AmortizedMetrics:
    """Bootstrap-amortized per-slot matvec and HMult times, in the input's time unit."""
    mxv = None if matvec_times is None else amortized_per_slot(t_boot, matvec_times, usable_levels, n)
    mult = None if mult_times is None else amortized_per_slot(t_boot, mult_times, usable_levels, n)
    return AmortizedMetrics(mxv, mult)
