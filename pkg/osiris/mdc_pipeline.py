"""p-parallel radix-2 multi-delay-commutator (MDC) NTT unit.

Chunks of p lanes stream through log2(N) butterfly stages. Stages whose pairs sit
in different chunks hold the first chunk of each pair in a delay line; stages whose
pairs share a chunk butterfly across lanes. Every butterfly rebuilds its twiddle
from a coarse and a fine table per modulus.
"""
import logging
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Deque, List, Optional, Sequence, Tuple

import numpy as np

from . import counters
from .errors import ParameterError, RepresentationError, SimulationError
from .poly import (
    InterleavedStream,
    LimbMatrix,
    Order,
    Rep,
    StreamChunk,
    chunk_positions,
    from_interleaved,
    to_interleaved,
)
from .rns_core import PrimeModulus, is_power_of_two

logger = logging.getLogger(__name__)

WORD_BYTES = 5


class Direction(str, Enum):
    FWD = "fwd"
    INV = "inv"
    BIDIRECTIONAL = "bidirectional"


class MdcOp(str, Enum):
    BUTTERFLY = "butterfly"
    TWIDDLE_GEN = "twiddle_gen"
    COMMUTE = "commute"


@dataclass(frozen=True)
class MdcEvent:
    cycle: int
    stage: int
    lane: int
    op: MdcOp
    width: int = 1
    unit: str = "mdc"


@dataclass(frozen=True)
class MdcConfig:
    p: int = 512
    s: int = 16
    interleave_factor: int = 42
    butterfly_pipeline_depth: int = 2
    direction: Direction = Direction.BIDIRECTIONAL
    lanes_per_twiddle_group: int = 16

    def __post_init__(self):
        if self.p < 2 or not is_power_of_two(self.p):
            raise ParameterError(f"lane width {self.p} must be a power of two >= 2")
        if (1 << self.s) < self.p:
            raise ParameterError(f"2^{self.s} points cannot fill {self.p} lanes")
        if self.interleave_factor < 1:
            raise ParameterError("interleave factor must be positive")

    @property
    def n_max(self) -> int:
        return 1 << self.s

    def skip_stages(self, n_actual: int) -> int:
        return skip_stages(n_actual, self.s)

    def buffer_slots(self, n: int, limbs: Optional[int] = None) -> int:
        """Commutator slots for ring degree n, scaled by the interleaved limb count."""
        m = self.interleave_factor if limbs is None else limbs
        return (n - self.p) * m

    def stage_buffers(self, n: int, limbs: Optional[int] = None) -> List[int]:
        """Per-stage delay-line slots: N/2^k * m for k = 1..log2(N/p)."""
        m = self.interleave_factor if limbs is None else limbs
        return [(n >> k) * m for k in range(1, int(math.log2(n // self.p)) + 1)]

    def fill_latency(self, n: int, limbs: int) -> int:
        return (n - self.p) // self.p * limbs + int(math.log2(n)) * self.butterfly_pipeline_depth

    def cycle_count(self, n: int, limbs: int) -> int:
        return self.fill_latency(n, limbs) + limbs * (n // self.p)

    def buffer_bytes(self, n: int, word_bytes: int = WORD_BYTES) -> int:
        return self.buffer_slots(n) * word_bytes


def skip_stages(n_actual: int, s: int) -> int:
    if not is_power_of_two(n_actual) or n_actual < 2:
        raise ParameterError(f"ring degree {n_actual} is not a power of two")
    if n_actual > (1 << s):
        raise ParameterError(f"N={n_actual} exceeds the {s}-stage pipeline")
    return s - int(math.log2(n_actual))


# -- twiddle generation -----------------------------------------------------------

@dataclass(frozen=True)
class TwiddleTables:
    modulus: int
    n: int
    coarse: Tuple[int, ...]
    fine: Tuple[int, ...]

    @classmethod
    def build(cls, modulus: PrimeModulus, n: int) -> "TwiddleTables":
        return _tables(modulus, n)

    def lookup(self, k: int) -> int:
        """psi^k for the primitive 2N-th root psi, as coarse[k div F] * fine[k mod F]."""
        k %= 2 * self.n
        negate = k >= self.n
        k %= self.n
        f = len(self.fine)
        value = self.coarse[k // f] * self.fine[k % f] % self.modulus
        return (self.modulus - value) % self.modulus if negate else value

    def lookup_many(self, ks: np.ndarray) -> np.ndarray:
        ks = np.asarray(ks, dtype=np.int64) % (2 * self.n)
        negate = ks >= self.n
        ks = ks % self.n
        f = len(self.fine)
        coarse = np.array(self.coarse, dtype=object)[ks // f]
        fine = np.array(self.fine, dtype=object)[ks % f]
        values = coarse * fine % self.modulus
        return np.where(negate & (values != 0), self.modulus - values, values)


@lru_cache(maxsize=None)
def _tables(modulus: PrimeModulus, n: int) -> TwiddleTables:
    psi = modulus.root_for(n)
    q = modulus.value
    fine_size = 1 << ((int(math.log2(n)) + 1) // 2)
    coarse_size = n // fine_size
    fine = [1] * fine_size
    for i in range(1, fine_size):
        fine[i] = fine[i - 1] * psi % q
    step = pow(psi, fine_size, q)
    coarse = [1] * coarse_size
    for i in range(1, coarse_size):
        coarse[i] = coarse[i - 1] * step % q
    return TwiddleTables(q, n, tuple(coarse), tuple(fine))


def twiddle_lookup(k: int, modulus: int, tables: TwiddleTables) -> int:
    if tables.modulus != modulus:
        raise ParameterError(f"tables belong to modulus {tables.modulus}, not {modulus}")
    counters.record("twiddle", 1)
    return tables.lookup(k)


@dataclass(frozen=True)
class TwiddleStorage:
    full_bytes: int
    decomposed_bytes: int

    @property
    def full_mb(self) -> float:
        return self.full_bytes / 2**20

    @property
    def decomposed_mb(self) -> float:
        return self.decomposed_bytes / 2**20

    @property
    def reduction(self) -> float:
        return self.full_bytes / self.decomposed_bytes


def storage_bytes(n: int, moduli: int, word_bits: int = 40, sharing_groups: int = 2) -> TwiddleStorage:
    """Full tables hold N words per modulus; decomposed tables hold 2*sqrt(N), once per group."""
    full = n * moduli * word_bits // 8
    decomposed = 2 * math.isqrt(n) * moduli * word_bits // 8 * sharing_groups
    return TwiddleStorage(full, decomposed)


# -- streaming simulation ------------------------------------------------------------

@dataclass
class MdcResult:
    stream: InterleavedStream
    cycle_count: int
    fill_latency: int
    peak_occupancy: int
    events: List[MdcEvent] = field(default_factory=list)


class _Pass:
    """One pass of an interleaved stream through the butterfly stages."""

    def __init__(self, config: "MdcConfig", stream: InterleavedStream, inverse: bool, trace: bool):
        self.n, self.p, self.inverse, self.trace = stream.n, config.p, inverse, trace
        self.depth = config.butterfly_pipeline_depth
        self.moduli = [m.value for m in stream.basis]
        self.tables = [_tables(m, config.n_max) for m in stream.basis]
        self.stride = config.n_max // stream.n
        self.events: List[MdcEvent] = []
        self.occupancy: Counter = Counter()

    def _emit(self, cycle: int, stage: int, op: MdcOp, width: int) -> None:
        if self.trace:
            self.events.append(MdcEvent(cycle, stage, 0, op, width))

    def butterfly(self, x: np.ndarray, y: np.ndarray, lower: np.ndarray, m: int, limb: int,
                  cycle: int, stage: int) -> Tuple[np.ndarray, np.ndarray]:
        """Radix-2 butterflies on lane pairs; `lower` holds the ring positions of x, y sits m above."""
        n, q = self.n, self.moduli[limb]
        exps = (n // (2 * m)) * (2 * (lower % m) + 1)
        if self.inverse:
            exps = (2 * n - exps) % (2 * n)
        w = self.tables[limb].lookup_many(exps * self.stride)
        width = len(lower)
        counters.record("twiddle", width)
        self._emit(cycle, stage, MdcOp.TWIDDLE_GEN, width)
        self._emit(cycle + self.depth - 1, stage, MdcOp.BUTTERFLY, width)
        if not self.inverse:
            v = y * w % q
            counters.record("ntt", width)
            return (x + v) % q, (x - v) % q
        s, d = (x + y) % q, (x - y) * w % q
        if m == 1:
            # N^-1 folded into the last inverse stage
            n_inv = pow(n, -1, q)
            counters.record("intt", 2 * width)
            return s * n_inv % q, d * n_inv % q
        counters.record("intt", width)
        return s, d

    def delay_stage(self, chunks: Sequence[StreamChunk], m: int, delay: int, stage: int,
                    start: int) -> List[StreamChunk]:
        """Pairs chunks `delay` slots apart through one delay line; the output lags the input by `delay`.

        The commutator sends the first chunk of every pair into the line. When its partner
        arrives the butterfly fires: the lower result leaves at once and the upper result
        takes the partner's place in the line, leaving `delay` slots later.
        """
        if delay < 1:
            raise SimulationError(f"stage {stage} pairs chunks across time but has no delay line")
        line: Deque[StreamChunk] = deque()
        out: List[StreamChunk] = []
        total = len(chunks)
        for t in range(total + delay):
            cycle = start + t
            x = chunks[t] if t < total else None
            if x is not None and (t // delay) & 1:
                if not line:
                    raise SimulationError(f"stage {stage} delay line ran dry at cycle {cycle}")
                held = line.popleft()
                if held.limb_index != x.limb_index:
                    raise SimulationError(f"stage {stage} paired limbs {held.limb_index} and {x.limb_index}")
                lower = chunk_positions(self.n, self.p, held.chunk_index)
                u, v = self.butterfly(held.values, x.values, lower, m, x.limb_index, cycle, stage)
                out.append(StreamChunk(held.limb_index, held.chunk_index, u))
                line.append(StreamChunk(x.limb_index, x.chunk_index, v))
            else:
                if t >= delay:
                    if not line:
                        raise SimulationError(f"stage {stage} delay line ran dry at cycle {cycle}")
                    out.append(line.popleft())
                if x is not None:
                    line.append(x)
                    self._emit(cycle, stage, MdcOp.COMMUTE, self.p)
            if len(line) > delay:
                raise SimulationError(f"stage {stage} delay line overflow at cycle {cycle}")
            self.occupancy[cycle] += len(line) * self.p
        if len(out) != total:
            raise SimulationError(f"stage {stage} emitted {len(out)} of {total} chunks")
        return out

    def lane_stage(self, chunks: Sequence[StreamChunk], m: int, stage: int, start: int) -> List[StreamChunk]:
        """Pairs that sit in one chunk, m/(N/p) lanes apart; one chunk per cycle."""
        span = m // (self.n // self.p)
        lanes = np.arange(self.p)
        lo = lanes[(lanes // span) % 2 == 0]
        hi = lo + span
        out: List[StreamChunk] = []
        for t, c in enumerate(chunks):
            lower = chunk_positions(self.n, self.p, c.chunk_index)[lo]
            u, v = self.butterfly(c.values[lo], c.values[hi], lower, m, c.limb_index, start + t, stage)
            values = np.empty(self.p, dtype=object)
            values[lo], values[hi] = u, v
            out.append(StreamChunk(c.limb_index, c.chunk_index, values))
        return out


class MdcPipeline:
    def __init__(self, config: Optional[MdcConfig] = None, trace: bool = False):
        self.config = config or MdcConfig()
        self.trace = trace

    def _check(self, stream: InterleavedStream) -> None:
        cfg = self.config
        if stream.p != cfg.p:
            raise SimulationError(f"stream lane width {stream.p} differs from the unit's p={cfg.p}")
        if stream.limbs > cfg.interleave_factor:
            raise SimulationError(
                f"{stream.limbs} interleaved limbs exceed the buffer interleave factor {cfg.interleave_factor}"
            )
        if stream.n > cfg.n_max:
            raise ParameterError(f"N={stream.n} exceeds the {cfg.s}-stage pipeline")

    def stages(self, n: int, limbs: int, inverse: bool) -> List[Tuple[int, int]]:
        """(butterfly half-size, delay-line chunks) per stage in pass order; 0 for in-chunk stages."""
        cfg = self.config
        delays = [slots // cfg.p for slots in cfg.stage_buffers(n, limbs)]
        halves = [1 << b for b in range(int(math.log2(n)))]
        if inverse:
            halves.reverse()
        else:
            delays.reverse()
        lines = iter(delays)
        return [(m, next(lines, 0) if m < n // cfg.p else 0) for m in halves]

    def _run(self, stream: InterleavedStream, inverse: bool) -> MdcResult:
        self._check(stream)
        expected_rep = Rep.EVAL if inverse else Rep.COEFF
        expected_order = Order.NATURAL if inverse else Order.BIT_REVERSED
        if stream.rep is not expected_rep or stream.order is not expected_order:
            raise RepresentationError(
                f"{'inverse' if inverse else 'forward'} pass expects {expected_rep.value}/{expected_order.value} input"
            )
        cfg = self.config
        n, limbs = stream.n, stream.limbs
        state = _Pass(cfg, stream, inverse, self.trace)
        chunks: List[StreamChunk] = list(stream.chunks)
        start = 0
        for stage, (m, delay) in enumerate(self.stages(n, limbs, inverse)):
            if m < n // cfg.p:
                chunks = state.delay_stage(chunks, m, delay, stage, start)
            else:
                chunks = state.lane_stage(chunks, m, stage, start)
            start += delay + cfg.butterfly_pipeline_depth
        fill = start
        cycles = fill + len(chunks)
        peak = max(state.occupancy.values(), default=0)
        if peak > cfg.buffer_slots(n):
            raise SimulationError(f"buffer occupancy {peak} exceeds {cfg.buffer_slots(n)} slots")
        out = InterleavedStream(
            tuple(chunks), n, stream.p, stream.basis,
            Rep.COEFF if inverse else Rep.EVAL,
            Order.BIT_REVERSED if inverse else Order.NATURAL,
        )
        events = sorted(state.events, key=lambda e: (e.cycle, e.stage))
        logger.debug(
            "mdc %s N=%d limbs=%d skipped=%d fill=%d cycles=%d peak=%d",
            "intt" if inverse else "ntt", n, limbs, cfg.skip_stages(n), fill, cycles, peak,
        )
        return MdcResult(out, cycles, fill, peak, events)

    def run_intt(self, stream: InterleavedStream) -> MdcResult:
        """Natural evaluations in, bit-reversed coefficients out, same (limb, chunk) schedule."""
        return self._run(stream, inverse=True)

    def run_ntt(self, stream: InterleavedStream) -> MdcResult:
        """Bit-reversed coefficients in, natural evaluations out."""
        return self._run(stream, inverse=False)

    def run_bidirectional(self, forward: InterleavedStream, inverse: InterleavedStream) -> Tuple[MdcResult, MdcResult, int]:
        """Both directions active at once; each is charged independently, the window is the longer one."""
        if self.config.direction is not Direction.BIDIRECTIONAL:
            raise SimulationError("unit is not configured for bidirectional operation")
        fwd = self.run_ntt(forward)
        inv = self.run_intt(inverse)
        return fwd, inv, max(fwd.cycle_count, inv.cycle_count)


def run_intt(stream: InterleavedStream, config: Optional[MdcConfig] = None) -> MdcResult:
    return MdcPipeline(config).run_intt(stream)


def run_ntt(stream: InterleavedStream, config: Optional[MdcConfig] = None) -> MdcResult:
    return MdcPipeline(config).run_ntt(stream)


def limb_throughput(n: int, p: int, limbs: int, cycles: int) -> float:
    """Limbs completed per N/p cycles."""
    return limbs * (n // p) / cycles if cycles else 0.0


def mdc_for(n: int, p: int, limbs: int, **kwargs) -> MdcPipeline:
    """Unit sized for a desk-scale ring: s = log2(N), interleave factor >= limbs."""
    factor = max(limbs, kwargs.pop("interleave_factor", limbs))
    return MdcPipeline(MdcConfig(p=p, s=int(math.log2(n)), interleave_factor=factor, **kwargs))


def poly_through_mdc(poly: LimbMatrix, pipeline: MdcPipeline, inverse: bool) -> Tuple[LimbMatrix, int]:
    stream = to_interleaved(poly, pipeline.config.p)
    result = pipeline.run_intt(stream) if inverse else pipeline.run_ntt(stream)
    return from_interleaved(result.stream), result.cycle_count
