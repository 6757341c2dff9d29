"""Input-stationary 2D systolic array for base conversion.

Rows hold the alpha source limbs of one p-wide block (one chunk per limb); base
table weights and destination moduli enter skewed, one row per cycle, while
partial sums move down the columns and leave from the bottom row.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import counters
from .ckks_ops import BaseTable
from .errors import BasisMismatchError, RepresentationError, SimulationError
from .poly import InterleavedStream, Rep, stream_from_chunks

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BconvArrayConfig:
    height: int = 16
    width: int = 512
    smac_pipeline_depth: int = 2
    prescale_row: bool = True

    def block_period(self, alpha: int, beta: int) -> int:
        return max(alpha, beta)

    def cycle_count(self, n: int, alpha: int, beta: int) -> int:
        skew_fill = (self.height - 1) + (self.width - 1)
        return skew_fill + (n // self.width) * self.block_period(alpha, beta) + self.smac_pipeline_depth


@dataclass(frozen=True)
class WeightArrival:
    cycle: int
    row: int
    output: int
    weight: int
    modulus: int
    block: int = 0


@dataclass
class WeightFeed:
    """Skewed weight/modulus feed for one conversion: row i sees output j of block k at k*T_b + j + i."""

    period: int
    blocks: int
    arrivals: Dict[Tuple[int, int], WeightArrival] = field(default_factory=dict)

    def at(self, row: int, cycle: int) -> Optional[WeightArrival]:
        return self.arrivals.get((row, cycle))

    def __len__(self) -> int:
        return len(self.arrivals)


def stream_weights(table: BaseTable, blocks: int, row_offsets: Optional[Dict[int, int]] = None) -> WeightFeed:
    """Build the skewed feed; `row_offsets` shifts a row's arrivals (used to exercise misalignment)."""
    period = max(table.alpha, table.beta)
    row_offsets = row_offsets or {}
    feed = WeightFeed(period, blocks)
    for k in range(blocks):
        for j, q_out in enumerate(table.to_moduli):
            for i in range(table.alpha):
                cycle = k * period + j + i + row_offsets.get(i, 0)
                feed.arrivals[(i, cycle)] = WeightArrival(cycle, i, j, table.weights[i][j], q_out, k)
    return feed


def switch_modulus(x: np.ndarray, q_in: int, q_out: int) -> np.ndarray:
    """Reduce residues mod q_in into [0, q_out) with one conditional subtraction."""
    if q_in >= 2 * q_out:
        raise SimulationError(f"modulus pair {q_in} -> {q_out} needs more than one conditional subtraction")
    return np.where(x >= q_out, x - q_out, x)


@dataclass(frozen=True)
class SmacEvent:
    cycle: int
    stage: int
    lane: int
    op: str
    unit: str = "bconv"


@dataclass
class BconvResult:
    stream: InterleavedStream
    cycle_count: int
    block_period: int
    preload_margin: int
    events: List[SmacEvent] = field(default_factory=list)


class BconvArray:
    def __init__(self, config: Optional[BconvArrayConfig] = None, trace: bool = False):
        self.config = config or BconvArrayConfig()
        self.trace = trace

    def _check(self, stream: InterleavedStream, table: BaseTable) -> None:
        if stream.basis != table.from_basis:
            raise BasisMismatchError("stream basis differs from the base table's source basis")
        if stream.rep is not Rep.COEFF:
            raise RepresentationError("the BConv array consumes coefficient streams")
        if table.alpha > self.config.height:
            raise SimulationError(f"alpha={table.alpha} exceeds the array height {self.config.height}")
        if stream.p != self.config.width:
            raise SimulationError(f"stream lane width {stream.p} differs from the array width {self.config.width}")
        for q_in in table.from_moduli:
            for q_out in table.to_moduli:
                if q_in >= 2 * q_out:
                    raise SimulationError(f"modulus pair {q_in} -> {q_out} violates q < 2q'")

    def run_bconv(self, stream: InterleavedStream, table: BaseTable, feed: Optional[WeightFeed] = None) -> BconvResult:
        self._check(stream, table)
        alpha, beta = table.alpha, table.beta
        blocks = stream.n // stream.p
        period = self.config.block_period(alpha, beta)
        feed = feed or stream_weights(table, blocks)
        prescale = table.prescale
        q_in = table.from_moduli

        outputs: List[np.ndarray] = []
        events: List[SmacEvent] = []
        for k in range(blocks):
            # stationary block k: row i holds limb i's chunk k, prescaled on the way in
            resident = []
            for i in range(alpha):
                chunk = stream.chunks[k * alpha + i]
                x = chunk.values * prescale[i] % q_in[i] if self.config.prescale_row else chunk.values
                resident.append(x)
            counters.record("bconv", alpha * stream.p)
            for j in range(beta):
                psum = np.zeros(stream.p, dtype=object)
                for i in range(alpha):
                    cycle = k * period + j + i
                    arrival = feed.at(i, cycle)
                    if arrival is None:
                        continue
                    q_out = arrival.modulus
                    x = switch_modulus(resident[i], q_in[i], q_out)
                    psum = (psum + arrival.weight * x) % q_out
                    if self.trace:
                        events.append(SmacEvent(cycle, i, 0, "smac"))
                outputs.append(psum % table.to_moduli[j])
            counters.record("bconv", alpha * beta * stream.p)

        preload_margin = self.preload_margin(feed, alpha, beta)
        if preload_margin < 1:
            logger.warning("bconv weight feed leaves its block's residency window (margin %d)", preload_margin)
        cycles = self.config.cycle_count(stream.n, alpha, beta)
        logger.debug("bconv alpha=%d beta=%d blocks=%d period=%d cycles=%d", alpha, beta, blocks, period, cycles)
        out = stream_from_chunks(outputs, stream, basis=table.to_basis)
        return BconvResult(out, cycles, period, preload_margin, sorted(events, key=lambda e: e.cycle))

    def residency(self, row: int, block: int, alpha: int, beta: int) -> Tuple[int, int]:
        """Half-open cycle window during which `block` is stationary in `row`."""
        period = self.config.block_period(alpha, beta)
        return block * period + row, (block + 1) * period + row

    def preload_margin(self, feed: WeightFeed, alpha: int, beta: int) -> int:
        """Worst slack between a row's weight arrivals for a block and that block's residency window.

        Below 1, some weight reaches a row before its block landed or after the next block
        replaced it from the preload register.
        """
        spans: Dict[Tuple[int, int], Tuple[int, int]] = {}
        for a in feed.arrivals.values():
            first, last = spans.get((a.row, a.block), (a.cycle, a.cycle))
            spans[(a.row, a.block)] = (min(first, a.cycle), max(last, a.cycle))
        margins = []
        for (row, block), (first, last) in spans.items():
            start, stop = self.residency(row, block, alpha, beta)
            margins.append(min(stop - last, first - start + 1))
        return min(margins, default=0)

    def preload_cycle(self, row: int, block: int, alpha: int, beta: int) -> int:
        """Cycle at which `block` starts loading into `row`'s preload register."""
        if block == 0:
            return row - self.config.block_period(alpha, beta)
        return (block - 1) * self.config.block_period(alpha, beta) + row


def run_bconv(stream: InterleavedStream, table: BaseTable, config: Optional[BconvArrayConfig] = None) -> BconvResult:
    return BconvArray(config).run_bconv(stream, table)
