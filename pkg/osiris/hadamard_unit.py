"""Pointwise unit: p columns of dnum cells for KeyMult plus diagonal multiply-accumulate."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import counters
from .errors import BasisMismatchError, ParameterError, SimulationError
from .poly import InterleavedStream, LimbMatrix, Rep, from_interleaved, stream_from_chunks, to_interleaved
from .rns_core import PrimeModulus

logger = logging.getLogger(__name__)

KEYMULT = "keymult"
DIAGMULT = "diagmult"


@dataclass(frozen=True)
class HadamardConfig:
    lanes: int = 512
    height: int = 3
    mults_per_cell: int = 4
    keymult_mults: int = 2
    diag_mults: int = 2

    def __post_init__(self):
        if self.keymult_mults + self.diag_mults > self.mults_per_cell:
            raise ParameterError("task split needs more multipliers than a cell has")

    def keymult_cycles(self, n: int, limbs: int) -> int:
        return limbs * (n // self.lanes) + self.height

    def diag_cycles(self, n: int, limbs: int) -> int:
        return limbs * (n // self.lanes) + 1


Accumulator = Tuple[LimbMatrix, LimbMatrix]


@dataclass
class HadamardUnit:
    config: HadamardConfig = field(default_factory=HadamardConfig)
    side: int = 0
    accumulators: Dict[str, Accumulator] = field(default_factory=dict)

    def check_hazard(self, tasks: Sequence[str]) -> int:
        """Multipliers a cell needs for tasks sharing one cycle window; raises past the budget."""
        need = sum(self.config.keymult_mults if t == KEYMULT else self.config.diag_mults for t in tasks)
        if need > self.config.mults_per_cell:
            raise SimulationError(f"structural hazard: {need} multipliers requested, {self.config.mults_per_cell} per cell")
        return need

    def run_keymult(self, digit_streams: Sequence[InterleavedStream],
                    pairs: Sequence[Tuple[LimbMatrix, LimbMatrix]],
                    basis: Sequence[PrimeModulus] = (), n: Optional[int] = None) -> Tuple[InterleavedStream, InterleavedStream, int]:
        """Inner product of dnum raised digits with key digits.

        Each lane is a column of `height` cells. A chunk's partial sums enter the top cell
        and move down one row per cycle; cell row d multiplies digit d with key digit d and
        adds into the partial sums passing through. Rows past the digit count only forward.
        With no digits the result is a pair of zero streams over `basis`.
        """
        height = self.config.height
        if len(digit_streams) > height:
            raise SimulationError(f"{len(digit_streams)} digits exceed the column height {height}")
        if len(digit_streams) != len(pairs):
            raise ParameterError("digit and key-digit counts differ")
        if not digit_streams:
            return self._zero_streams(tuple(basis), n or self.config.lanes)

        first = digit_streams[0]
        if first.p != self.config.lanes:
            raise ParameterError(f"stream width {first.p} does not match {self.config.lanes} lanes")
        for s in digit_streams[1:]:
            if (s.n, s.p, s.basis) != (first.n, first.p, first.basis):
                raise BasisMismatchError("digit streams do not share one schedule")
        keys = []
        for b, a in pairs:
            if b.basis != first.basis or a.basis != first.basis:
                raise BasisMismatchError("key digit is not over the digit basis")
            keys.append((to_interleaved(b, first.p).chunks, to_interleaved(a, first.p).chunks))
        digits = [s.chunks for s in digit_streams]

        total = len(first)
        out0: List[np.ndarray] = [None] * total
        out1: List[np.ndarray] = [None] * total
        column: List[Optional[Tuple[int, np.ndarray, np.ndarray]]] = [None] * height
        zero = np.zeros(first.p, dtype=object)
        cycle = emitted = 0
        while emitted < total:
            leaving = column[-1]
            if leaving is not None:
                t, s0, s1 = leaving
                out0[t], out1[t] = s0, s1
                emitted += 1
            column = [(cycle, zero, zero) if cycle < total else None] + column[:-1]
            for row, slot in enumerate(column[: len(digits)]):
                if slot is None:
                    continue
                t, s0, s1 = slot
                q = first.basis[digits[row][t].limb_index].value
                x = digits[row][t].values
                b_chunks, a_chunks = keys[row]
                column[row] = (t, (s0 + x * b_chunks[t].values) % q, (s1 + x * a_chunks[t].values) % q)
            cycle += 1

        counters.record("keymult", 2 * len(digits) * first.limbs * first.n)
        logger.debug("hadamard[%d] keymult dnum=%d limbs=%d cycles=%d", self.side, len(digits), first.limbs, cycle)
        return stream_from_chunks(out0, first), stream_from_chunks(out1, first), cycle

    def _zero_streams(self, basis: Tuple[PrimeModulus, ...], n: int) -> Tuple[InterleavedStream, InterleavedStream, int]:
        zero = LimbMatrix.zeros(n, basis, Rep.EVAL)
        return to_interleaved(zero, self.config.lanes), to_interleaved(zero, self.config.lanes), 0

    def run_diag_mult_acc(self, c0: InterleavedStream, c1: InterleavedStream, diagonal: InterleavedStream,
                          accumulator: str) -> int:
        """accumulator += (c0, c1) * diagonal, pointwise."""
        x0, x1, d = from_interleaved(c0), from_interleaved(c1), from_interleaved(diagonal)
        p0, p1 = x0 * d, x1 * d
        counters.record("diagmult", 2 * d.data.size)
        held = self.accumulators.get(accumulator)
        self.accumulators[accumulator] = (p0, p1) if held is None else (held[0] + p0, held[1] + p1)
        return self.config.diag_cycles(c0.n, c0.limbs)

    def accumulator(self, name: str) -> Optional[Accumulator]:
        return self.accumulators.get(name)

    def take(self, name: str) -> Accumulator:
        try:
            return self.accumulators.pop(name)
        except KeyError:
            raise SimulationError(f"accumulator {name!r} is empty") from None
