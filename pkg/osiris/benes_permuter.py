"""Automorphism unit built on a p-to-p Benes network.

An automorphism maps every stride-N/p class of indices onto a single class, so a
streamed limb can be permuted one p-wide chunk per cycle: the network shuffles
lanes inside a chunk and the output buffer writes it to its destination chunk.
"""
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import counters
from .errors import ParameterError, RepresentationError, RoutingError
from .poly import (
    InterleavedStream,
    Order,
    Rep,
    automorphism_map,
    eval_automorphism_map,
    stream_from_chunks,
)
from .rns_core import is_power_of_two

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenesRouting:
    """Switch settings of a size-n Benes network; True means the switch is crossed."""

    size: int
    input_switches: Tuple[bool, ...]
    output_switches: Tuple[bool, ...] = ()
    upper: Optional["BenesRouting"] = None
    lower: Optional["BenesRouting"] = None

    @property
    def stages(self) -> int:
        return 2 * int(math.log2(self.size)) - 1

    def simulate(self, values: Sequence) -> List:
        if len(values) != self.size:
            raise RoutingError(f"network of size {self.size} fed {len(values)} values")
        if self.size == 2:
            return [values[1], values[0]] if self.input_switches[0] else [values[0], values[1]]
        half = self.size // 2
        up_in, low_in = [None] * half, [None] * half
        for a in range(half):
            x0, x1 = values[2 * a], values[2 * a + 1]
            if self.input_switches[a]:
                x0, x1 = x1, x0
            up_in[a], low_in[a] = x0, x1
        up_out = self.upper.simulate(up_in)
        low_out = self.lower.simulate(low_in)
        out = [None] * self.size
        for b in range(half):
            y0, y1 = up_out[b], low_out[b]
            if self.output_switches[b]:
                y0, y1 = y1, y0
            out[2 * b], out[2 * b + 1] = y0, y1
        return out

    @cached_property
    def gather(self) -> np.ndarray:
        """Source lane of every output lane, found by pushing lane indices through the switches."""
        return np.array(self.simulate(list(range(self.size))), dtype=np.int64)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values)[self.gather]

    def crossed_count(self) -> int:
        total = sum(self.input_switches) + sum(self.output_switches)
        if self.upper is not None:
            total += self.upper.crossed_count() + self.lower.crossed_count()
        return total


def route_benes(perm: Sequence[int]) -> BenesRouting:
    """Looping-algorithm routing; input i is delivered to output perm[i]."""
    perm = [int(x) for x in perm]
    n = len(perm)
    if n < 2 or not is_power_of_two(n):
        raise RoutingError(f"network size {n} is not a power of two >= 2")
    if sorted(perm) != list(range(n)):
        raise RoutingError("routing input is not a permutation")
    if n == 2:
        return BenesRouting(2, (perm[0] == 1,))

    inv = [0] * n
    for i, d in enumerate(perm):
        inv[d] = i
    side = [-1] * n
    for start in range(0, n, 2):
        if side[start] != -1:
            continue
        i, s = start, 0
        while side[i] == -1:
            side[i], side[i ^ 1] = s, 1 - s
            i = inv[perm[i ^ 1] ^ 1]

    half = n // 2
    upper, lower = [0] * half, [0] * half
    for i in range(n):
        (upper if side[i] == 0 else lower)[i // 2] = perm[i] // 2
    return BenesRouting(
        n,
        tuple(side[2 * a] == 1 for a in range(half)),
        tuple(side[inv[2 * b]] == 1 for b in range(half)),
        route_benes(upper),
        route_benes(lower),
    )


@dataclass(frozen=True)
class AutomorphismPlan:
    r: int
    n: int
    p: int
    chunk_dest: Tuple[int, ...]
    routings: Tuple[BenesRouting, ...]
    index_map: str = "exact"

    @property
    def network_depth(self) -> int:
        return 2 * int(math.log2(self.p)) - 1

    def cycle_count(self, limbs: int) -> int:
        return limbs * (self.n // self.p) + self.network_depth

    def is_identity(self) -> bool:
        return all(d == c for c, d in enumerate(self.chunk_dest)) and all(
            r.crossed_count() == 0 for r in self.routings
        )


def _scatter_map(r: int, n: int, index_map: str) -> np.ndarray:
    if index_map == "index":
        return automorphism_map(r, n)
    if index_map != "exact":
        raise ParameterError(f"unknown index map {index_map!r}")
    src = eval_automorphism_map(r, n)
    dest = np.empty(n, dtype=np.int64)
    dest[src] = np.arange(n)
    return dest


def plan_automorphism(r: int, n: int, p: int, index_map: str = "exact") -> AutomorphismPlan:
    if p < 2 or not is_power_of_two(p) or n % p:
        raise ParameterError(f"lane width {p} must be a power of two dividing N={n}")
    dest = _scatter_map(r, n, index_map)
    stride = n // p
    chunk_dest, routings = [], []
    for c in range(stride):
        positions = c + stride * np.arange(p)
        targets = dest[positions]
        classes = set(int(t) % stride for t in targets)
        if len(classes) != 1:
            raise RoutingError(f"chunk {c} spreads over {len(classes)} destination chunks under r={r}")
        chunk_dest.append(classes.pop())
        routings.append(route_benes(targets // stride))
    logger.debug("planned automorphism r=%d N=%d p=%d (%s map)", r, n, p, index_map)
    return AutomorphismPlan(r, n, p, tuple(chunk_dest), tuple(routings), index_map)


def run_automorphism(stream: InterleavedStream, plan: AutomorphismPlan) -> Tuple[InterleavedStream, int]:
    """Permute every limb of the stream chunk by chunk; the (limb, chunk) schedule is preserved."""
    if stream.rep is not Rep.EVAL or stream.order is not Order.NATURAL:
        raise RepresentationError("the automorphism unit consumes natural-order evaluations")
    if (stream.n, stream.p) != (plan.n, plan.p):
        raise ParameterError("stream shape does not match the automorphism plan")
    m = stream.limbs
    out: List[Optional[np.ndarray]] = [None] * len(stream)
    for chunk in stream.chunks:
        c = chunk.chunk_index
        d = plan.chunk_dest[c]
        out[d * m + chunk.limb_index] = plan.routings[c].apply(chunk.values)
    counters.tally("automorphism", m)
    return stream_from_chunks(out, stream), plan.cycle_count(m)
