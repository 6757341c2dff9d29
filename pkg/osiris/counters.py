"""Instrumented modular-multiplication counters.

Kernels call :func:`record` with the number of modular multiplications they just
executed. Counting is only active inside a :func:`counting` block, and the active
counter lives in a context variable so sweep workers never see each other's counts.
"""
from collections import Counter
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Dict, Iterator, Optional

KERNELS = (
    "ntt", "intt", "bconv", "keymult", "diagmult", "rescale",
    "moddown", "lift", "tensor", "twiddle",
)


class MultCounter:
    def __init__(self) -> None:
        self.mults: Counter = Counter()
        self.events: Counter = Counter()

    def record(self, kernel: str, count: int) -> None:
        self.mults[kernel] += int(count)

    def tally(self, event: str, count: int = 1) -> None:
        self.events[event] += int(count)

    @property
    def total(self) -> int:
        return sum(self.mults.values())

    def as_dict(self) -> Dict[str, int]:
        return {k: int(self.mults.get(k, 0)) for k in KERNELS}

    def __repr__(self) -> str:
        return f"MultCounter(total={self.total}, events={dict(self.events)})"


_active: ContextVar[Optional[MultCounter]] = ContextVar("osiris_mult_counter", default=None)


def record(kernel: str, count: int) -> None:
    counter = _active.get()
    if counter is not None:
        counter.record(kernel, count)


def tally(event: str, count: int = 1) -> None:
    counter = _active.get()
    if counter is not None:
        counter.tally(event, count)


@contextmanager
def counting() -> Iterator[MultCounter]:
    counter = MultCounter()
    token = _active.set(counter)
    try:
        yield counter
    finally:
        _active.reset(token)


@contextmanager
def suspended() -> Iterator[None]:
    """Run a block without recording into the active counter."""
    token = _active.set(None)
    try:
        yield
    finally:
        _active.reset(token)
