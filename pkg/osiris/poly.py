"""Polynomials as (limbs x N) residue matrices.

Forward NTT is a merged-root decimation-in-time transform that consumes
bit-reversed coefficients and produces natural-order evaluations; the inverse is
the mirrored decimation-in-frequency transform and leaves coefficients in
bit-reversed order. Natural evaluation index j holds a(psi^(2j+1)).
"""
import logging
import struct
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import counters
from .errors import BasisMismatchError, EncodingError, ParameterError, RepresentationError, RoutingError
from .rns_core import (
    PrimeModulus,
    centered,
    crt_constants,
    crt_reconstruct_array,
    is_power_of_two,
    moduli_column,
    vec_mod_add,
    vec_mod_mul,
    vec_mod_neg,
    vec_mod_sub,
    vec_reduce,
)

logger = logging.getLogger(__name__)

TwiddleSource = Callable[[int, bool], np.ndarray]


class Rep(str, Enum):
    COEFF = "coeff"
    EVAL = "eval"


class Order(str, Enum):
    NATURAL = "natural"
    BIT_REVERSED = "bit_reversed"


@lru_cache(maxsize=None)
def bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@dataclass(frozen=True, eq=False)
class LimbMatrix:
    data: np.ndarray
    basis: Tuple[PrimeModulus, ...]
    rep: Rep
    order: Order = Order.NATURAL

    def __post_init__(self):
        data = self.data
        if not isinstance(data, np.ndarray) or data.dtype != object:
            data = np.asarray(data).astype(object)
        if data.ndim != 2 or data.shape[0] != len(self.basis):
            raise ParameterError(f"data shape {data.shape} does not match {len(self.basis)} limbs")
        n = data.shape[1]
        if n < 2 or not is_power_of_two(n):
            raise ParameterError(f"ring degree {n} is not a power of two")
        q = moduli_column(self.moduli)
        if data.size and not (((data >= 0) & (data < q)).all()):
            raise ParameterError("residue out of range for its limb modulus")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "basis", tuple(self.basis))

    @property
    def n(self) -> int:
        return self.data.shape[1]

    @property
    def limbs(self) -> int:
        return self.data.shape[0]

    @property
    def moduli(self) -> Tuple[int, ...]:
        return tuple(m.value for m in self.basis)

    @classmethod
    def zeros(cls, n: int, basis: Sequence[PrimeModulus], rep: Rep, order: Order = Order.NATURAL) -> "LimbMatrix":
        return cls(np.zeros((len(basis), n), dtype=object), tuple(basis), rep, order)

    @classmethod
    def from_integers(cls, coeffs: Sequence[int], basis: Sequence[PrimeModulus]) -> "LimbMatrix":
        """Natural-order coefficient polynomial from (possibly negative) integers."""
        row = np.array([int(c) for c in coeffs], dtype=object)
        data = vec_reduce(np.tile(row, (len(basis), 1)), [m.value for m in basis])
        return cls(data, tuple(basis), Rep.COEFF, Order.NATURAL)

    @classmethod
    def concat(cls, polys: Sequence["LimbMatrix"]) -> "LimbMatrix":
        first = polys[0]
        for p in polys[1:]:
            if (p.rep, p.order, p.n) != (first.rep, first.order, first.n):
                raise RepresentationError("cannot concatenate polynomials with different layouts")
        basis = tuple(m for p in polys for m in p.basis)
        return cls(np.concatenate([p.data for p in polys], axis=0), basis, first.rep, first.order)

    def with_data(self, data: np.ndarray, basis=None, rep=None, order=None) -> "LimbMatrix":
        return LimbMatrix(
            data,
            self.basis if basis is None else tuple(basis),
            self.rep if rep is None else rep,
            self.order if order is None else order,
        )

    def rows(self, start: int, stop: int) -> "LimbMatrix":
        return self.with_data(self.data[start:stop].copy(), basis=self.basis[start:stop])

    def limb(self, i: int) -> "LimbMatrix":
        return self.rows(i, i + 1)

    def select(self, moduli: Sequence[int]) -> "LimbMatrix":
        index = {m.value: i for i, m in enumerate(self.basis)}
        try:
            picks = [index[q] for q in moduli]
        except KeyError as exc:
            raise BasisMismatchError(f"modulus {exc.args[0]} not in polynomial basis") from None
        return self.with_data(self.data[picks].copy(), basis=[self.basis[i] for i in picks])

    def _check_compatible(self, other: "LimbMatrix") -> None:
        if self.basis != other.basis:
            raise BasisMismatchError("operands have different bases")
        if (self.rep, self.order) != (other.rep, other.order):
            raise RepresentationError("operands have different representation or order")

    def __add__(self, other: "LimbMatrix") -> "LimbMatrix":
        self._check_compatible(other)
        return self.with_data(vec_mod_add(self.data, other.data, self.moduli))

    def __sub__(self, other: "LimbMatrix") -> "LimbMatrix":
        self._check_compatible(other)
        return self.with_data(vec_mod_sub(self.data, other.data, self.moduli))

    def __neg__(self) -> "LimbMatrix":
        return self.with_data(vec_mod_neg(self.data, self.moduli))

    def __mul__(self, other: "LimbMatrix") -> "LimbMatrix":
        self._check_compatible(other)
        if self.rep is not Rep.EVAL:
            raise RepresentationError("pointwise products require the evaluation representation")
        return self.with_data(vec_mod_mul(self.data, other.data, self.moduli))

    def scale_rows(self, factors: Sequence[int]) -> "LimbMatrix":
        """Multiply limb i by factors[i] (already reduced mod its modulus)."""
        col = np.array([int(f) for f in factors], dtype=object).reshape(-1, 1)
        return self.with_data(vec_mod_mul(self.data, col, self.moduli))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LimbMatrix):
            return NotImplemented
        return (
            self.basis == other.basis
            and self.rep == other.rep
            and self.order == other.order
            and self.data.shape == other.data.shape
            and bool((self.data == other.data).all())
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"LimbMatrix(N={self.n}, limbs={self.limbs}, rep={self.rep.value}, order={self.order.value})"


# -- NTT ----------------------------------------------------------------------

@lru_cache(maxsize=None)
def _stage_twiddles(q: int, psi: int, n: int, inverse: bool) -> Tuple[Tuple[int, ...], ...]:
    """Twiddles per stage, indexed by log2 of the half-size m: psi^((N/2m)(2j+1)), j < m."""
    powers = [1] * (2 * n)
    for e in range(1, 2 * n):
        powers[e] = powers[e - 1] * psi % q
    stages = []
    m = 1
    while m < n:
        exps = [(n // (2 * m)) * (2 * j + 1) for j in range(m)]
        if inverse:
            exps = [(2 * n - e) % (2 * n) for e in exps]
        stages.append(tuple(powers[e] for e in exps))
        m *= 2
    return tuple(stages)


def _twiddle_rows(basis: Sequence[PrimeModulus], n: int, stage: int, inverse: bool) -> np.ndarray:
    rows = [_stage_twiddles(m.value, m.root_for(n), n, inverse)[stage] for m in basis]
    return np.array(rows, dtype=object)


def ntt_rows(data: np.ndarray, basis: Sequence[PrimeModulus], twiddles: Optional[TwiddleSource] = None) -> np.ndarray:
    """Bit-reversed coefficients -> natural evaluations, row-wise.

    `twiddles(stage, inverse)` may supply the (rows x m) twiddle block of a stage;
    by default it is read from precomputed power tables.
    """
    rows, n = data.shape
    twiddles = twiddles or (lambda stage, inverse: _twiddle_rows(basis, n, stage, inverse))
    moduli = [m.value for m in basis]
    a = data
    m, stage = 1, 0
    while m < n:
        w = twiddles(stage, False)
        blocks = a.reshape(rows, n // (2 * m), 2, m)
        u = blocks[:, :, 0, :]
        v = vec_mod_mul(blocks[:, :, 1, :], w[:, None, :], moduli)
        a = np.stack([vec_mod_add(u, v, moduli), vec_mod_sub(u, v, moduli)], axis=2).reshape(rows, n)
        counters.record("ntt", rows * n // 2)
        m, stage = m * 2, stage + 1
    return a


def intt_rows(data: np.ndarray, basis: Sequence[PrimeModulus], twiddles: Optional[TwiddleSource] = None) -> np.ndarray:
    """Natural evaluations -> bit-reversed coefficients, row-wise; N^-1 folded into the last stage."""
    rows, n = data.shape
    twiddles = twiddles or (lambda stage, inverse: _twiddle_rows(basis, n, stage, inverse))
    moduli = [m.value for m in basis]
    n_inv = np.array([pow(n, -1, q) for q in moduli], dtype=object).reshape(-1, 1, 1)
    a = data
    stage = n.bit_length() - 2
    m = n // 2
    while m >= 1:
        w = twiddles(stage, True)[:, None, :]
        blocks = a.reshape(rows, n // (2 * m), 2, m)
        x, y = blocks[:, :, 0, :], blocks[:, :, 1, :]
        s = vec_mod_add(x, y, moduli)
        d = vec_mod_sub(x, y, moduli)
        if m == 1:
            s = vec_mod_mul(s, n_inv, moduli)
            d = vec_mod_mul(d, vec_mod_mul(w, n_inv, moduli), moduli)
            counters.record("intt", rows * n)
        else:
            d = vec_mod_mul(d, w, moduli)
            counters.record("intt", rows * n // 2)
        a = np.stack([s, d], axis=2).reshape(rows, n)
        m, stage = m // 2, stage - 1
    return a


def to_bit_reversed(poly: LimbMatrix) -> LimbMatrix:
    if poly.order is Order.BIT_REVERSED:
        return poly
    return poly.with_data(poly.data[:, bit_reverse_indices(poly.n)], order=Order.BIT_REVERSED)


def to_natural(poly: LimbMatrix) -> LimbMatrix:
    if poly.order is Order.NATURAL:
        return poly
    return poly.with_data(poly.data[:, bit_reverse_indices(poly.n)], order=Order.NATURAL)


def ntt_reference(x: LimbMatrix) -> LimbMatrix:
    """Negacyclic NTT of every limb; result is Eval rep in natural order."""
    if x.rep is not Rep.COEFF:
        raise RepresentationError("ntt_reference expects the coefficient representation")
    x = to_bit_reversed(x)
    return x.with_data(ntt_rows(x.data, x.basis), rep=Rep.EVAL, order=Order.NATURAL)


def intt_reference(x: LimbMatrix) -> LimbMatrix:
    """Inverse of ntt_reference; result is Coeff rep in bit-reversed order."""
    if x.rep is not Rep.EVAL:
        raise RepresentationError("intt_reference expects the evaluation representation")
    x = to_natural(x)
    return x.with_data(intt_rows(x.data, x.basis), rep=Rep.COEFF, order=Order.BIT_REVERSED)


def ntt(poly: LimbMatrix) -> LimbMatrix:
    return ntt_reference(poly)


def intt(poly: LimbMatrix) -> LimbMatrix:
    """Inverse NTT returning natural-order coefficients."""
    return to_natural(intt_reference(poly))


# -- streaming layout --------------------------------------------------------

@dataclass(frozen=True)
class StreamChunk:
    limb_index: int
    chunk_index: int
    values: np.ndarray


def chunk_positions(n: int, p: int, o: int) -> np.ndarray:
    """Array positions {o + k*N/p : k < p} carried by chunk o."""
    return np.arange(o, n, n // p)


@dataclass(frozen=True)
class InterleavedStream:
    chunks: Tuple[StreamChunk, ...]
    n: int
    p: int
    basis: Tuple[PrimeModulus, ...]
    rep: Rep
    order: Order

    def __post_init__(self):
        m = len(self.basis)
        if len(self.chunks) != m * (self.n // self.p):
            raise ParameterError("stream length does not cover every chunk of every limb")
        for t, c in enumerate(self.chunks):
            if c.limb_index != t % m or c.chunk_index != t // m:
                raise ParameterError(f"stream position {t} breaks the interleaving order")

    @property
    def limbs(self) -> int:
        return len(self.basis)

    def __len__(self) -> int:
        return len(self.chunks)

    def __iter__(self) -> Iterator[StreamChunk]:
        return iter(self.chunks)


def to_interleaved(poly: LimbMatrix, p: int) -> InterleavedStream:
    n = poly.n
    if p < 1 or n % p:
        raise ParameterError(f"lane width {p} does not divide N={n}")
    chunks = []
    for o in range(n // p):
        pos = chunk_positions(n, p, o)
        for limb in range(poly.limbs):
            chunks.append(StreamChunk(limb, o, poly.data[limb, pos].copy()))
    return InterleavedStream(tuple(chunks), n, p, poly.basis, poly.rep, poly.order)


def stream_from_chunks(values: Sequence[np.ndarray], like: InterleavedStream, basis=None, rep=None, order=None) -> InterleavedStream:
    """Rebuild a stream with the schedule of `like` carrying new chunk values."""
    basis = like.basis if basis is None else tuple(basis)
    m = len(basis)
    chunks = tuple(StreamChunk(t % m, t // m, np.asarray(v, dtype=object)) for t, v in enumerate(values))
    return InterleavedStream(
        chunks, like.n, like.p, basis,
        like.rep if rep is None else rep,
        like.order if order is None else order,
    )


def from_interleaved(stream: InterleavedStream) -> LimbMatrix:
    data = np.zeros((stream.limbs, stream.n), dtype=object)
    for c in stream.chunks:
        data[c.limb_index, chunk_positions(stream.n, stream.p, c.chunk_index)] = c.values
    return LimbMatrix(data, stream.basis, stream.rep, stream.order)


# -- automorphisms -------------------------------------------------------------

def _galois_element(r: int, n: int) -> int:
    return pow(5, r % max(1, n // 2), 2 * n)


def automorphism_map(r: int, n: int) -> np.ndarray:
    """Index permutation i -> i * 5^r mod N."""
    if not is_power_of_two(n):
        raise ParameterError(f"ring degree {n} is not a power of two")
    k = _galois_element(r, n) % n
    perm = (np.arange(n, dtype=np.int64) * k) % n
    if len(np.unique(perm)) != n:
        raise RoutingError(f"i -> i*{k} mod {n} is not a permutation")
    return perm


def eval_automorphism_map(r: int, n: int) -> np.ndarray:
    """Gather map of X -> X^(5^r) on natural evaluations: out[j] = in[src[j]]."""
    if not is_power_of_two(n):
        raise ParameterError(f"ring degree {n} is not a power of two")
    k = _galois_element(r, n)
    j = np.arange(n, dtype=np.int64)
    return ((k * (2 * j + 1)) % (2 * n) - 1) // 2


def apply_automorphism(poly: LimbMatrix, r: int) -> LimbMatrix:
    """Slot rotation by r (left) on an Eval/Natural polynomial.

    This is the evaluation-side gather of X -> X^(5^r). On coefficients the same map sends
    coefficient i to position i * 5^r mod N, negated when i * 5^r mod 2N >= N; `automorphism_map`
    gives that index permutation.
    """
    if poly.rep is not Rep.EVAL or poly.order is not Order.NATURAL:
        raise RepresentationError("automorphisms act on natural-order evaluations")
    return poly.with_data(poly.data[:, eval_automorphism_map(r, poly.n)])


# -- CKKS encoding -------------------------------------------------------------

@lru_cache(maxsize=None)
def slot_exponents(n: int) -> np.ndarray:
    exps = np.empty(n // 2, dtype=np.int64)
    e = 1
    for t in range(n // 2):
        exps[t] = e
        e = e * 5 % (2 * n)
    return exps


@lru_cache(maxsize=None)
def _embedding_matrix(n: int) -> np.ndarray:
    """E[t, k] = zeta^(e_t * k) with zeta = exp(i*pi/N) and e_t = 5^t mod 2N."""
    exps = slot_exponents(n)
    k = np.arange(n)
    return np.exp(1j * np.pi * np.outer(exps, k) / n)


def encode(message: Sequence[complex], scale: float, basis: Sequence[PrimeModulus], n: int) -> LimbMatrix:
    """Canonical-embedding encode into an Eval/Natural polynomial over `basis`."""
    slots = n // 2
    m = np.asarray(message, dtype=np.complex128).ravel()
    if m.size > slots:
        raise EncodingError(f"{m.size} values exceed the {slots} available slots")
    if m.size < slots:
        m = np.concatenate([m, np.zeros(slots - m.size, dtype=np.complex128)])
    emb = _embedding_matrix(n)
    real = (2.0 / n) * (emb.conj().T @ m).real
    coeffs = [int(v) for v in np.rint(real * scale)]
    big_q = crt_constants(tuple(b.value for b in basis))[0]
    if coeffs and max(abs(c) for c in coeffs) * 2 >= big_q:
        raise EncodingError("scaled coefficients exceed the modulus budget of this level")
    return ntt(LimbMatrix.from_integers(coeffs, basis))


def decode(poly: LimbMatrix, scale: float) -> np.ndarray:
    coeff = intt(poly) if poly.rep is Rep.EVAL else to_natural(poly)
    big_q = crt_constants(coeff.moduli)[0]
    ints = centered(crt_reconstruct_array(coeff.data, coeff.moduli), big_q)
    floats = np.array([float(v) for v in ints], dtype=np.float64)
    return (_embedding_matrix(poly.n) @ floats) / scale


# -- binary dumps ----------------------------------------------------------------

POLY_HEADER = struct.Struct("<4Q")
_REP_CODES = {Rep.COEFF: 0, Rep.EVAL: 1}
_ORDER_CODES = {Order.NATURAL: 0, Order.BIT_REVERSED: 1}


def dump_poly(poly: LimbMatrix) -> bytes:
    header = POLY_HEADER.pack(poly.n, poly.limbs, _REP_CODES[poly.rep], _ORDER_CODES[poly.order])
    return header + np.array(poly.data.tolist(), dtype="<u8").tobytes()


def load_poly(blob: bytes, basis: Sequence[PrimeModulus], offset: int = 0) -> Tuple[LimbMatrix, int]:
    """Parse one dumped polynomial at `offset`; returns it with the next offset."""
    n, limbs, rep, order = POLY_HEADER.unpack_from(blob, offset)
    if limbs != len(basis):
        raise BasisMismatchError(f"dump has {limbs} limbs, basis has {len(basis)}")
    start = offset + POLY_HEADER.size
    stop = start + 8 * n * limbs
    words = np.frombuffer(blob[start:stop], dtype="<u8").reshape(limbs, n)
    data = np.array([[int(v) for v in row] for row in words], dtype=object).reshape(limbs, n)
    rep_e = {v: k for k, v in _REP_CODES.items()}[rep]
    order_e = {v: k for k, v in _ORDER_CODES.items()}[order]
    return LimbMatrix(data, tuple(basis), rep_e, order_e), stop
