"""Prime generation, modular arithmetic and RNS/CRT helpers.

Residue matrices are numpy ``object`` arrays of Python ints so that 40-bit
products stay exact; reductions use Barrett constants cached per modulus.
"""
import json
import logging
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache, reduce
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import sympy

from .errors import ParameterError

logger = logging.getLogger(__name__)

MAX_MODULUS_BITS = 40


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=None)
def barrett_params(q: int) -> Tuple[int, int]:
    """Return (shift, mu) with mu = floor(2^shift / q), shift = 2 * bitlen(q)."""
    shift = 2 * q.bit_length()
    return shift, (1 << shift) // q


@dataclass(frozen=True)
class PrimeModulus:
    value: int
    ntt_root: int
    n_max: int

    def __post_init__(self):
        if self.value.bit_length() > MAX_MODULUS_BITS:
            raise ParameterError(f"modulus {self.value} exceeds {MAX_MODULUS_BITS} bits")
        if (self.value - 1) % (2 * self.n_max) != 0:
            raise ParameterError(f"{self.value} is not 1 mod {2 * self.n_max}")
        if pow(self.ntt_root, self.n_max, self.value) != self.value - 1:
            raise ParameterError(f"{self.ntt_root} is not a primitive {2 * self.n_max}-th root mod {self.value}")

    @property
    def bit_width(self) -> int:
        return self.value.bit_length()

    @cached_property
    def barrett(self) -> Tuple[int, int]:
        return barrett_params(self.value)

    def root_for(self, n: int) -> int:
        """Primitive 2n-th root of unity for a ring degree n dividing n_max."""
        if not is_power_of_two(n) or self.n_max % n:
            raise ParameterError(f"ring degree {n} does not divide {self.n_max}")
        return pow(self.ntt_root, self.n_max // n, self.value)

    def __int__(self) -> int:
        return self.value


Modulus = Union[PrimeModulus, int]


def _q(m: Modulus) -> int:
    return m.value if isinstance(m, PrimeModulus) else int(m)


def find_ntt_root(q: int, n: int) -> int:
    """Smallest-base primitive 2n-th root: x^((q-1)/2n) for x = 2, 3, ..."""
    exponent = (q - 1) // (2 * n)
    for x in range(2, q):
        psi = pow(x, exponent, q)
        if pow(psi, n, q) == q - 1:
            return psi
    raise ParameterError(f"no primitive {2 * n}-th root of unity mod {q}")


def make_prime(q: int, n_max: int) -> PrimeModulus:
    return PrimeModulus(value=q, ntt_root=find_ntt_root(q, n_max), n_max=n_max)


def find_primes(bits: int, n_max: int, count: int, exclude: Sequence[int] = ()) -> List[int]:
    """Deterministic descending search for `count` primes q < 2^bits, q = 1 mod 2*n_max."""
    if bits > MAX_MODULUS_BITS:
        raise ParameterError(f"{bits}-bit moduli exceed the {MAX_MODULUS_BITS}-bit word")
    if bits < 2:
        raise ParameterError(f"invalid modulus width {bits}")
    step = 2 * n_max
    low = 1 << (bits - 1)
    q = ((1 << bits) - 2) // step * step + 1
    taken = set(exclude)
    found: List[int] = []
    while len(found) < count and q >= low:
        if q not in taken and sympy.isprime(q):
            found.append(q)
        q -= step
    if len(found) < count:
        raise ParameterError(
            f"not enough {bits}-bit primes congruent to 1 mod {step}: needed {count}, found {len(found)}"
        )
    return found


# -- scalar arithmetic -------------------------------------------------------

def barrett_reduce(x: int, m: Modulus) -> int:
    q = _q(m)
    shift, mu = barrett_params(q)
    r = x - ((x * mu) >> shift) * q
    while r >= q:
        r -= q
    return r


def mod_mul(a: int, b: int, m: Modulus) -> int:
    return barrett_reduce(a * b, m)


def mod_add(a: int, b: int, m: Modulus) -> int:
    q = _q(m)
    r = a + b
    return r - q if r >= q else r


def mod_sub(a: int, b: int, m: Modulus) -> int:
    q = _q(m)
    r = a - b
    return r + q if r < 0 else r


def mod_inv(a: int, m: Modulus) -> int:
    q = _q(m)
    if math.gcd(a % q, q) != 1:
        raise ParameterError(f"{a} is not invertible mod {q}")
    return pow(a, -1, q)


# -- vectorized arithmetic over residue matrices ---------------------------------
# Row r of every operand is reduced modulo moduli[r]; trailing axes broadcast.

@lru_cache(maxsize=None)
def _barrett_columns(moduli: Tuple[int, ...]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    q = np.array(moduli, dtype=object)
    shift = np.array([barrett_params(m)[0] for m in moduli], dtype=object)
    mu = np.array([barrett_params(m)[1] for m in moduli], dtype=object)
    return q, mu, shift


def _shape_column(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (ndim - 1))


def moduli_column(moduli: Sequence[int], ndim: int = 2) -> np.ndarray:
    return _shape_column(np.array(tuple(moduli), dtype=object), ndim)


def vec_mod_mul(a: np.ndarray, b: Any, moduli: Sequence[int]) -> np.ndarray:
    x = np.asarray(a, dtype=object) * b
    q, mu, shift = (_shape_column(c, x.ndim) for c in _barrett_columns(tuple(moduli)))
    r = x - ((x * mu) >> shift) * q
    r = np.where(r >= q, r - q, r)
    return np.where(r >= q, r - q, r)


def vec_mod_add(a: np.ndarray, b: Any, moduli: Sequence[int]) -> np.ndarray:
    r = np.asarray(a, dtype=object) + b
    q = moduli_column(moduli, r.ndim)
    return np.where(r >= q, r - q, r)


def vec_mod_sub(a: np.ndarray, b: Any, moduli: Sequence[int]) -> np.ndarray:
    r = np.asarray(a, dtype=object) - b
    q = moduli_column(moduli, r.ndim)
    return np.where(r < 0, r + q, r)


def vec_mod_neg(a: np.ndarray, moduli: Sequence[int]) -> np.ndarray:
    a = np.asarray(a, dtype=object)
    q = moduli_column(moduli, a.ndim)
    return np.where(a == 0, a, q - a)


def vec_reduce(a: np.ndarray, moduli: Sequence[int]) -> np.ndarray:
    """Full reduction of arbitrary (possibly negative) integers into [0, q)."""
    a = np.asarray(a, dtype=object)
    return a % moduli_column(moduli, a.ndim)


# -- CRT ---------------------------------------------------------------------

@dataclass(frozen=True)
class RnsInt:
    residues: Tuple[int, ...]
    basis: Tuple[int, ...]

    def __post_init__(self):
        if len(self.residues) != len(self.basis):
            raise ParameterError("residue count does not match basis size")
        for r, q in zip(self.residues, self.basis):
            if not 0 <= r < q:
                raise ParameterError(f"residue {r} out of range for modulus {q}")


@lru_cache(maxsize=None)
def crt_constants(basis: Tuple[int, ...]) -> Tuple[int, Tuple[int, ...], Tuple[int, ...]]:
    """(Q, Q/q_i, (Q/q_i)^-1 mod q_i) for a basis of pairwise coprime moduli."""
    big_q = reduce(lambda x, y: x * y, basis, 1)
    hats = tuple(big_q // q for q in basis)
    inverses = tuple(mod_inv(h % q, q) for h, q in zip(hats, basis))
    return big_q, hats, inverses


def crt_decompose(x: int, basis: Sequence[int]) -> RnsInt:
    basis = tuple(int(q) for q in basis)
    return RnsInt(tuple(x % q for q in basis), basis)


def crt_reconstruct(x: RnsInt, basis: Optional[Sequence[int]] = None) -> int:
    basis = x.basis if basis is None else tuple(int(q) for q in basis)
    if tuple(basis) != x.basis:
        raise ParameterError("RnsInt basis differs from the requested basis")
    big_q, hats, inverses = crt_constants(basis)
    acc = 0
    for r, h, inv, q in zip(x.residues, hats, inverses, basis):
        acc += (r * inv % q) * h
    return acc % big_q


def crt_reconstruct_array(data: np.ndarray, basis: Sequence[int]) -> np.ndarray:
    """Column-wise CRT of a (limbs x N) residue matrix into integers in [0, Q)."""
    basis = tuple(int(q) for q in basis)
    big_q, hats, inverses = crt_constants(basis)
    acc = np.zeros(data.shape[1], dtype=object)
    for row, h, inv, q in zip(data, hats, inverses, basis):
        acc = acc + (row * inv % q) * h
    return acc % big_q


def centered(values: np.ndarray, modulus: int) -> np.ndarray:
    values = np.asarray(values, dtype=object)
    return np.where(values > modulus // 2, values - modulus, values)


# -- modulus chain -------------------------------------------------------------

@dataclass(frozen=True)
class ModulusChain:
    q_limbs: Tuple[PrimeModulus, ...]
    p_limbs: Tuple[PrimeModulus, ...]
    alpha: int
    scale_bits: int
    n_max: int
    q0_count: int = 1
    log_qp_cap: Optional[int] = None

    def __post_init__(self):
        values = [m.value for m in self.q_limbs + self.p_limbs]
        if len(set(values)) != len(values):
            raise ParameterError("chain primes are not pairwise distinct")
        if self.alpha < 1 or len(self.p_limbs) != self.alpha:
            raise ParameterError(f"alpha={self.alpha} requires exactly alpha special primes")
        if self.q0_count < 1 or len(self.q_limbs) < self.q0_count:
            raise ParameterError("chain has no base modulus")
        if self.log_qp_cap is not None and self.log_qp > self.log_qp_cap:
            raise ParameterError(f"log QP = {self.log_qp:.1f} exceeds the cap {self.log_qp_cap}")

    @property
    def max_level(self) -> int:
        return len(self.q_limbs) - self.q0_count

    @property
    def dnum_max(self) -> int:
        return self.dnum(self.max_level)

    def dnum(self, level: int) -> int:
        return -(-(level + 1) // self.alpha)

    def limb_count(self, level: int) -> int:
        self._check_level(level)
        return level + self.q0_count

    def q_moduli(self, level: Optional[int] = None) -> Tuple[int, ...]:
        level = self.max_level if level is None else level
        return tuple(m.value for m in self.q_limbs[: self.limb_count(level)])

    def q_primes(self, level: Optional[int] = None) -> Tuple[PrimeModulus, ...]:
        level = self.max_level if level is None else level
        return self.q_limbs[: self.limb_count(level)]

    @property
    def p_moduli(self) -> Tuple[int, ...]:
        return tuple(m.value for m in self.p_limbs)

    def qp_moduli(self, level: Optional[int] = None) -> Tuple[int, ...]:
        return self.q_moduli(level) + self.p_moduli

    def qp_primes(self, level: Optional[int] = None) -> Tuple[PrimeModulus, ...]:
        return self.q_primes(level) + self.p_limbs

    def prime(self, value: int) -> PrimeModulus:
        for m in self.q_limbs + self.p_limbs:
            if m.value == value:
                return m
        raise ParameterError(f"{value} is not a modulus of this chain")

    def digit_ranges(self, level: int) -> List[Tuple[int, int]]:
        limbs = self.limb_count(level)
        return [(s, min(s + self.alpha, limbs)) for s in range(0, limbs, self.alpha)]

    @property
    def big_p(self) -> int:
        return reduce(lambda x, y: x * y, self.p_moduli, 1)

    @property
    def log_q(self) -> float:
        return sum(math.log2(m.value) for m in self.q_limbs)

    @property
    def log_qp(self) -> float:
        return self.log_q + sum(math.log2(m.value) for m in self.p_limbs)

    def _check_level(self, level: int) -> None:
        if not 0 <= level <= self.max_level:
            raise ParameterError(f"level {level} outside [0, {self.max_level}]")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_max": self.n_max,
            "alpha": self.alpha,
            "scale_bits": self.scale_bits,
            "q0_count": self.q0_count,
            "log_qp_cap": self.log_qp_cap,
            "q": [{"value": m.value, "root": m.ntt_root} for m in self.q_limbs],
            "p": [{"value": m.value, "root": m.ntt_root} for m in self.p_limbs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModulusChain":
        n_max = int(data["n_max"])
        q = tuple(PrimeModulus(int(e["value"]), int(e["root"]), n_max) for e in data["q"])
        p = tuple(PrimeModulus(int(e["value"]), int(e["root"]), n_max) for e in data["p"])
        return cls(
            q_limbs=q,
            p_limbs=p,
            alpha=int(data["alpha"]),
            scale_bits=int(data["scale_bits"]),
            n_max=n_max,
            q0_count=int(data.get("q0_count", 1)),
            log_qp_cap=data.get("log_qp_cap"),
        )

    @classmethod
    def from_json(cls, text: str) -> "ModulusChain":
        return cls.from_dict(json.loads(text))


def generate_chain(
    n_max: int,
    level_count: int,
    alpha: int,
    q0_bits: Union[int, Sequence[int]],
    qi_bits: int,
    p_bits: int,
    scale_bits: Optional[int] = None,
    log_qp_cap: Optional[int] = None,
) -> ModulusChain:
    """Build an NTT-friendly chain: q0 (possibly split), `level_count` q_i, `alpha` p_i."""
    if not is_power_of_two(n_max) or n_max < 2:
        raise ParameterError(f"ring degree {n_max} is not a power of two")
    if level_count < 0 or alpha < 1:
        raise ParameterError("level_count must be >= 0 and alpha >= 1")
    q0_widths = [q0_bits] if isinstance(q0_bits, int) else list(q0_bits)
    for bits in q0_widths + [qi_bits, p_bits]:
        if bits > MAX_MODULUS_BITS:
            raise ParameterError(f"{bits}-bit moduli exceed the {MAX_MODULUS_BITS}-bit word")

    used: List[int] = []
    for bits in q0_widths:
        used += find_primes(bits, n_max, 1, exclude=used)
    used += find_primes(qi_bits, n_max, level_count, exclude=used) if level_count else []
    q_values = list(used)
    p_values = find_primes(p_bits, n_max, alpha, exclude=used)

    chain = ModulusChain(
        q_limbs=tuple(make_prime(q, n_max) for q in q_values),
        p_limbs=tuple(make_prime(p, n_max) for p in p_values),
        alpha=alpha,
        scale_bits=qi_bits if scale_bits is None else scale_bits,
        n_max=n_max,
        q0_count=len(q0_widths),
        log_qp_cap=log_qp_cap,
    )
    logger.debug(
        "generated chain N=%d L=%d alpha=%d dnum_max=%d log QP=%.1f",
        n_max, chain.max_level, alpha, chain.dnum_max, chain.log_qp,
    )
    return chain
