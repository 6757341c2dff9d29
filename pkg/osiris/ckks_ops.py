"""Noise-free CKKS ciphertext algebra over LimbMatrix polynomials.

All error polynomials are zero, so homomorphic identities hold exactly up to the
deterministic rounding of ModDown and Rescale. Keys live at the top level of the
chain over the Q*P basis and are sliced down to the working level on use.
"""
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import counters
from .errors import BasisMismatchError, LevelMismatchError, MissingKeyError, ParameterError, RepresentationError
from .poly import (
    LimbMatrix,
    Order,
    Rep,
    apply_automorphism,
    decode,
    dump_poly,
    encode,
    intt_reference,
    load_poly,
    ntt_reference,
)
from .rns_core import ModulusChain, PrimeModulus, centered, crt_constants, vec_mod_mul, vec_mod_sub, vec_reduce

logger = logging.getLogger(__name__)

RELIN = "relin"
ROTATION = "rot"


# -- base conversion ----------------------------------------------------------

@dataclass(frozen=True)
class BaseTable:
    from_basis: Tuple[PrimeModulus, ...]
    to_basis: Tuple[PrimeModulus, ...]
    prescale: Tuple[int, ...]
    weights: Tuple[Tuple[int, ...], ...]

    @property
    def alpha(self) -> int:
        return len(self.from_basis)

    @property
    def beta(self) -> int:
        return len(self.to_basis)

    @property
    def from_moduli(self) -> Tuple[int, ...]:
        return tuple(m.value for m in self.from_basis)

    @property
    def to_moduli(self) -> Tuple[int, ...]:
        return tuple(m.value for m in self.to_basis)

    @cached_property
    def weight_matrix(self) -> np.ndarray:
        """(beta x alpha) object matrix, row j holding Q_hat_i mod q'_j."""
        return np.array(self.weights, dtype=object).T.copy()


@lru_cache(maxsize=None)
def base_table(from_basis: Tuple[PrimeModulus, ...], to_basis: Tuple[PrimeModulus, ...]) -> BaseTable:
    src = tuple(m.value for m in from_basis)
    _, hats, inverses = crt_constants(src)
    weights = tuple(tuple(h % t.value for t in to_basis) for h in hats)
    return BaseTable(tuple(from_basis), tuple(to_basis), tuple(inverses), weights)


def bconv_prescale(x: LimbMatrix, table: BaseTable) -> np.ndarray:
    col = np.array(table.prescale, dtype=object).reshape(-1, 1)
    counters.record("bconv", x.data.size)
    return vec_mod_mul(x.data, col, table.from_moduli)


def bconv_reference(x: LimbMatrix, table: BaseTable) -> LimbMatrix:
    """Fast base conversion; output is congruent to CRT(x) + u*Q_from with 0 <= u < alpha."""
    if x.basis != table.from_basis:
        raise BasisMismatchError("input basis differs from the base table's source basis")
    if x.rep is not Rep.COEFF:
        raise RepresentationError("base conversion operates on coefficients")
    y = bconv_prescale(x, table)
    out = vec_reduce(table.weight_matrix.dot(y), table.to_moduli)
    counters.record("bconv", table.alpha * table.beta * x.n)
    return LimbMatrix(out, table.to_basis, Rep.COEFF, x.order)


class Backend:
    """Kernel provider for the ciphertext algebra; the default runs the reference kernels."""

    name = "reference"

    def intt(self, x: LimbMatrix) -> LimbMatrix:
        return intt_reference(x)

    def ntt(self, x: LimbMatrix) -> LimbMatrix:
        return ntt_reference(x)

    def bconv(self, x: LimbMatrix, table: BaseTable) -> LimbMatrix:
        return bconv_reference(x, table)

    def mod_change(self, x: LimbMatrix, table: BaseTable) -> LimbMatrix:
        return self.ntt(self.bconv(self.intt(x), table))

    def automorphism(self, x: LimbMatrix, r: int) -> LimbMatrix:
        return apply_automorphism(x, r)

    def key_mult(self, digits: Sequence[LimbMatrix], pairs: Sequence[Tuple[LimbMatrix, LimbMatrix]]) -> Tuple[LimbMatrix, LimbMatrix]:
        acc0 = acc1 = None
        for digit, (b, a) in zip(digits, pairs):
            t0, t1 = digit * b, digit * a
            acc0 = t0 if acc0 is None else acc0 + t0
            acc1 = t1 if acc1 is None else acc1 + t1
        counters.record("keymult", 2 * sum(d.data.size for d in digits))
        return acc0, acc1


REFERENCE_BACKEND = Backend()


def _backend(backend: Optional[Backend]) -> Backend:
    return REFERENCE_BACKEND if backend is None else backend


def mod_change(x: LimbMatrix, table: BaseTable, backend: Optional[Backend] = None) -> LimbMatrix:
    if x.rep is not Rep.EVAL:
        raise RepresentationError("mod_change expects the evaluation representation")
    return _backend(backend).mod_change(x, table)


# -- ciphertexts and keys ---------------------------------------------------------

@dataclass(frozen=True)
class Ciphertext:
    c0: LimbMatrix
    c1: LimbMatrix
    level: int
    scale: float

    def __post_init__(self):
        if self.c0.basis != self.c1.basis:
            raise BasisMismatchError("ciphertext polynomials have different bases")
        if (self.c0.rep, self.c0.order) != (self.c1.rep, self.c1.order):
            raise RepresentationError("ciphertext polynomials have different layouts")
        if self.level < 0:
            raise LevelMismatchError(f"negative level {self.level}")

    @property
    def n(self) -> int:
        return self.c0.n

    @property
    def basis(self) -> Tuple[PrimeModulus, ...]:
        return self.c0.basis


@dataclass(frozen=True)
class SecretKey:
    coeffs: Tuple[int, ...]
    poly: LimbMatrix  # Eval over the top-level Q*P basis

    @property
    def hamming_weight(self) -> int:
        return sum(1 for c in self.coeffs if c)

    def over(self, moduli: Sequence[int]) -> LimbMatrix:
        return self.poly.select(moduli)


@dataclass(frozen=True)
class SwitchingKey:
    kind: str
    digits: Tuple[Tuple[LimbMatrix, LimbMatrix], ...]
    seed: Optional[int]
    rotation: Optional[int] = None

    @property
    def dnum(self) -> int:
        return len(self.digits)

    def pairs_for(self, chain: ModulusChain, level: int, count: int) -> List[Tuple[LimbMatrix, LimbMatrix]]:
        if count > self.dnum:
            raise ParameterError(f"{count} digits requested but the key has {self.dnum}")
        moduli = chain.qp_moduli(level)
        return [(b.select(moduli), a.select(moduli)) for b, a in self.digits[:count]]


@dataclass
class KeySet:
    secret: SecretKey
    relin: SwitchingKey
    rotations: Dict[int, SwitchingKey] = field(default_factory=dict)

    def rotation_key(self, r: int) -> SwitchingKey:
        key = self.rotations.get(r % (self.secret.poly.n // 2))
        if key is None:
            raise MissingKeyError(f"no rotation key for r={r}")
        return key


def _key_tag(kind: str, rotation: Optional[int]) -> int:
    return 0 if kind == RELIN else 1 + int(rotation)


def sample_key_a(seed: int, kind: str, rotation: Optional[int], digit: int, basis: Sequence[PrimeModulus], n: int) -> LimbMatrix:
    """The uniformly random half a_d of a key digit, regenerated from the seed alone."""
    rng = np.random.default_rng([seed, _key_tag(kind, rotation), digit])
    rows = [rng.integers(0, m.value, size=n, dtype=np.int64).astype(object) for m in basis]
    return LimbMatrix(np.array(rows, dtype=object).reshape(len(basis), n), tuple(basis), Rep.EVAL, Order.NATURAL)


def gen_secret(chain: ModulusChain, h: int, seed: int, n: Optional[int] = None) -> SecretKey:
    n = chain.n_max if n is None else n
    if not 0 < h <= n:
        raise ParameterError(f"Hamming weight {h} outside (0, {n}]")
    rng = np.random.default_rng([seed, 0x5EC])
    coeffs = [0] * n
    for pos in rng.choice(n, size=h, replace=False):
        coeffs[int(pos)] = int(rng.choice([-1, 1]))
    poly = ntt_reference(LimbMatrix.from_integers(coeffs, chain.qp_primes()))
    return SecretKey(tuple(coeffs), poly)


def gen_switching_key(chain: ModulusChain, secret: SecretKey, s_from: LimbMatrix, kind: str, seed: int,
                      rotation: Optional[int] = None) -> SwitchingKey:
    """Key digits with b_d + a_d*s = P*gamma_d*s_from over the top-level Q*P basis."""
    basis = chain.qp_primes()
    n = secret.poly.n
    big_p = chain.big_p
    q_count = len(chain.q_limbs)
    digits = []
    for d, (start, stop) in enumerate(chain.digit_ranges(chain.max_level)):
        a = sample_key_a(seed, kind, rotation, d, basis, n)
        gamma = [big_p % m.value if start <= i < stop and i < q_count else 0 for i, m in enumerate(basis)]
        b = s_from.scale_rows(gamma) - a * secret.poly
        digits.append((b, a))
    logger.debug("generated %s key (rotation=%s) with %d digits", kind, rotation, len(digits))
    return SwitchingKey(kind, tuple(digits), seed, rotation)


def gen_relin_key(chain: ModulusChain, secret: SecretKey, seed: int) -> SwitchingKey:
    return gen_switching_key(chain, secret, secret.poly * secret.poly, RELIN, seed)


def gen_rotation_key(chain: ModulusChain, secret: SecretKey, r: int, seed: int) -> SwitchingKey:
    r = r % (secret.poly.n // 2)
    return gen_switching_key(chain, secret, apply_automorphism(secret.poly, r), ROTATION, seed, rotation=r)


def keygen(chain: ModulusChain, h: int, seed: int, rotations: Iterable[int] = (), n: Optional[int] = None) -> KeySet:
    secret = gen_secret(chain, h, seed, n)
    half = secret.poly.n // 2
    rot_keys = {r % half: gen_rotation_key(chain, secret, r, seed) for r in rotations}
    return KeySet(secret, gen_relin_key(chain, secret, seed), rot_keys)


def encrypt(message: Sequence[complex], keys: KeySet, chain: ModulusChain, level: int,
            scale: Optional[float] = None, seed: int = 0) -> Ciphertext:
    """Secret-key encryption with zero error: c1 = a, c0 = m - a*s."""
    scale = float(2 ** chain.scale_bits) if scale is None else float(scale)
    basis = chain.q_primes(level)
    n = keys.secret.poly.n
    pt = encode(message, scale, basis, n)
    rng = np.random.default_rng([seed, 0xC7, level])
    rows = [rng.integers(0, m.value, size=n, dtype=np.int64).astype(object) for m in basis]
    a = pt.with_data(np.array(rows, dtype=object).reshape(len(basis), n))
    return Ciphertext(pt - a * keys.secret.over(pt.moduli), a, level, scale)


def decrypt(ct: Ciphertext, secret: SecretKey) -> LimbMatrix:
    return ct.c0 + ct.c1 * secret.over(ct.c0.moduli)


def decrypt_message(ct: Ciphertext, secret: SecretKey) -> np.ndarray:
    return decode(decrypt(ct, secret), ct.scale)


# -- key switching pieces -----------------------------------------------------------

def decompose(c1: LimbMatrix, alpha: int) -> List[LimbMatrix]:
    if alpha < 1:
        raise ParameterError(f"alpha must be >= 1, got {alpha}")
    counters.tally("decompose")
    return [c1.rows(s, min(s + alpha, c1.limbs)) for s in range(0, c1.limbs, alpha)]


def mod_up(digit: LimbMatrix, chain: ModulusChain, level: int, backend: Optional[Backend] = None) -> LimbMatrix:
    """Extend a digit to the Q_l*P basis; its own limbs are copied verbatim."""
    target = chain.qp_primes(level)
    own = set(digit.basis)
    missing = tuple(m for m in target if m not in own)
    converted = mod_change(digit, base_table(digit.basis, missing), backend)
    rows = {m: digit.data[i] for i, m in enumerate(digit.basis)}
    rows.update({m: converted.data[i] for i, m in enumerate(missing)})
    data = np.array([rows[m] for m in target], dtype=object).reshape(len(target), digit.n)
    return digit.with_data(data, basis=target)


def hoisted_mod_up(c1: LimbMatrix, chain: ModulusChain, level: int, backend: Optional[Backend] = None) -> List[LimbMatrix]:
    return [mod_up(d, chain, level, backend) for d in decompose(c1, chain.alpha)]


def key_mult(digits_upped: Sequence[LimbMatrix], swk: SwitchingKey, chain: ModulusChain, level: int,
             backend: Optional[Backend] = None) -> Tuple[LimbMatrix, LimbMatrix]:
    """Inner product of the raised digits with the key digits over Q_l*P; no digits gives zeros."""
    if not digits_upped:
        n = swk.digits[0][0].n if swk.digits else chain.n_max
        zero = LimbMatrix.zeros(n, chain.qp_primes(level), Rep.EVAL)
        return zero, zero.with_data(zero.data.copy())
    expected = len(chain.digit_ranges(level))
    if len(digits_upped) != expected:
        raise ParameterError(f"{len(digits_upped)} digits given, level {level} splits into {expected}")
    pairs = swk.pairs_for(chain, level, expected)
    return _backend(backend).key_mult(digits_upped, pairs)


def _split_qp(x: LimbMatrix, chain: ModulusChain, level: int) -> Tuple[LimbMatrix, LimbMatrix]:
    if x.moduli != chain.qp_moduli(level):
        raise BasisMismatchError(f"polynomial is not over the Q*P basis of level {level}")
    limbs = chain.limb_count(level)
    return x.rows(0, limbs), x.rows(limbs, x.limbs)


def mod_down(x: LimbMatrix, chain: ModulusChain, level: int, backend: Optional[Backend] = None) -> LimbMatrix:
    """(x - ModChange_{P->Q}([x]_P)) * P^-1 over Q_l."""
    xq, xp = _split_qp(x, chain, level)
    conv = mod_change(xp, base_table(xp.basis, xq.basis), backend)
    p_inv = [pow(chain.big_p % q, -1, q) for q in xq.moduli]
    counters.record("moddown", xq.data.size)
    return (xq - conv).scale_rows(p_inv)


def lift_to_qp(x: LimbMatrix, chain: ModulusChain, level: int) -> LimbMatrix:
    """P*x over Q_l*P; the P limbs are zero."""
    big_p = chain.big_p
    counters.record("lift", x.data.size)
    scaled = x.scale_rows([big_p % q for q in x.moduli])
    zeros = np.zeros((chain.alpha, x.n), dtype=object)
    return x.with_data(np.concatenate([scaled.data, zeros], axis=0), basis=chain.qp_primes(level))


def _top_limb_lift(top_coeff: LimbMatrix, q_top: int, lower: Tuple[PrimeModulus, ...]) -> LimbMatrix:
    """Centered lift of one coefficient limb into the lower limbs (still Coeff)."""
    lifted = centered(top_coeff.data[0], q_top)
    data = vec_reduce(np.tile(lifted, (len(lower), 1)), [m.value for m in lower])
    return LimbMatrix(data, lower, Rep.COEFF, top_coeff.order)


def rescale_poly(x: LimbMatrix, backend: Optional[Backend] = None) -> LimbMatrix:
    if x.limbs < 2:
        raise LevelMismatchError("cannot rescale a single-limb polynomial")
    be = _backend(backend)
    q_top = x.moduli[-1]
    lower = x.basis[:-1]
    t = be.ntt(_top_limb_lift(be.intt(x.limb(x.limbs - 1)), q_top, lower))
    inv = [pow(q_top % q, -1, q) for q in x.moduli[:-1]]
    counters.record("rescale", len(lower) * x.n)
    return (x.rows(0, x.limbs - 1) - t).scale_rows(inv)


def rescale(ct: Ciphertext, backend: Optional[Backend] = None) -> Ciphertext:
    if ct.level < 1:
        raise LevelMismatchError("cannot rescale below level 0")
    q_top = ct.c0.moduli[-1]
    return Ciphertext(rescale_poly(ct.c0, backend), rescale_poly(ct.c1, backend), ct.level - 1, ct.scale / q_top)


def fused_moddown_rescale(x: LimbMatrix, chain: ModulusChain, level: int, backend: Optional[Backend] = None) -> LimbMatrix:
    """rescale(mod_down(x)) computed without the intermediate NTT of the converted limbs."""
    if level < 1:
        raise LevelMismatchError("cannot rescale below level 0")
    be = _backend(backend)
    xq, xp = _split_qp(x, chain, level)
    big_p = chain.big_p
    q_top = xq.moduli[-1]
    lower = xq.basis[:-1]
    conv = be.bconv(be.intt(xp), base_table(xp.basis, xq.basis))

    top = be.intt(xq.limb(xq.limbs - 1))
    t = vec_mod_mul(vec_mod_sub(top.data, conv.data[-1:], (q_top,)), pow(big_p % q_top, -1, q_top), (q_top,))
    counters.record("moddown", xq.n)
    t_lift = _top_limb_lift(top.with_data(t), q_top, lower)
    p_col = [big_p % m.value for m in lower]
    counters.record("moddown", len(lower) * xq.n)
    corr = conv.rows(0, len(lower)) + t_lift.scale_rows(p_col)
    inv = [pow(big_p * q_top % q, -1, q) for q in xq.moduli[:-1]]
    counters.record("rescale", len(lower) * xq.n)
    return (xq.rows(0, len(lower)) - be.ntt(corr)).scale_rows(inv)


def key_switch(c: LimbMatrix, swk: SwitchingKey, chain: ModulusChain, level: int,
               backend: Optional[Backend] = None) -> Tuple[LimbMatrix, LimbMatrix]:
    """Decompose -> ModUp -> KeyMult; result stays over Q_l*P."""
    counters.tally("keyswitch")
    return key_mult(hoisted_mod_up(c, chain, level, backend), swk, chain, level, backend)


# -- homomorphic operations -------------------------------------------------------

def _check_pair(a: Ciphertext, b: Ciphertext) -> None:
    if a.level != b.level:
        raise LevelMismatchError(f"levels differ: {a.level} vs {b.level}")
    if not np.isclose(a.scale, b.scale, rtol=1e-9):
        raise LevelMismatchError(f"scales differ: {a.scale} vs {b.scale}")


def h_add(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _check_pair(a, b)
    return Ciphertext(a.c0 + b.c0, a.c1 + b.c1, a.level, a.scale)


def h_sub(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _check_pair(a, b)
    return Ciphertext(a.c0 - b.c0, a.c1 - b.c1, a.level, a.scale)


def negate(ct: Ciphertext) -> Ciphertext:
    return Ciphertext(-ct.c0, -ct.c1, ct.level, ct.scale)


def p_add(ct: Ciphertext, pt: LimbMatrix, pt_scale: Optional[float] = None) -> Ciphertext:
    if pt_scale is not None and not np.isclose(ct.scale, pt_scale, rtol=1e-9):
        raise LevelMismatchError(f"plaintext scale {pt_scale} differs from {ct.scale}")
    return Ciphertext(ct.c0 + pt, ct.c1, ct.level, ct.scale)


def p_mult(ct: Ciphertext, pt: LimbMatrix, pt_scale: float) -> Ciphertext:
    """Plaintext product without rescaling."""
    if pt.basis != ct.basis:
        raise LevelMismatchError("plaintext is not at the ciphertext's level")
    counters.record("diagmult", 2 * pt.data.size)
    return Ciphertext(ct.c0 * pt, ct.c1 * pt, ct.level, ct.scale * pt_scale)


def h_rot(ct: Ciphertext, r: int, swk: SwitchingKey, chain: ModulusChain, backend: Optional[Backend] = None) -> Ciphertext:
    """Automorphism on (c0, c1) first, then key-switch the permuted c1."""
    be = _backend(backend)
    c0 = be.automorphism(ct.c0, r)
    c1 = be.automorphism(ct.c1, r)
    counters.tally("rotation")
    e0, e1 = key_switch(c1, swk, chain, ct.level, backend)
    return Ciphertext(c0 + mod_down(e0, chain, ct.level, backend), mod_down(e1, chain, ct.level, backend), ct.level, ct.scale)


def rotate_hoisted(ct: Ciphertext, upped: Sequence[LimbMatrix], r: int, swk: SwitchingKey, chain: ModulusChain,
                   backend: Optional[Backend] = None) -> Ciphertext:
    """Rotation reusing digits that were decomposed and raised once for many rotations."""
    be = _backend(backend)
    counters.tally("rotation")
    rotated = [be.automorphism(u, r) for u in upped]
    e0, e1 = key_mult(rotated, swk, chain, ct.level, backend)
    c0 = be.automorphism(ct.c0, r)
    return Ciphertext(c0 + mod_down(e0, chain, ct.level, backend), mod_down(e1, chain, ct.level, backend), ct.level, ct.scale)


def h_mult(a: Ciphertext, b: Ciphertext, relin_key: SwitchingKey, chain: ModulusChain,
           fuse_moddown: bool = True, backend: Optional[Backend] = None) -> Ciphertext:
    _check_pair(a, b)
    level = a.level
    if level < 1:
        raise LevelMismatchError("h_mult needs a level to rescale into")
    d0 = a.c0 * b.c0
    d1 = a.c0 * b.c1 + a.c1 * b.c0
    d2 = a.c1 * b.c1
    counters.record("tensor", 4 * d0.data.size)
    e0, e1 = key_switch(d2, relin_key, chain, level, backend)
    q_top = a.c0.moduli[-1]
    scale = a.scale * b.scale / q_top
    if fuse_moddown:
        x0 = lift_to_qp(d0, chain, level) + e0
        x1 = lift_to_qp(d1, chain, level) + e1
        return Ciphertext(
            fused_moddown_rescale(x0, chain, level, backend),
            fused_moddown_rescale(x1, chain, level, backend),
            level - 1,
            scale,
        )
    ct = Ciphertext(d0 + mod_down(e0, chain, level, backend), d1 + mod_down(e1, chain, level, backend), level, a.scale * b.scale)
    return rescale(ct, backend)


# -- dumps ------------------------------------------------------------------------

KIND_RECORD = struct.Struct("<4sII")
_NO_ROTATION = 0xFFFFFFFF


def dump_ciphertext(ct: Ciphertext) -> bytes:
    return KIND_RECORD.pack(b"OSCT", 2, ct.level) + dump_poly(ct.c0) + dump_poly(ct.c1)


def load_ciphertext(blob: bytes, chain: ModulusChain, scale: Optional[float] = None) -> Ciphertext:
    tag, count, level = KIND_RECORD.unpack_from(blob, 0)
    if tag != b"OSCT" or count != 2:
        raise ParameterError("not a ciphertext dump")
    basis = chain.q_primes(level)
    c0, offset = load_poly(blob, basis, KIND_RECORD.size)
    c1, _ = load_poly(blob, basis, offset)
    scale = float(2 ** chain.scale_bits) if scale is None else scale
    return Ciphertext(c0, c1, level, scale)


def dump_key(swk: SwitchingKey) -> bytes:
    rotation = _NO_ROTATION if swk.rotation is None else swk.rotation
    out = [KIND_RECORD.pack(b"OSKY", 2 * swk.dnum, rotation)]
    for b, a in swk.digits:
        out += [dump_poly(b), dump_poly(a)]
    return b"".join(out)


def load_key(blob: bytes, chain: ModulusChain) -> SwitchingKey:
    tag, count, rotation = KIND_RECORD.unpack_from(blob, 0)
    if tag != b"OSKY" or count % 2:
        raise ParameterError("not a switching-key dump")
    basis = chain.qp_primes()
    offset = KIND_RECORD.size
    polys = []
    for _ in range(count):
        poly, offset = load_poly(blob, basis, offset)
        polys.append(poly)
    digits = tuple((polys[i], polys[i + 1]) for i in range(0, count, 2))
    if rotation == _NO_ROTATION:
        return SwitchingKey(RELIN, digits, None)
    return SwitchingKey(ROTATION, digits, None, rotation)
