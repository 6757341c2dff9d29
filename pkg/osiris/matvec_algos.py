"""Homomorphic matrix-vector products over slot vectors.

Rotations are left rotations (slot i receives slot i + r). A matrix of width w
acts on a message tiled to fill all N/2 slots, with generalized diagonals
diag_k[i] = M[i, (i + k) mod w]. Plaintext diagonals are encoded at the scale of
the level's top modulus so that the closing rescale restores the input scale.
"""
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import counters
from .ckks_ops import (
    Backend,
    Ciphertext,
    KeySet,
    REFERENCE_BACKEND,
    h_add,
    h_rot,
    hoisted_mod_up,
    key_mult,
    key_switch,
    lift_to_qp,
    mod_down,
    p_mult,
    rescale,
    rotate_hoisted,
)
from .errors import EncodingError, ParameterError, WorkloadError
from .poly import LimbMatrix, Rep, encode, intt, ntt
from .rns_core import ModulusChain, PrimeModulus, centered, vec_reduce

logger = logging.getLogger(__name__)


class HoistingMode(str, Enum):
    NH = "nh"
    SH = "sh"
    DH = "dh"


# -- cleartext side ---------------------------------------------------------------------

@dataclass
class DiagonalizedMatrix:
    width: int
    diagonals: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.diagonals)

    def indices(self) -> List[int]:
        return sorted(self.diagonals)

    def to_matrix(self) -> np.ndarray:
        w = self.width
        dtype = np.result_type(*self.diagonals.values()) if self.diagonals else np.float64
        m = np.zeros((w, w), dtype=dtype)
        rows = np.arange(w)
        for k, d in self.diagonals.items():
            m[rows, (rows + k) % w] = d
        return m


def extract_diagonals(matrix: np.ndarray) -> DiagonalizedMatrix:
    m = np.asarray(matrix)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ParameterError(f"matrix must be square, got shape {m.shape}")
    w = m.shape[0]
    rows = np.arange(w)
    diags = {}
    for k in range(w):
        d = m[rows, (rows + k) % w]
        if np.any(d != 0):
            diags[k] = d.copy()
    return DiagonalizedMatrix(w, diags)


def read_matrix_csv(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    try:
        return np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise WorkloadError(f"{path}: rows have different lengths") from exc


def read_diagonal_json(path: Path) -> DiagonalizedMatrix:
    data = json.loads(Path(path).read_text())
    try:
        w = int(data["width"])
        diags = {int(k) % w: np.array(v, dtype=np.float64) for k, v in data["diagonals"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise WorkloadError(f"{path}: malformed diagonal list ({exc})") from exc
    for k, d in diags.items():
        if d.shape != (w,):
            raise WorkloadError(f"{path}: diagonal {k} has {d.size} entries, width is {w}")
    return DiagonalizedMatrix(w, diags)


def tile(values: np.ndarray, slots: int) -> np.ndarray:
    values = np.asarray(values)
    if slots % values.size:
        raise ParameterError(f"width {values.size} does not divide {slots} slots")
    return np.tile(values, slots // values.size)


def rotate_cleartext(values: np.ndarray, r: int) -> np.ndarray:
    return np.roll(values, -r)


def matvec_reference(matrix: np.ndarray, vector: np.ndarray) -> np.ndarray:
    return np.asarray(matrix) @ np.asarray(vector)


# -- BSGS planning ----------------------------------------------------------------------

@dataclass(frozen=True)
class BsgsPlan:
    n1: int
    n2: int
    diagonals: Tuple[int, ...]

    def __post_init__(self):
        if self.n1 < 1 or self.n2 < 1:
            raise ParameterError("n1 and n2 must be positive")
        if self.diagonals and max(self.diagonals) >= self.n1 * self.n2:
            raise ParameterError(
                f"diagonal {max(self.diagonals)} is outside the n1*n2={self.n1 * self.n2} baby/giant grid"
            )

    @property
    def n(self) -> int:
        return len(self.diagonals)

    def groups(self) -> Dict[int, List[int]]:
        """Giant step j -> baby steps i with a nonzero diagonal n1*j + i."""
        out: Dict[int, List[int]] = {}
        for k in self.diagonals:
            out.setdefault(k // self.n1, []).append(k % self.n1)
        return {j: sorted(v) for j, v in sorted(out.items())}

    def baby_steps(self) -> List[int]:
        return sorted({k % self.n1 for k in self.diagonals} - {0})

    def giant_steps(self) -> List[int]:
        return sorted({self.n1 * (k // self.n1) for k in self.diagonals} - {0})

    def rotations(self) -> List[int]:
        return sorted(set(self.baby_steps()) | set(self.giant_steps()))

    @property
    def ratio(self) -> float:
        return self.n1 / self.n2


def plan_bsgs(matrix: DiagonalizedMatrix, n1: int, n2: int) -> BsgsPlan:
    return BsgsPlan(n1, n2, tuple(matrix.indices()))


def choose_bsgs_split(d: int, n2_cap: Optional[int] = None) -> Tuple[int, int]:
    """Factorization n1*n2 >= d minimizing n1 + n2, preferring larger n1; n2 limited to n2_cap."""
    if d < 1:
        raise ParameterError("need at least one diagonal")
    cap = d if n2_cap is None else max(1, min(n2_cap, d))
    best = None
    for n2 in range(1, cap + 1):
        n1 = -(-d // n2)
        if best is None or n1 + n2 < best[0] + best[1]:
            best = (n1, n2)
    return best


def bsgs_cleartext(matrix: DiagonalizedMatrix, plan: BsgsPlan, vector: np.ndarray) -> np.ndarray:
    """Cleartext run of the BSGS factorization with pre-rotated diagonals."""
    v = np.asarray(vector)
    out = np.zeros(matrix.width, dtype=np.result_type(v, *matrix.diagonals.values()))
    for j, babies in plan.groups().items():
        partial = np.zeros_like(out)
        for i in babies:
            d = rotate_cleartext(matrix.diagonals[plan.n1 * j + i], -plan.n1 * j)
            partial = partial + rotate_cleartext(v, i) * d
        out = out + rotate_cleartext(partial, plan.n1 * j)
    return out


# -- diagonal encoding ----------------------------------------------------------------

@dataclass
class EncodedDiagonals:
    entries: Dict[Tuple[int, int], LimbMatrix]
    scale: float
    extended: bool


def encode_diagonal_q0(values: np.ndarray, scale: float, chain: ModulusChain, n: int) -> LimbMatrix:
    """Single q0 limb, natural-order coefficients, of an encoded diagonal."""
    q0 = chain.q_limbs[0]
    with counters.suspended():
        coeff = intt(encode(values, scale, (q0,), n))
    ints = centered(coeff.data[0], q0.value)
    bound = min(m.value for m in chain.q_limbs + chain.p_limbs) // 2
    if ints.size and max(abs(int(c)) for c in ints) >= bound:
        raise EncodingError("diagonal coefficients too large to regenerate limbs from q0")
    return coeff


def of_limb_extend(diag_q0: LimbMatrix, basis: Sequence[PrimeModulus]) -> LimbMatrix:
    """Regenerate every limb of a diagonal from its q0 coefficient limb: NTT([P]_q0 mod q_i)."""
    if diag_q0.limbs != 1 or diag_q0.rep is not Rep.COEFF:
        raise ParameterError("OF-Limb extension expects one coefficient-form limb")
    q0 = diag_q0.moduli[0]
    ints = centered(diag_q0.data[0], q0)
    bound = min(m.value for m in basis) // 2
    if ints.size and max(abs(int(c)) for c in ints) >= bound:
        raise EncodingError(f"coefficient magnitude reaches {bound}, limbs would wrap")
    data = vec_reduce(np.tile(ints, (len(basis), 1)), [m.value for m in basis])
    return ntt(LimbMatrix(data, tuple(basis), Rep.COEFF, diag_q0.order))


def prepare_diagonals(matrix: DiagonalizedMatrix, plan: BsgsPlan, chain: ModulusChain, level: int, n: int,
                      extended: bool = False, of_limb: bool = False) -> EncodedDiagonals:
    """Encode Rot_{-n1*j}(diag_{n1*j+i}) for every nonzero (j, i); over Q*P when `extended`."""
    slots = n // 2
    scale = float(chain.q_primes(level)[-1].value)
    basis = chain.qp_primes(level) if extended else chain.q_primes(level)
    entries = {}
    with counters.suspended():
        for j, babies in plan.groups().items():
            for i in babies:
                values = rotate_cleartext(tile(matrix.diagonals[plan.n1 * j + i], slots), -plan.n1 * j)
                if of_limb:
                    entries[(j, i)] = of_limb_extend(encode_diagonal_q0(values, scale, chain, n), basis)
                else:
                    entries[(j, i)] = encode(values, scale, basis, n)
    return EncodedDiagonals(entries, scale, extended)


# -- homomorphic algorithms ---------------------------------------------------------------

def _sum(acc: Optional[Ciphertext], term: Ciphertext) -> Ciphertext:
    return term if acc is None else h_add(acc, term)


def _zero(ct: Ciphertext, scale: float) -> Ciphertext:
    zero = ct.c0.with_data(np.zeros_like(ct.c0.data))
    return Ciphertext(zero, zero, ct.level, scale)


def matvec_diagonal(ct: Ciphertext, matrix: DiagonalizedMatrix, keys: KeySet, chain: ModulusChain,
                    hoisted: bool = False, backend: Optional[Backend] = None) -> Ciphertext:
    """sum_k Rot_k(ct) * diag_k; with `hoisted` all rotations share one Decompose/ModUp."""
    slots = ct.n // 2
    scale = float(ct.c0.moduli[-1])
    with counters.suspended():
        encoded = {k: encode(tile(d, slots), scale, ct.basis, ct.n) for k, d in matrix.diagonals.items()}
    upped = None
    if hoisted and any(k for k in encoded):
        upped = hoisted_mod_up(ct.c1, chain, ct.level, backend)
    acc = None
    for k in sorted(encoded):
        if k == 0:
            rotated = ct
        elif upped is not None:
            rotated = rotate_hoisted(ct, upped, k, keys.rotation_key(k), chain, backend)
        else:
            rotated = h_rot(ct, k, keys.rotation_key(k), chain, backend)
        acc = _sum(acc, p_mult(rotated, encoded[k], scale))
    return rescale(acc if acc is not None else _zero(ct, ct.scale * scale), backend)


def _baby_steps(ct: Ciphertext, plan: BsgsPlan, keys: KeySet, chain: ModulusChain, mode: HoistingMode,
                backend: Optional[Backend]) -> Dict[int, Ciphertext]:
    steps = plan.baby_steps()
    babies = {0: ct}
    if not steps:
        return babies
    if mode is HoistingMode.NH:
        for i in steps:
            babies[i] = h_rot(ct, i, keys.rotation_key(i), chain, backend)
        return babies
    upped = hoisted_mod_up(ct.c1, chain, ct.level, backend)
    for i in steps:
        babies[i] = rotate_hoisted(ct, upped, i, keys.rotation_key(i), chain, backend)
    return babies


def _matvec_hoisted_once(ct: Ciphertext, plan: BsgsPlan, diags: EncodedDiagonals, keys: KeySet, chain: ModulusChain,
                         mode: HoistingMode, backend: Optional[Backend]) -> Ciphertext:
    babies = _baby_steps(ct, plan, keys, chain, mode, backend)
    acc = None
    for j, baby_ids in plan.groups().items():
        partial = None
        for i in baby_ids:
            partial = _sum(partial, p_mult(babies[i], diags.entries[(j, i)], diags.scale))
        if j:
            partial = h_rot(partial, plan.n1 * j, keys.rotation_key(plan.n1 * j), chain, backend)
        acc = _sum(acc, partial)
    return rescale(acc if acc is not None else _zero(ct, ct.scale * diags.scale), backend)


ExtPair = Tuple[LimbMatrix, LimbMatrix]


def _add_ext(acc: Optional[ExtPair], term: ExtPair) -> ExtPair:
    return term if acc is None else (acc[0] + term[0], acc[1] + term[1])


def _rotate_ext(x: ExtPair, r: int, keys: KeySet, chain: ModulusChain, level: int, backend: Backend) -> ExtPair:
    """Rotate a Q*P-form ciphertext: ModDown c1, key-switch its permutation, permute c0 in place."""
    c1 = mod_down(x[1], chain, level, backend)
    e0, e1 = key_switch(backend.automorphism(c1, r), keys.rotation_key(r), chain, level, backend)
    counters.tally("rotation")
    return backend.automorphism(x[0], r) + e0, e1


def _matvec_double_hoisted(ct: Ciphertext, plan: BsgsPlan, diags: EncodedDiagonals, keys: KeySet,
                           chain: ModulusChain, backend: Backend) -> Ciphertext:
    level = ct.level
    upped = hoisted_mod_up(ct.c1, chain, level, backend)
    lifted = (lift_to_qp(ct.c0, chain, level), lift_to_qp(ct.c1, chain, level))
    babies: Dict[int, ExtPair] = {0: lifted}
    for i in plan.baby_steps():
        e0, e1 = key_mult([backend.automorphism(u, i) for u in upped], keys.rotation_key(i), chain, level, backend)
        counters.tally("rotation")
        babies[i] = (backend.automorphism(lifted[0], i) + e0, e1)

    acc: Optional[ExtPair] = None
    for j, baby_ids in plan.groups().items():
        partial: Optional[ExtPair] = None
        for i in baby_ids:
            pt = diags.entries[(j, i)]
            counters.record("diagmult", 2 * pt.data.size)
            partial = _add_ext(partial, (babies[i][0] * pt, babies[i][1] * pt))
        if j:
            partial = _rotate_ext(partial, plan.n1 * j, keys, chain, level, backend)
        acc = _add_ext(acc, partial)

    scale = ct.scale * diags.scale
    if acc is None:
        return rescale(_zero(ct, scale), backend)
    out = Ciphertext(mod_down(acc[0], chain, level, backend), mod_down(acc[1], chain, level, backend), level, scale)
    return rescale(out, backend)


def matvec_bsgs(ct: Ciphertext, matrix: DiagonalizedMatrix, plan: BsgsPlan, mode: HoistingMode, keys: KeySet,
                chain: ModulusChain, diags: Optional[EncodedDiagonals] = None, of_limb: bool = False,
                backend: Optional[Backend] = None) -> Ciphertext:
    mode = HoistingMode(mode)
    be = backend or REFERENCE_BACKEND
    if tuple(matrix.indices()) != plan.diagonals:
        raise ParameterError("plan does not match the matrix's nonzero diagonals")
    if mode is HoistingMode.DH and not plan.baby_steps():
        mode = HoistingMode.SH
    if diags is None:
        diags = prepare_diagonals(matrix, plan, chain, ct.level, ct.n, extended=mode is HoistingMode.DH, of_limb=of_limb)
    logger.debug("matvec %s n=%d n1=%d n2=%d level=%d", mode.value, plan.n, plan.n1, plan.n2, ct.level)
    if mode is HoistingMode.DH:
        return _matvec_double_hoisted(ct, plan, diags, keys, chain, be)
    return _matvec_hoisted_once(ct, plan, diags, keys, chain, mode, be)


def required_rotations(plans: Iterable[BsgsPlan], include_diagonal: Iterable[DiagonalizedMatrix] = ()) -> List[int]:
    rots = set()
    for plan in plans:
        rots.update(plan.rotations())
    for m in include_diagonal:
        rots.update(k for k in m.diagonals if k)
    return sorted(rots)


def random_matrix(width: int, density: float, rng: np.random.Generator) -> np.ndarray:
    """Random matrix with roughly `density` of its generalized diagonals nonzero (at least one)."""
    count = max(1, int(math.ceil(density * width)))
    ks = rng.choice(width, size=count, replace=False)
    m = np.zeros((width, width))
    rows = np.arange(width)
    for k in ks:
        m[rows, (rows + k) % width] = rng.uniform(-1, 1, size=width)
    return m
