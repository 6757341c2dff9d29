import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict

from .errors import WorkloadError
from .gsc_scheduler import ChipConfig
from .perf_model import ParameterSet
from .rns_core import ModulusChain, generate_chain

logger = logging.getLogger(__name__)

BOOT_ALPHA = 14
BOOT_LEVELS = 15
LOG_QP_MAX = 1630

# Residual parameter sets; III and IV carry the bootstrapping levels above L_eff
PARAMETER_SETS: Dict[str, ParameterSet] = {
    "I": ParameterSet("I", n=2**14, slots=2**14, l_eff=5, alpha=2, dnum=3,
                      q0_bits=(40,), qi_bits=32, p_bits=40, h=192),
    "II": ParameterSet("II", n=2**14, slots=2**14, l_eff=7, alpha=4, dnum=2,
                       q0_bits=(40,), qi_bits=32, p_bits=40, h=192),
    "III": ParameterSet("III", n=2**16, slots=2**15, l_eff=8, alpha=5, dnum=2,
                        q0_bits=(24, 24), qi_bits=36, p_bits=40, h=1024,
                        boot_alpha=BOOT_ALPHA, boot_levels=BOOT_LEVELS, log_qp_max=LOG_QP_MAX),
    "IV": ParameterSet("IV", n=2**16, slots=2**15, l_eff=9, alpha=5, dnum=2,
                       q0_bits=(24, 24), qi_bits=36, p_bits=40, h=1024,
                       boot_alpha=BOOT_ALPHA, boot_levels=BOOT_LEVELS, log_qp_max=LOG_QP_MAX),
}


@dataclass(frozen=True)
class DeskSet:
    """Set-I-shaped chain small enough to run the real arithmetic.

    Every prime has the same width so the BConv array's single conditional
    subtraction covers every modulus pair.
    """

    name: str
    n: int
    levels: int = 5
    alpha: int = 2
    prime_bits: int = 40
    scale_bits: int = 34

    @property
    def h(self) -> int:
        return max(1, self.n // 2)

    def chain(self) -> ModulusChain:
        return desk_chain(self.n, self.levels, self.alpha, self.prime_bits, self.scale_bits)

    def parameter_set(self) -> ParameterSet:
        return ParameterSet.from_chain(self.chain(), self.n, self.name, self.h)


DESK_SETS: Dict[str, DeskSet] = {f"desk-{n}": DeskSet(f"desk-{n}", n) for n in (16, 32, 64)}

DEFAULT_CHIP = ChipConfig()


@lru_cache(maxsize=32)
def desk_chain(n: int, levels: int, alpha: int, prime_bits: int = 40, scale_bits: int = 34) -> ModulusChain:
    return generate_chain(n, levels, alpha, prime_bits, prime_bits, prime_bits, scale_bits=scale_bits)


def get_parameter_set(name: str) -> ParameterSet:
    found = PARAMETER_SETS.get(name)
    if found is None and name in DESK_SETS:
        found = DESK_SETS[name].parameter_set()
    if found is None:
        known = sorted(PARAMETER_SETS) + sorted(DESK_SETS)
        raise WorkloadError(f"unknown parameter set {name!r}; known: {', '.join(known)}")
    return found


def seed_presets(db) -> int:
    """Store the full-size parameter sets; rows that already exist are left alone."""
    from . import crud, models

    added = 0
    for params in PARAMETER_SETS.values():
        row = crud.get_parameter_set(db, params.name)
        if row:
            continue
        db.add(models.ParameterSetRow(
            name=params.name,
            n=params.n,
            slots=params.slots,
            l_eff=params.l_eff,
            alpha=params.alpha,
            dnum=params.dnum,
            q0_bits=json.dumps(list(params.q0_bits)),
            qi_bits=params.qi_bits,
            p_bits=params.p_bits,
            h=params.h,
            boot_alpha=params.boot_alpha,
            boot_levels=params.boot_levels,
        ))
        added += 1
    if added:
        db.commit()
        logger.info("seeded %d parameter sets", added)
    return added
