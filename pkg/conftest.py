import numpy as np
import pytest

from osiris.ckks_ops import keygen
from osiris.rns_core import find_primes, make_prime
from osiris.seeds import desk_chain

collect_ignore = ["examples"]


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def chain32():
    return desk_chain(32, 4, 2)


@pytest.fixture(scope="session")
def chain64():
    return desk_chain(64, 4, 2)


@pytest.fixture(scope="session")
def keys64(chain64):
    return keygen(chain64, 32, seed=7, rotations=range(1, 32), n=64)


@pytest.fixture(scope="session")
def keys32(chain32):
    return keygen(chain32, 16, seed=11, rotations=range(1, 16), n=32)


def ntt_basis(n, count=3, bits=40):
    return tuple(make_prime(q, n) for q in find_primes(bits, n, count))


def negacyclic_product(a, b, q):
    """Schoolbook a*b mod (X^N + 1, q) on Python ints via a packed big-integer product."""
    n = len(a)
    width = 2 * q.bit_length() + n.bit_length() + 1
    pack = lambda xs: sum(int(x) << (width * i) for i, x in enumerate(xs))
    full = pack(a) * pack(b)
    mask = (1 << width) - 1
    coeffs = [(full >> (width * i)) & mask for i in range(2 * n - 1)] + [0]
    return [(coeffs[i] - coeffs[i + n]) % q for i in range(n)]
