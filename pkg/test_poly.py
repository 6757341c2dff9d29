import numpy as np
import pytest

from conftest import negacyclic_product, ntt_basis
from osiris import counters
from osiris.errors import BasisMismatchError, EncodingError, RepresentationError
from osiris.perf_model import KernelModel
from osiris.poly import (
    LimbMatrix,
    Order,
    Rep,
    apply_automorphism,
    automorphism_map,
    decode,
    dump_poly,
    encode,
    from_interleaved,
    intt,
    load_poly,
    ntt,
    to_interleaved,
)


def random_poly(rng, basis, n):
    data = np.array([[int(x) for x in rng.integers(0, m.value, size=n)] for m in basis], dtype=object)
    return LimbMatrix(data, basis, Rep.COEFF)


@pytest.mark.parametrize("n", [16, 64, 256])
def test_ntt_product_matches_schoolbook(rng, n):
    basis = ntt_basis(n)
    for _ in range(200):
        a, b = random_poly(rng, basis, n), random_poly(rng, basis, n)
        c = intt(ntt(a) * ntt(b))
        assert c.rep is Rep.COEFF and c.order is Order.NATURAL
        for r, m in enumerate(basis):
            assert list(c.data[r]) == negacyclic_product(a.data[r], b.data[r], m.value)


def test_intt_inverts_ntt(rng):
    basis = ntt_basis(32)
    a = random_poly(rng, basis, 32)
    assert intt(ntt(a)) == a


def test_transform_counts_match_closed_form(rng):
    basis = ntt_basis(64)
    a = random_poly(rng, basis, 64)
    model = KernelModel(64)
    with counters.counting() as c:
        ev = ntt(a)
    assert c.total == model.ntt(3).total_mults
    with counters.counting() as c:
        intt(ev)
    assert c.total == model.intt(3).total_mults


def test_pointwise_ops_check_layout(rng):
    basis = ntt_basis(16)
    a = random_poly(rng, basis, 16)
    with pytest.raises(RepresentationError):
        a * a
    with pytest.raises(BasisMismatchError):
        a + random_poly(rng, ntt_basis(16, count=2), 16)
    with pytest.raises(RepresentationError):
        a + ntt(a)


def test_interleaved_stream_order(rng):
    basis = ntt_basis(16, count=2)
    a = random_poly(rng, basis, 16)
    stream = to_interleaved(a, 4)
    assert len(stream) == 2 * 4
    # chunk o of every limb before chunk o+1 of any limb
    assert [(c.limb_index, c.chunk_index) for c in stream][:4] == [(0, 0), (1, 0), (0, 1), (1, 1)]
    assert list(stream.chunks[0].values) == [a.data[0, k] for k in (0, 4, 8, 12)]
    assert from_interleaved(stream) == a


def test_automorphism_index_anchor():
    assert automorphism_map(1, 16)[3] == 15
    assert sorted(automorphism_map(2, 64)) == list(range(64))


@pytest.mark.parametrize("r", [1, 3])
def test_eval_automorphism_matches_coefficient_index_map(rng, r):
    n = 32
    basis = ntt_basis(n, count=2)
    a = random_poly(rng, basis, n)
    k = pow(5, r, 2 * n)
    perm = automorphism_map(r, n)
    moved = np.zeros_like(a.data)
    for i in range(n):
        negate = (i * k) % (2 * n) >= n
        for row, m in enumerate(basis):
            moved[row, perm[i]] = (m.value - a.data[row, i]) % m.value if negate else a.data[row, i]
    assert apply_automorphism(ntt(a), r) == ntt(a.with_data(moved))


def test_encode_decode_and_rotation(rng):
    n = 32
    basis = ntt_basis(n, count=2)
    scale = 2.0**30
    m = rng.uniform(-1, 1, n // 2)
    pt = encode(m, scale, basis, n)
    assert np.max(np.abs(decode(pt, scale) - m)) < 2**-20
    for r in (1, 3, 7):
        rotated = decode(apply_automorphism(pt, r), scale)
        assert np.max(np.abs(rotated - np.roll(m, -r))) < 2**-20


def test_encode_rejects_oversized_inputs():
    basis = ntt_basis(16, count=1)
    with pytest.raises(EncodingError):
        encode(np.ones(9), 2.0**20, basis, 16)
    with pytest.raises(EncodingError):
        encode(np.ones(8), 2.0**45, basis, 16)


def test_dump_and_load_poly(rng):
    basis = ntt_basis(16)
    a = ntt(random_poly(rng, basis, 16))
    blob = dump_poly(a) + dump_poly(-a)
    first, offset = load_poly(blob, basis)
    second, end = load_poly(blob, basis, offset)
    assert first == a and second == -a
    assert end == len(blob)
