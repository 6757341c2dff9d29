import numpy as np
import pytest

from osiris import counters
from osiris.ckks_ops import (
    decompose,
    decrypt_message,
    dump_ciphertext,
    dump_key,
    encrypt,
    fused_moddown_rescale,
    h_add,
    h_mult,
    h_rot,
    h_sub,
    hoisted_mod_up,
    key_mult,
    key_switch,
    lift_to_qp,
    load_ciphertext,
    load_key,
    mod_down,
    mod_up,
    negate,
    rescale,
    rescale_poly,
)
from osiris.errors import LevelMismatchError, MissingKeyError, ParameterError
from osiris.perf_model import KernelModel
from osiris.poly import LimbMatrix, Rep, intt
from osiris.rns_core import centered

TOL = 2**-20


def random_qp(rng, chain, level, n):
    basis = chain.qp_primes(level)
    data = np.array([[int(x) for x in rng.integers(0, m.value, size=n)] for m in basis], dtype=object)
    return LimbMatrix(data, basis, Rep.EVAL)


@pytest.mark.parametrize("n", [32, 64])
def test_rotation_decrypts_to_cleartext_rotation(request, rng, n):
    chain = request.getfixturevalue(f"chain{n}")
    keys = request.getfixturevalue(f"keys{n}")
    for trial in range(50):
        m = rng.uniform(-1, 1, n // 2)
        r = int(rng.integers(1, n // 2))
        level = int(rng.integers(0, chain.max_level + 1))
        ct = encrypt(m, keys, chain, level, seed=trial)
        out = h_rot(ct, r, keys.rotation_key(r), chain)
        assert np.max(np.abs(decrypt_message(out, keys.secret) - np.roll(m, -r))) < TOL


def test_add_sub_negate(chain32, keys32, rng):
    a, b = rng.uniform(-1, 1, 16), rng.uniform(-1, 1, 16)
    ca, cb = encrypt(a, keys32, chain32, 2, seed=1), encrypt(b, keys32, chain32, 2, seed=2)
    assert np.max(np.abs(decrypt_message(h_add(ca, cb), keys32.secret) - (a + b))) < TOL
    assert np.max(np.abs(decrypt_message(h_sub(ca, cb), keys32.secret) - (a - b))) < TOL
    assert np.max(np.abs(decrypt_message(negate(ca), keys32.secret) + a)) < TOL
    with pytest.raises(LevelMismatchError):
        h_add(ca, encrypt(b, keys32, chain32, 1))


def test_rescale_drops_one_level(chain32, keys32, rng):
    a = rng.uniform(-1, 1, 16)
    ct = encrypt(a, keys32, chain32, 3, scale=float(2**34) * chain32.q_limbs[3].value)
    out = rescale(ct)
    assert out.level == 2
    assert np.max(np.abs(decrypt_message(out, keys32.secret) - a)) < TOL
    with pytest.raises(LevelMismatchError):
        rescale(encrypt(a, keys32, chain32, 0))


@pytest.mark.parametrize("fuse", [True, False])
def test_hmult_decrypts_to_product(chain64, keys64, rng, fuse):
    a, b = rng.uniform(-1, 1, 32), rng.uniform(-1, 1, 32)
    ca, cb = encrypt(a, keys64, chain64, 3, seed=3), encrypt(b, keys64, chain64, 3, seed=4)
    out = h_mult(ca, cb, keys64.relin, chain64, fuse_moddown=fuse)
    assert out.level == 2
    # product scale is 2^68 / q_top, about 2^28
    assert np.max(np.abs(decrypt_message(out, keys64.secret) - a * b)) < 2**-14


def test_fused_and_two_step_hmult_agree_exactly(chain64, keys64, rng):
    a, b = rng.uniform(-1, 1, 32), rng.uniform(-1, 1, 32)
    ca, cb = encrypt(a, keys64, chain64, 2, seed=5), encrypt(b, keys64, chain64, 2, seed=6)
    fused = h_mult(ca, cb, keys64.relin, chain64, fuse_moddown=True)
    plain = h_mult(ca, cb, keys64.relin, chain64, fuse_moddown=False)
    assert fused.c0 == plain.c0 and fused.c1 == plain.c1


def test_fused_moddown_rescale_equals_two_steps(chain64, rng):
    for level in (1, 2, 4):
        x = random_qp(rng, chain64, level, 64)
        assert fused_moddown_rescale(x, chain64, level) == rescale_poly(mod_down(x, chain64, level))


def test_moddown_of_a_lifted_polynomial_is_exact(chain64, rng):
    x = random_qp(rng, chain64, 2, 64).rows(0, 3)
    assert mod_down(lift_to_qp(x, chain64, 2), chain64, 2) == x


def test_moddown_additivity_up_to_the_conversion_wrap(chain64, rng):
    alpha = chain64.alpha
    for _ in range(5):
        a, b = random_qp(rng, chain64, 3, 64), random_qp(rng, chain64, 3, 64)
        diff = mod_down(a + b, chain64, 3) - mod_down(a, chain64, 3) - mod_down(b, chain64, 3)
        coeffs = intt(diff)
        rows = [centered(row, q) for row, q in zip(coeffs.data, coeffs.moduli)]
        for row in rows:
            assert list(row) == list(rows[0])
            # BConv slack u*P with 0 <= u < alpha on each side, plus one wrap of a+b mod P
            assert all(-alpha < int(v) < 2 * alpha for v in row)


def test_decompose_groups_alpha_limbs(chain64, rng):
    x = random_qp(rng, chain64, 4, 64).rows(0, 5)
    digits = decompose(x, 2)
    assert [d.limbs for d in digits] == [2, 2, 1]
    upped = hoisted_mod_up(x, chain64, 4)
    assert all(u.moduli == chain64.qp_moduli(4) for u in upped)
    # a digit's own limbs pass through ModUp unchanged
    assert upped[1].select(digits[1].moduli) == digits[1]


def test_key_mult_digit_count(chain64, keys64, rng):
    level = chain64.max_level
    z0, z1 = key_mult([], keys64.relin, chain64, level)
    assert z0.moduli == z1.moduli == chain64.qp_moduli(level)
    assert z0.rep is Rep.EVAL and z0.n == 64
    assert not z0.data.any() and not z1.data.any()

    upped = hoisted_mod_up(random_qp(rng, chain64, level, 64).rows(0, level + 1), chain64, level)
    assert len(upped) == chain64.dnum(level) == 3
    with pytest.raises(ParameterError):
        key_mult(upped[:1], keys64.relin, chain64, level)
    with pytest.raises(ParameterError):
        key_mult(upped + upped[:1], keys64.relin, chain64, level)


def test_kernel_counts_match_closed_form(chain64, keys64, rng):
    level = 4
    l1, alpha = level + 1, chain64.alpha
    model = KernelModel(64)
    x = random_qp(rng, chain64, level, 64)
    c = x.rows(0, l1)
    with counters.counting() as counter:
        upped = [mod_up(d, chain64, level) for d in decompose(c, alpha)]
    assert counter.total == model.mod_up(l1, alpha).total_mults
    with counters.counting() as counter:
        key_mult(upped, keys64.relin, chain64, level)
    assert counter.total == model.key_mult(l1, alpha).total_mults
    with counters.counting() as counter:
        mod_down(x, chain64, level)
    assert counter.total == model.mod_down(l1, alpha).total_mults
    with counters.counting() as counter:
        rescale_poly(c)
    assert counter.total == model.rescale_poly(l1).total_mults
    with counters.counting() as counter:
        fused_moddown_rescale(x, chain64, level)
    assert counter.total == model.fused_moddown_rescale(l1, alpha).total_mults


def test_rotation_and_hmult_counts(chain64, keys64, rng):
    level = 3
    l1, alpha = level + 1, chain64.alpha
    model = KernelModel(64)
    ct = encrypt(rng.uniform(-1, 1, 32), keys64, chain64, level)
    with counters.counting() as counter:
        h_rot(ct, 5, keys64.rotation_key(5), chain64)
    assert counter.total == model.rotation(l1, alpha).total_mults
    assert counter.events["rotation"] == 1
    for fuse in (True, False):
        with counters.counting() as counter:
            h_mult(ct, ct, keys64.relin, chain64, fuse_moddown=fuse)
        assert counter.total == model.h_mult(l1, alpha, fuse).total_mults


def test_key_switch_stays_over_qp(chain64, keys64, rng):
    c = random_qp(rng, chain64, 2, 64).rows(0, 3)
    e0, e1 = key_switch(c, keys64.relin, chain64, 2)
    assert e0.moduli == chain64.qp_moduli(2) == e1.moduli


def test_missing_rotation_key(chain32):
    from osiris.ckks_ops import keygen

    keys = keygen(chain32, 8, seed=1, rotations=[1], n=32)
    assert keys.rotation_key(17) is keys.rotation_key(1)
    with pytest.raises(MissingKeyError):
        keys.rotation_key(2)


def test_ciphertext_and_key_dumps(chain32, keys32, rng):
    ct = encrypt(rng.uniform(-1, 1, 16), keys32, chain32, 2, seed=9)
    back = load_ciphertext(dump_ciphertext(ct), chain32)
    assert back.c0 == ct.c0 and back.c1 == ct.c1 and back.level == 2
    key = keys32.rotation_key(3)
    loaded = load_key(dump_key(key), chain32)
    assert loaded.rotation == 3 and loaded.digits == key.digits
