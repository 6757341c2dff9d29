import json

import numpy as np
import pytest

from osiris import counters
from osiris.ckks_ops import decrypt_message, encrypt
from osiris.errors import EncodingError, ParameterError, WorkloadError
from osiris.matvec_algos import (
    BsgsPlan,
    DiagonalizedMatrix,
    HoistingMode,
    bsgs_cleartext,
    choose_bsgs_split,
    encode_diagonal_q0,
    extract_diagonals,
    matvec_bsgs,
    matvec_diagonal,
    matvec_reference,
    of_limb_extend,
    plan_bsgs,
    random_matrix,
    read_diagonal_json,
    read_matrix_csv,
    required_rotations,
    tile,
)
from osiris.perf_model import KernelModel
from osiris.poly import encode

TOL = 2**-16
SLOTS = 32


def run_mode(ct, matrix, plan, mode, keys, chain, **kw):
    with counters.counting() as c:
        out = matvec_bsgs(ct, matrix, plan, mode, keys, chain, **kw)
    return out, c


def test_diagonals_index_formula(rng):
    m = rng.uniform(-1, 1, (8, 8))
    dm = extract_diagonals(m)
    assert dm.n == 8
    for k in range(8):
        for i in range(8):
            assert dm.diagonals[k][i] == m[i, (i + k) % 8]
    assert np.array_equal(dm.to_matrix(), m)
    ident = extract_diagonals(np.eye(4))
    assert ident.indices() == [0] and list(ident.diagonals[0]) == [1, 1, 1, 1]
    with pytest.raises(ParameterError):
        extract_diagonals(np.ones((2, 3)))


def test_bsgs_cleartext_matches_product(rng):
    for width in (8, 16):
        m = random_matrix(width, 0.6, rng)
        dm = extract_diagonals(m)
        n1, n2 = choose_bsgs_split(max(dm.indices()) + 1)
        v = rng.uniform(-1, 1, width)
        assert np.allclose(bsgs_cleartext(dm, plan_bsgs(dm, n1, n2), v), matvec_reference(m, v))


def test_split_choice():
    assert choose_bsgs_split(6) == (3, 2)
    assert choose_bsgs_split(64, 4) == (16, 4)
    assert choose_bsgs_split(64) == (8, 8)
    with pytest.raises(ParameterError):
        choose_bsgs_split(0)


def test_plan_steps_for_six_diagonals():
    plan = BsgsPlan(3, 2, tuple(range(6)))
    assert plan.baby_steps() == [1, 2]
    assert plan.giant_steps() == [3]
    assert plan.rotations() == [1, 2, 3]
    assert plan.groups() == {0: [0, 1, 2], 1: [0, 1, 2]}
    assert plan.ratio == 1.5
    with pytest.raises(ParameterError):
        BsgsPlan(2, 2, (0, 4))
    with pytest.raises(ParameterError):
        BsgsPlan(0, 2, ())


def test_six_diagonal_rotation_counts(rng, chain64, keys64):
    dm = DiagonalizedMatrix(8, {k: rng.uniform(-1, 1, 8) for k in range(6)})
    v = rng.uniform(-1, 1, 8)
    ct = encrypt(tile(v, SLOTS), keys64, chain64, 2, seed=3)
    expected = tile(matvec_reference(dm.to_matrix(), v), SLOTS)
    plan = BsgsPlan(3, 2, tuple(range(6)))
    for mode in HoistingMode:
        out, c = run_mode(ct, dm, plan, mode, keys64, chain64)
        assert c.events["rotation"] == (3 - 1) + (2 - 1)
        assert np.max(np.abs(decrypt_message(out, keys64.secret) - expected)) < TOL
    with counters.counting() as c:
        out = matvec_diagonal(ct, dm, keys64, chain64)
    assert c.events["rotation"] == 6 - 1
    assert c.events["keyswitch"] == 5
    assert np.max(np.abs(decrypt_message(out, keys64.secret) - expected)) < TOL


def test_modes_agree_on_random_matrices(rng, chain64, keys64):
    model = KernelModel(64)
    for trial in range(20):
        width = int(rng.choice([8, 16, 32]))
        dm = extract_diagonals(random_matrix(width, float(rng.uniform(0.2, 0.8)), rng))
        span = max(dm.indices()) + 1
        n1, n2 = choose_bsgs_split(span, 4)
        plan = plan_bsgs(dm, n1, n2)
        level = int(rng.integers(1, chain64.max_level + 1))
        v = rng.uniform(-0.5, 0.5, width)
        ct = encrypt(tile(v, SLOTS), keys64, chain64, level, seed=trial)
        expected = tile(matvec_reference(dm.to_matrix(), v), SLOTS)

        totals = {}
        for mode in HoistingMode:
            out, c = run_mode(ct, dm, plan, mode, keys64, chain64)
            assert np.max(np.abs(decrypt_message(out, keys64.secret) - expected)) < TOL
            assert c.events["rotation"] == len(plan.baby_steps()) + len(plan.giant_steps())
            assert c.total == model.matvec(plan, level + 1, chain64.alpha, mode).total().total_mults
            totals[mode] = c.total
        assert totals[HoistingMode.SH] <= totals[HoistingMode.NH]
        if plan.baby_steps() and plan.giant_steps():
            assert totals[HoistingMode.DH] <= totals[HoistingMode.SH]


def test_single_hoisting_shares_one_decompose(rng, chain64, keys64):
    dm = DiagonalizedMatrix(16, {k: rng.uniform(-1, 1, 16) for k in range(12)})
    plan = plan_bsgs(dm, 4, 3)
    ct = encrypt(tile(rng.uniform(-0.5, 0.5, 16), SLOTS), keys64, chain64, 3, seed=5)
    _, nh = run_mode(ct, dm, plan, HoistingMode.NH, keys64, chain64)
    _, sh = run_mode(ct, dm, plan, HoistingMode.SH, keys64, chain64)
    _, dh = run_mode(ct, dm, plan, HoistingMode.DH, keys64, chain64)
    assert nh.events["decompose"] == 3 + 2
    assert sh.events["decompose"] == 1 + 2
    assert dh.events["decompose"] == 1 + 2
    assert dh.mults["moddown"] < sh.mults["moddown"] == nh.mults["moddown"]


def test_degenerate_plans(rng, chain64, keys64):
    v = rng.uniform(-1, 1, 8)
    ct = encrypt(tile(v, SLOTS), keys64, chain64, 2, seed=9)
    ident = extract_diagonals(np.eye(8))
    for mode in HoistingMode:
        out, c = run_mode(ct, ident, plan_bsgs(ident, 1, 1), mode, keys64, chain64)
        assert c.events["rotation"] == 0
        assert np.max(np.abs(decrypt_message(out, keys64.secret) - tile(v, SLOTS))) < TOL
    zero = DiagonalizedMatrix(8, {})
    out, _ = run_mode(ct, zero, BsgsPlan(1, 1, ()), HoistingMode.DH, keys64, chain64)
    assert np.max(np.abs(decrypt_message(out, keys64.secret))) < TOL

    dm = DiagonalizedMatrix(8, {k: rng.uniform(-1, 1, 8) for k in range(4)})
    _, c = run_mode(ct, dm, plan_bsgs(dm, 4, 1), HoistingMode.NH, keys64, chain64)
    assert c.events["rotation"] == 3
    with pytest.raises(ParameterError):
        matvec_bsgs(ct, dm, plan_bsgs(ident, 4, 1), HoistingMode.NH, keys64, chain64)


def test_q0_limb_regeneration_is_exact(rng, chain64):
    values = rng.uniform(-0.1, 0.1, SLOTS)
    scale = float(chain64.q_primes(3)[-1].value)
    basis = chain64.qp_primes(3)
    assert of_limb_extend(encode_diagonal_q0(values, scale, chain64, 64), basis) == encode(values, scale, basis, 64)
    zero = of_limb_extend(encode_diagonal_q0(np.zeros(SLOTS), scale, chain64, 64), basis)
    assert not zero.data.any()
    with pytest.raises(EncodingError):
        encode_diagonal_q0(np.full(SLOTS, 0.9), scale, chain64, 64)


def test_matvec_with_regenerated_diagonals(rng, chain64, keys64):
    dm = DiagonalizedMatrix(8, {k: rng.uniform(-0.1, 0.1, 8) for k in (0, 2, 3, 5)})
    v = rng.uniform(-1, 1, 8)
    ct = encrypt(tile(v, SLOTS), keys64, chain64, 3, seed=13)
    plan = plan_bsgs(dm, 3, 2)
    expected = tile(matvec_reference(dm.to_matrix(), v), SLOTS)
    for mode in HoistingMode:
        out, _ = run_mode(ct, dm, plan, mode, keys64, chain64, of_limb=True)
        assert np.max(np.abs(decrypt_message(out, keys64.secret) - expected)) < TOL


def test_required_rotations():
    plan = BsgsPlan(3, 2, tuple(range(6)))
    other = DiagonalizedMatrix(8, {0: np.ones(8), 7: np.ones(8)})
    assert required_rotations([plan], [other]) == [1, 2, 3, 7]


def test_matrix_files(tmp_path):
    csv_path = tmp_path / "m.csv"
    csv_path.write_text("1,0\n0,2\n")
    assert np.array_equal(read_matrix_csv(csv_path), np.array([[1.0, 0.0], [0.0, 2.0]]))
    (tmp_path / "ragged.csv").write_text("1,0\n2\n")
    with pytest.raises(WorkloadError):
        read_matrix_csv(tmp_path / "ragged.csv")

    diag_path = tmp_path / "d.json"
    diag_path.write_text(json.dumps({"width": 4, "diagonals": {"0": [1, 1, 1, 1], "-1": [2, 2, 2, 2]}}))
    dm = read_diagonal_json(diag_path)
    assert dm.indices() == [0, 3]
    (tmp_path / "bad.json").write_text(json.dumps({"width": 4, "diagonals": {"0": [1, 1]}}))
    with pytest.raises(WorkloadError):
        read_diagonal_json(tmp_path / "bad.json")
    (tmp_path / "missing.json").write_text(json.dumps({"diagonals": {}}))
    with pytest.raises(WorkloadError):
        read_diagonal_json(tmp_path / "missing.json")
