from fractions import Fraction

import numpy as np
import pytest

from osiris import counters
from osiris.ckks_ops import encrypt, p_mult
from osiris.errors import ParameterError, PerfModelError
from osiris.gsc_scheduler import ChipConfig
from osiris.matvec_algos import HoistingMode
from osiris.perf_model import (
    KernelModel,
    OpCounts,
    ParameterSet,
    amortized_metrics,
    amortized_per_slot,
    count_ops,
    dense_plan,
    effective_mode,
    kernel_breakdown,
    matvec_cost,
    roofline,
    storage_report,
)
from osiris.poly import encode
from osiris.seeds import PARAMETER_SETS, get_parameter_set

SET_III = PARAMETER_SETS["III"]
BOOT_LEVELS = (23, 22, 21, 20)


def boot_ops(mode):
    return [{"op": "matvec", "d": 64, "n1": 16, "n2": 4, "level": lvl, "mode": mode} for lvl in BOOT_LEVELS]


def test_parameter_set_shapes():
    assert SET_III.max_level == 23
    assert SET_III.alpha_at(8) == 5
    assert SET_III.alpha_at(9) == 14
    assert SET_III.digit_sizes(23) == [14, 10]
    assert SET_III.dnum_at(8) == 2
    assert SET_III.log_qp(23) <= 1630
    with pytest.raises(ParameterError):
        SET_III.check_level(24)
    with pytest.raises(ParameterError):
        ParameterSet("bad", n=2**14, slots=2**14, l_eff=5, alpha=2, dnum=2, q0_bits=(40,), qi_bits=32, p_bits=40, h=192)
    with pytest.raises(ParameterError):
        ParameterSet("bad", n=2**14, slots=2**15, l_eff=5, alpha=2, dnum=3, q0_bits=(40,), qi_bits=32, p_bits=40, h=192)


def test_parameter_set_from_chain(chain64):
    params = ParameterSet.from_chain(chain64, 64)
    assert params.l_eff == chain64.max_level
    assert params.alpha == 2
    assert params.limb_count(2) == chain64.limb_count(2)
    assert get_parameter_set("desk-16").n == 16


def test_small_closed_forms():
    model = KernelModel(16)
    assert model.ntt(1).mults["ntt"] == 32
    assert model.intt(1).mults["intt"] == 32 + 8
    assert KernelModel(16, of_twiddle=True).ntt(1).total_mults == 64
    assert model.bconv(2, 3).total_mults == 2 * 16 + 6 * 16
    assert model.mod_change(2, 0).total_mults == 0
    with pytest.raises(ParameterError):
        KernelModel(12)
    with pytest.raises(ParameterError):
        model.rescale_poly(1)


def test_diagonal_multiply_counts_match(chain64, keys64, rng):
    ct = encrypt(rng.uniform(-1, 1, 32), keys64, chain64, 3, seed=1)
    pt = encode(rng.uniform(-1, 1, 32), 2.0**20, ct.basis, 64)
    with counters.counting() as c:
        p_mult(ct, pt, 2.0**20)
    assert c.total == KernelModel(64).diag_mult(4).total_mults


def test_double_hoisting_saves_mults_at_full_scale():
    nh = sum((count_ops(SET_III, op) for op in boot_ops("nh")), OpCounts()).total_mults
    dh = sum((count_ops(SET_III, op) for op in boot_ops("dh")), OpCounts()).total_mults
    assert nh / dh == pytest.approx(1.68, rel=0.10)


def test_hoisting_order_holds_per_level():
    for level in BOOT_LEVELS:
        plan = dense_plan(64, 16, 4)
        totals = {m: matvec_cost(SET_III, plan, level, m).total().total_mults for m in HoistingMode}
        assert totals[HoistingMode.DH] < totals[HoistingMode.SH] < totals[HoistingMode.NH]


def test_matvec_events_and_traffic():
    plan = dense_plan(64, 16, 4)
    nh = matvec_cost(SET_III, plan, 23, HoistingMode.NH).total()
    dh = matvec_cost(SET_III, plan, 23, HoistingMode.DH).total()
    assert nh.events["rotation"] == dh.events["rotation"] == 15 + 3
    assert nh.events["decompose"] == 18
    assert dh.events["decompose"] == 1 + 3
    assert nh.dram_bytes["keys"] == dh.dram_bytes["keys"]
    assert nh.dram_bytes["diagonals"] == dh.dram_bytes["diagonals"]


def test_effective_mode_without_baby_steps():
    plan = dense_plan(4, 1, 4)
    assert effective_mode(plan, HoistingMode.DH) is HoistingMode.SH
    assert effective_mode(dense_plan(4, 2, 2), "dh") is HoistingMode.DH
    with pytest.raises(ParameterError):
        dense_plan(9, 2, 4)


def test_kernel_breakdown_sums_to_matvec_total():
    plan = dense_plan(64, 16, 4)
    parts = kernel_breakdown(SET_III, plan, 23, HoistingMode.DH)
    assert parts["decompose"] == 0
    assert sum(parts.values()) == matvec_cost(SET_III, plan, 23, HoistingMode.DH).total().total_mults


def test_count_ops_other_kinds():
    params = get_parameter_set("IV")
    assert count_ops(params, {"op": "boot_marker"}).total_mults == 0
    assert count_ops(params, {"op": "hadd", "level": 3}).adds == 2 * 4 * params.n
    ks = count_ops(params, {"op": "keyswitch", "level": 3})
    assert ks.events["keyswitch"] == 1 and ks.dram_bytes["keys"] > 0
    fused = count_ops(params, {"op": "hmult", "level": 5})
    unfused = count_ops(params, {"op": "hmult", "level": 5, "fuse_moddown": False})
    assert fused.total_mults < unfused.total_mults
    with pytest.raises(PerfModelError):
        count_ops(params, {"op": "bootstrap"})


def test_full_scale_storage():
    chip = ChipConfig()
    assert chip.multiplier_count == 32256
    report = storage_report(chip, get_parameter_set("IV"), level=12).as_dict()
    assert report["twiddle_full_mb"] == pytest.approx(13, rel=0.1)
    assert report["twiddle_decomposed_mb"] == pytest.approx(0.20, rel=0.1)
    assert report["mdc_buffers_mb"] == pytest.approx(26, rel=0.1)
    assert chip.working_sram(2**16) < chip.sram_bytes


def test_roofline_bounds():
    chip = ChipConfig()
    counts = OpCounts.of(keymult=10**9).with_dram(keys=10**9)
    point = roofline(counts, chip, 10**6, "w")
    assert point.intensity == 1.0
    assert point.utilization <= 1.0
    assert point.as_row()["workload"] == "w"
    assert point.ridge == pytest.approx(chip.multiplier_count * chip.clock_hz / chip.dram_bw_bytes_per_s)
    with pytest.raises(PerfModelError):
        roofline(counts, chip, 0)
    with pytest.raises(PerfModelError):
        roofline(counts, chip, 1)
    compute_only = roofline(OpCounts.of(ntt=1000), chip, 1)
    assert compute_only.intensity == float("inf")


def test_amortized_per_slot_arithmetic():
    assert amortized_per_slot(0, [1], 1, 2) == 1
    assert amortized_per_slot(1, [2, 3], 2, 4) == Fraction(3, 2)
    with pytest.raises(PerfModelError):
        amortized_per_slot(1, [1], 0, 4)
    with pytest.raises(PerfModelError):
        amortized_per_slot(1, [1], 1, 1)


def test_amortized_matvec_time_from_reported_latencies():
    # 2.70 ms double-hoisted bootstrap plus nine 0.207 ms d=128 matvecs over levels 0..8
    metrics = amortized_metrics("0.00270", 2**16, 8, matvec_times=["0.000207"] * 9)
    assert round(float(metrics.t_mxv_as) * 1e9, 1) == 17.4
    assert metrics.t_mult_as is None
    assert metrics.as_dict()["t_mult_as_s"] is None
    exact = amortized_metrics(0.0027, 2**16, 8, matvec_times=[0.000207] * 9)
    assert exact.t_mxv_as == metrics.t_mxv_as
