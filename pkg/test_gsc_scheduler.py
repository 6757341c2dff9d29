import numpy as np
import pytest

from osiris.ckks_ops import decrypt_message, encrypt
from osiris.errors import ParameterError, ScheduleError
from osiris.gsc_scheduler import (
    CacheLedger,
    ChipConfig,
    StreamedBackend,
    fitting_n2,
    modchange_timing,
    run_scheduled_matvec,
    schedule_bidirectional_oflimb,
    schedule_hadd,
    schedule_hmult,
    schedule_keyswitch,
    schedule_matvec,
)
from osiris.hadamard_unit import HadamardConfig
from osiris.matvec_algos import DiagonalizedMatrix, HoistingMode, matvec_reference, plan_bsgs, tile
from osiris.mdc_pipeline import Direction, MdcConfig
from osiris.perf_model import KernelModel, count_ops, dense_plan, matvec_cost
from osiris.seeds import PARAMETER_SETS

SET_III = PARAMETER_SETS["III"]
SET_IV = PARAMETER_SETS["IV"]
CHIP = ChipConfig()


def dense(d, n2):
    return dense_plan(d, -(-d // n2), n2)


def utilization(timeline, chip):
    return timeline.counts.total_mults / (timeline.total_cycles * chip.multiplier_count)


def test_default_chip():
    assert CHIP.multiplier_count == 32256
    assert CHIP.to_dict()["multipliers"] == 32256
    doubled = CHIP.scaled(2)
    assert doubled.p == 1024 and doubled.mdc.p == 1024 and doubled.bconv.width == 1024
    assert doubled.dram_bw_bytes_per_s == 2e12
    assert CHIP.with_bandwidth(5e11).dram_bw_bytes_per_s == 5e11
    assert CHIP.load_cycles(10**6) == 1000
    assert CHIP.load_cycles(0) == 0
    with pytest.raises(ParameterError):
        ChipConfig(p=256)


def test_modchange_units_overlap():
    t = modchange_timing(CHIP, 2**16, 14, 24)
    assert t.bconv_start == CHIP.mdc.fill_latency(2**16, 14)
    assert t.ntt_start > t.bconv_start
    assert 0 < t.overlap
    assert t.total < t.intt_cycles + t.bconv_cycles + t.ntt_cycles
    assert t.limb_period == 128
    with pytest.raises(ParameterError):
        modchange_timing(CHIP, 256, 2, 2)


def test_bidirectional_grant():
    assert schedule_bidirectional_oflimb(False).directions == 1
    assert schedule_bidirectional_oflimb(True).directions == 2
    busy = schedule_bidirectional_oflimb(True, modchange_busy=True)
    assert busy.directions == 1 and busy.hazard
    one_way = ChipConfig(mdc=MdcConfig(direction=Direction.FWD))
    assert schedule_bidirectional_oflimb(True, chip=one_way).directions == 1


def test_cache_ledger():
    ledger = CacheLedger(100)
    ledger.place("a", 60, "x")
    ledger.place("b", 30, "y")
    ledger.release("a", "z")
    ledger.place("c", 60, "w")
    assert ledger.peak == 90
    ledger.rename("c", "d")
    assert ledger.resident == {"b": 30, "d": 60}
    with pytest.raises(ScheduleError):
        ledger.place("e", 20, "v")


def test_fitting_n2_and_oversize_plans():
    assert fitting_n2(SET_III, 23, CHIP) == 4
    with pytest.raises(ScheduleError) as err:
        schedule_matvec(dense(64, 8), 23, CHIP, SET_III)
    assert err.value.suggested_n2 == 4


@pytest.mark.parametrize("mode", list(HoistingMode))
def test_timeline_totals_match_counting_model(mode):
    plan = dense(64, 4)
    timeline = schedule_matvec(plan, 21, CHIP, SET_III, mode)
    model = matvec_cost(SET_III, plan, 21, mode).total()
    assert timeline.counts.total_mults == model.total_mults
    assert timeline.dram_bytes == model.total_dram
    timeline.validate()
    starts = [ph.start_cycle for ph in timeline.phases]
    assert starts == sorted(starts)
    assert len(timeline.iterations()) == 1 + len(plan.baby_steps())
    assert timeline.to_dict()["peak_sram_bytes"] <= CHIP.working_sram(SET_III.n)


def test_key_loads_hidden_behind_limb_generation(rng):
    bandwidths = [2.5e11, 5e11, 1e12, 2e12, 4e12]
    checked = 0
    while checked < 100:
        level = int(rng.integers(1, SET_IV.max_level + 1))
        d = int(rng.choice([16, 32, 64, 128]))
        n2 = min(int(rng.choice([1, 2, 4, 8, 16])), d, fitting_n2(SET_IV, level, CHIP))
        if n2 < 1:
            continue
        i = int(rng.integers(0, len(bandwidths) - 1))
        slow, fast = CHIP.with_bandwidth(bandwidths[i]), CHIP.with_bandwidth(bandwidths[i + 1])
        plan = dense(d, n2)
        t_slow = schedule_matvec(plan, level, slow, SET_IV)
        t_fast = schedule_matvec(plan, level, fast, SET_IV)
        for ph in t_slow.iterations() + t_fast.iterations():
            if ph.t_load <= ph.t_ofgen:
                assert ph.stall_cycles == 0
        assert t_fast.stall_cycles <= t_slow.stall_cycles
        assert t_fast.total_cycles <= t_slow.total_cycles
        checked += 1


def test_single_giant_step_stalls_on_key_loads():
    ratios = {}
    for n2 in (1, 2, 4, 8):
        t = schedule_matvec(dense(64, n2), 12, CHIP, SET_IV)
        ratios[n2] = (t.stall_fraction, utilization(t, CHIP))
    assert ratios[1][0] > 0.30
    assert ratios[8][0] < ratios[1][0]
    assert ratios[1][1] < max(u for _, u in ratios.values())


def test_doubling_bandwidth_and_lanes_halves_latency():
    base = sum(schedule_matvec(dense(64, 4), lvl, CHIP, SET_III).total_cycles for lvl in (23, 22, 21, 20))
    doubled_chip = CHIP.scaled(2)
    doubled = sum(schedule_matvec(dense(64, 4), lvl, doubled_chip, SET_III).total_cycles for lvl in (23, 22, 21, 20))
    assert doubled / base == pytest.approx(0.5, rel=0.15)


def test_other_op_schedules():
    ks = schedule_keyswitch(5, CHIP, SET_IV)
    assert ks.counts.total_mults == KernelModel(SET_IV.n, of_twiddle=True).key_switch(6, 5).total_mults
    assert ks.dram_bytes == count_ops(SET_IV, {"op": "keyswitch", "level": 5}).total_dram
    for fused in (True, False):
        hm = schedule_hmult(5, CHIP, SET_IV, fuse_moddown=fused)
        model = count_ops(SET_IV, {"op": "hmult", "level": 5, "fuse_moddown": fused})
        assert hm.counts.total_mults == model.total_mults
        assert hm.dram_bytes == model.total_dram
    hadd = schedule_hadd(5, CHIP, SET_IV)
    assert hadd.counts.adds == 2 * 6 * SET_IV.n
    assert hadd.stall_cycles == 0


def test_streamed_units_reproduce_matvec(rng, chain64, keys64):
    dm = DiagonalizedMatrix(8, {k: rng.uniform(-1, 1, 8) for k in range(4)})
    v = rng.uniform(-1, 1, 8)
    ct = encrypt(tile(v, 32), keys64, chain64, 2, seed=21)
    run = run_scheduled_matvec(ct, dm, plan_bsgs(dm, 2, 2), keys64, chain64, 8, trace=True)
    expected = tile(matvec_reference(dm.to_matrix(), v), 32)
    assert np.max(np.abs(decrypt_message(run.ciphertext, keys64.secret) - expected)) < 2**-16
    assert set(run.unit_cycles) == {"mdc", "bconv", "benes", "hadamard"}
    assert run.timeline.total_cycles > 0
    assert run.counter.events["rotation"] == 2
    cycles = [e.cycle for e in run.events]
    assert cycles == sorted(cycles)
    with pytest.raises(ParameterError):
        StreamedBackend(64, 6)


def test_hadamard_height_bounds_digits():
    chip = ChipConfig.desk(64, 8, hadamard_height=3)
    assert chip.hadamard == HadamardConfig(lanes=8, height=3)
    assert chip.p == 8 and chip.mdc.n_max == 64
