import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import matengine.engine as engine_mod
from matengine.analytic import (
    ArrayGeometry,
    Control,
    InvalidPolicyError,
    PEVariant,
    PolicyDescriptor,
    Prefetch,
    latency_base,
    steady_state_ii,
)
from matengine.engine import (
    ArrayConfig,
    EngineConsistencyError,
    InFlightOp,
    Stage,
    StallReason,
    StreamMM,
    SystolicEngine,
    WeightSource,
    pe_occupancy,
    run_mm_stream,
    run_single,
)
from matengine.isa import Instruction, TileRegisterFile, apply_write, pack_a, pack_b, pack_c
from matengine.reference import reference_gemm_tile


def valid_configs(t_k=32, t_n=16, t_m=16):
    out = []
    for pe in PEVariant:
        for control in Control:
            for prefetch in Prefetch:
                if control is not Control.WLS and prefetch is Prefetch.CONSERVATIVE:
                    continue
                try:
                    out.append(ArrayConfig.build(t_k, t_n, t_m, control, pe, prefetch))
                except InvalidPolicyError:
                    pass
    return out


def random_stream(rng, geom, regs, reload_prob=0.3):
    weights, mms = {}, []
    for r in regs:
        fresh = r not in weights or rng.random() < reload_prob
        if fresh:
            weights[r] = rng.standard_normal((geom.t_k, geom.t_n)).astype(np.float32)
        mms.append(
            StreamMM(
                rng.standard_normal((geom.t_m, geom.t_k)).astype(np.float32),
                weights[r],
                rng.standard_normal((geom.t_m, geom.t_n)).astype(np.float32),
                weight_reg=r,
                weight_clean=not fresh,
            )
        )
    return mms


def test_sixteen_valid_configs():
    assert len(valid_configs()) == 16


def test_two_by_two_example():
    cfg = ArrayConfig.build(2, 2, 2)
    a = np.array([[1, 2], [3, 4]], np.float32)
    b = np.array([[5, 6], [7, 8]], np.float32)
    c = np.array([[1, 0], [0, 1]], np.float32)
    engine = SystolicEngine(cfg, log_events=True)
    op = engine.offer(a, b, c)
    assert isinstance(op, InFlightOp)
    assert (op.issue, op.ff_start, op.fs_start, op.dr_start, op.end) == (0, 1, 3, 4, 6)
    for cycle in range(5):
        engine.step()
    # C[1][1] is captured at the end of the sixth cycle
    assert op.out[1, 1] == 0 and op.written == 3
    assert [o.op_id for o in engine.step()] == [0]
    assert np.array_equal(op.out, c + a @ b)
    assert engine.stats.busy.tolist() == [[2, 2], [2, 2]]
    assert op.stage(0) is Stage.WL and op.stage(2) is Stage.FF and op.stage(4) is Stage.DR
    assert op.stage(6) is Stage.DONE
    log = engine.event_log()
    assert "0 op0 WL" in log and "1 op0 FF" in log and "6 op0 Done" in log
    assert "2 - busy 3/4" in log and "4 - busy 1/4" in log


@pytest.mark.parametrize("cfg", valid_configs(), ids=lambda c: f"{c.policy.name}-{c.policy.prefetch.value}")
def test_every_config_is_bit_exact_and_matches_model(cfg):
    rng = np.random.default_rng(7)
    g = cfg.geometry
    for regs, reused in (([4] * 6, True), ([4, 5] * 3, False)):
        mms = random_stream(rng, g, regs, reload_prob=0.0)
        outs, stats = run_mm_stream(cfg, mms)
        for out, mm in zip(outs, mms):
            assert np.array_equal(out, reference_gemm_tile(mm.c, mm.a, mm.b, dm=g.dm))
        assert stats.retire_cycles[0] == latency_base(g)
        assert stats.initiation_intervals[-1] == steady_state_ii(g, cfg.policy, weight_reused=reused)


geometries = st.tuples(st.integers(1, 12).map(lambda v: 2 * v), st.integers(1, 18), st.integers(1, 18))


@settings(max_examples=60, deadline=None)
@given(geometries, st.integers(0, 15), st.lists(st.integers(4, 5), min_size=1, max_size=6), st.integers(0, 2**32 - 1))
def test_random_streams_exact_and_timing_consistent(dims, cfg_index, regs, seed):
    cfg = valid_configs(*dims)[cfg_index]
    rng = np.random.default_rng(seed)
    mms = random_stream(rng, cfg.geometry, regs)
    outs, stats = run_mm_stream(cfg, mms)
    for out, mm in zip(outs, mms):
        assert np.array_equal(out, reference_gemm_tile(mm.c, mm.a, mm.b, dm=cfg.geometry.dm))
    _, timing = run_mm_stream(cfg, mms, functional=False)
    assert timing.retire_cycles == stats.retire_cycles
    assert np.array_equal(timing.busy, stats.busy)
    assert (stats.busy == cfg.geometry.t_m * len(mms)).all()


def test_analytic_ii_over_grid():
    for t_k in range(2, 26, 4):
        for t_n in (1, 5, 13, 20):
            for t_m in (1, 7, 16):
                for cfg in valid_configs(t_k, t_n, t_m):
                    for reused in (False, True):
                        regs = [4] * 10 if reused else [4, 5] * 5
                        mms = [StreamMM(weight_reg=r) for r in regs]
                        _, stats = run_mm_stream(cfg, mms, functional=False)
                        want = steady_state_ii(cfg.geometry, cfg.policy, reused)
                        assert set(stats.initiation_intervals[-3:]) == {want}


@pytest.mark.parametrize("source", [engine_mod.WeightSource.LOAD, engine_mod.WeightSource.BYPASS])
def test_consistency_checker_catches_bad_schedule(monkeypatch, source):
    # accept every offer immediately, ignoring all hazards
    def reckless(self, t, bypass):
        delay = self.geometry.physical_rows - 1 if source is WeightSource.LOAD else 0
        return engine_mod._Plan(t, source, delay, None)

    monkeypatch.setattr(SystolicEngine, "_plan", reckless)
    cfg = ArrayConfig.build(8, 4, 4, Control.PIPE)
    rng = np.random.default_rng(0)
    mms = random_stream(rng, cfg.geometry, [4, 5, 4])
    with pytest.raises(EngineConsistencyError):
        run_mm_stream(cfg, mms)


def test_shifted_pipe_rule_still_respects_weight_links(monkeypatch):
    # with fewer columns than rows the stage rule has slack over the link rule
    monkeypatch.setattr(engine_mod, "PIPE_WL_DELAY", -4)
    cfg = ArrayConfig.build(8, 4, 4, Control.PIPE)
    rng = np.random.default_rng(0)
    mms = random_stream(rng, cfg.geometry, [4, 5, 4])
    outs, stats = run_mm_stream(cfg, mms)
    assert stats.initiation_intervals == [steady_state_ii(cfg.geometry, cfg.policy) - 4] * 2
    for out, mm in zip(outs, mms):
        assert np.array_equal(out, reference_gemm_tile(mm.c, mm.a, mm.b))


def test_single_mm_occupancy():
    cfg = ArrayConfig.build(32, 16, 16)
    rng = np.random.default_rng(1)
    a, b, c = rng.standard_normal((16, 32)), rng.standard_normal((32, 16)), np.zeros((16, 16))
    out, stats = run_single(cfg, a, b, c)
    assert stats.total_cycles == 94
    assert (stats.busy == 16).all()
    assert np.allclose(pe_occupancy(stats), 16 / 94)
    assert stats.mac_count == 32 * 16 * 16


def test_bypass_and_stall_reasons():
    cfg = ArrayConfig.build(4, 4, 4, Control.WLBP)
    engine = SystolicEngine(cfg, functional=False)
    first = engine.offer(weight_reg=4, weight_clean=False)
    assert first.source is WeightSource.LOAD
    assert engine.offer(weight_reg=4, weight_clean=True) is StallReason.ARRAY_BUSY
    at, reason = engine.earliest_issue(4, True)
    assert at == first.ff_start + 4 and reason is StallReason.ARRAY_BUSY
    engine.advance_to(at)
    second = engine.offer(weight_reg=4, weight_clean=True)
    assert second.source is WeightSource.BYPASS and second.ff_start == at
    # dirty weights must be reloaded
    engine.advance_to(engine.earliest_issue(4, False)[0])
    third = engine.offer(weight_reg=4, weight_clean=False)
    assert third.source is WeightSource.LOAD


def test_pipe_waits_on_weight_links_when_columns_outnumber_rows():
    cfg = ArrayConfig.build(2, 8, 2, Control.PIPE)
    engine = SystolicEngine(cfg, functional=False)
    engine.offer(weight_reg=4)
    engine.advance_to(engine.last.dr_start)
    assert engine.offer(weight_reg=5) is StallReason.WEIGHT_LINK_BUSY


def test_wls_prefetch_source_and_requirements():
    cfg = ArrayConfig.build(32, 16, 16, Control.WLS, PEVariant.DB)
    engine = SystolicEngine(cfg, functional=False)
    assert engine.offer(weight_reg=4).source is WeightSource.LOAD
    engine.advance_to(engine.earliest_issue(5, False)[0])
    assert engine.offer(weight_reg=5).source is WeightSource.PREFETCH
    with pytest.raises(InvalidPolicyError):
        ArrayConfig.build(32, 16, 16, Control.WLS, PEVariant.DM)
    with pytest.raises(InvalidPolicyError):
        ArrayConfig(ArrayGeometry(32, 16, 16), PolicyDescriptor(Control.BASE, PEVariant.DM))


def test_try_issue_reads_register_file():
    cfg = ArrayConfig.build(32, 16, 16)
    rng = np.random.default_rng(3)
    a, b, c = rng.standard_normal((16, 32)), rng.standard_normal((32, 16)), rng.standard_normal((16, 16))
    rf = TileRegisterFile.zeros()
    rf = apply_write(rf, 6, pack_a(a))
    rf = apply_write(rf, 4, pack_b(b))
    rf = apply_write(rf, 0, pack_c(c))
    engine = SystolicEngine(cfg)
    op = engine.try_issue(Instruction.mm(0, 6, 4), rf)
    assert op.source is WeightSource.LOAD
    engine.drain()
    assert np.array_equal(op.out, reference_gemm_tile(c, a, b))
    with pytest.raises(ValueError):
        engine.try_issue(Instruction.tl(0, 0, 64), rf)


def test_cannot_rewind():
    engine = SystolicEngine(ArrayConfig.build(2, 2, 2), functional=False)
    engine.advance_to(5)
    with pytest.raises(ValueError):
        engine.advance_to(4)
