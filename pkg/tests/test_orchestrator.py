import json
import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loraserve.atmm import DEFAULT_CONFIG, TilingTable, count_flops
from loraserve.batching import UnknownAdapterError
from loraserve.matrix import max_abs_diff
from loraserve.model import (
    BaseModel,
    LoraAdapter,
    Merged,
    Mixture,
    ModeError,
    ModelState,
    Unmerged,
    delta_w,
)
from loraserve.orchestrator import (
    AdapterCache,
    Estimates,
    MetricsSink,
    Request,
    SchedulerConfig,
    avg_token_latency,
    hottest_adapter,
    init_delora,
    mode_switch,
    read_requests_csv,
    schedule,
    schedule_forced,
    serve_loop,
    update_credits,
)
from loraserve.verify import hand_traces

TABLE = TilingTable.single(DEFAULT_CONFIG)


def req(rid, adapter, credit=0.0, arrival=None):
    r = Request(rid, adapter, float(rid if arrival is None else arrival), 4, 3)
    r.credit = credit
    return r


class TestRequest:
    def test_task_head_is_one_round(self):
        assert Request(0, 0, 0.0, 4, 9, head_kind="task").effective_output_len == 1
        assert Request(0, 0, 0.0, 4, 9).effective_output_len == 9

    def test_fresh_resets_runtime_fields(self):
        r = Request(0, 0, 5.0, 4, 2)
        r.credit, r.rounds_done = 3.0, 2
        f = r.fresh()
        assert f.credit == 0.0 and f.rounds_done == 0 and f.ready_time == 5.0
        assert r.rounds_done == 2


class TestCredits:
    def test_fresh_request_zero(self):
        r = req(0, 0, arrival=10.0)
        r.ready_time = 10.0
        update_credits([r], 10.0, Unmerged, Estimates())
        assert r.credit == 0.0

    def test_formula(self):
        est = Estimates()
        est.observe_round("merged", 20.0)
        est.observe_switch("merged", "mixture", 5.0)
        est.observe_switch("merged", "unmerged", 5.0)
        r = req(0, 1, arrival=0.0)
        r.ready_time = 0.0
        update_credits([r], 100.0, Merged(0), est)
        assert r.credit == pytest.approx(125.0)

    def test_no_switch_cost_for_merged_adapter(self):
        est = Estimates()
        est.observe_round("merged", 20.0)
        est.observe_switch("merged", "unmerged", 5.0)
        est.observe_switch("merged", "mixture", 5.0)
        r = req(0, 0, arrival=0.0)
        r.ready_time = 0.0
        update_credits([r], 100.0, Merged(0), est)
        assert r.credit == pytest.approx(120.0)

    def test_ewma(self):
        est = Estimates()
        est.observe_round("unmerged", 10.0)
        est.observe_round("unmerged", 20.0)
        assert est.exec_ms("unmerged") == pytest.approx(10.0 + 0.2 * 10.0)

    @settings(max_examples=30)
    @given(st.lists(st.floats(0, 1000), min_size=2, max_size=10))
    def test_monotone_in_time(self, times):
        est = Estimates()
        est.observe_round("unmerged", 3.0)
        r = req(0, 0, arrival=0.0)
        r.ready_time = 0.0
        last = -1.0
        for t in sorted(times):
            update_credits([r], t, Unmerged, est)
            assert r.credit >= last
            last = r.credit


class TestSchedule:
    def test_empty_queue_keeps_mode(self):
        assert schedule([], Merged(3), SchedulerConfig()) == (Merged(3), [])

    @pytest.mark.parametrize("case", range(3))
    def test_hand_traces(self, case):
        theta, cases = hand_traces()
        name, queue, mode, ids = cases[case]
        got_mode, batch = schedule(queue, Unmerged, SchedulerConfig(max_bs=8, theta=theta))
        assert got_mode == mode, name
        assert [r.id for r in batch] == ids

    def test_tie_goes_to_lowest_id(self):
        q = [req(i, 5 if i % 2 else 2) for i in range(10)]
        assert hottest_adapter(q) == 2
        mode, batch = schedule(q, Unmerged, SchedulerConfig(max_bs=8, theta=1.0))
        assert mode == Merged(2) and all(r.adapter_id == 2 for r in batch)

    def test_short_queue_compares_against_max_bs(self):
        # Four requests of one adapter: 4/8 is not above half, so unmerged.
        q = [req(i, 0) for i in range(4)]
        assert schedule(q, Unmerged, SchedulerConfig(max_bs=8, theta=1.0))[0] == Unmerged

    def test_many_starving_truncated(self):
        q = [req(i, i % 3, credit=50.0) for i in range(12)]
        mode, batch = schedule(q, Unmerged, SchedulerConfig(max_bs=8, theta=1.0))
        assert mode == Unmerged and [r.id for r in batch] == list(range(8))

    def test_infinite_theta_by_default(self):
        q = [req(i, 0, credit=1e9) for i in range(6)]
        assert schedule(q, Unmerged, SchedulerConfig(max_bs=8))[0] == Merged(0)


queue_strategy = st.lists(
    st.tuples(st.integers(0, 3), st.floats(0, 20)), min_size=0, max_size=30,
)


@settings(max_examples=100)
@given(queue_strategy, st.integers(1, 12), st.floats(0.5, 15))
def test_schedule_invariants(items, max_bs, theta):
    q = [req(i, a, c) for i, (a, c) in enumerate(items)]
    cfg = SchedulerConfig(max_bs=max_bs, theta=theta)
    mode, batch = schedule(q, Unmerged, cfg)
    # Pure: same inputs, same outputs.
    assert schedule(q, Unmerged, cfg) == (mode, batch)
    assert len(batch) <= max_bs
    assert len({id(r) for r in batch}) == len(batch)
    starving = [r for r in q if r.credit > theta]
    if len(starving) <= max_bs:
        assert all(r in batch for r in starving)
    if mode.kind == "merged":
        assert all(r.adapter_id == mode.adapter_id for r in batch)
    # FCFS inside each class.
    rest = [r.id for r in batch if r.credit <= theta]
    assert rest == sorted(rest)


class TestForced:
    def test_merged_takes_hot_adapter(self):
        q = [req(0, 1), req(1, 2), req(2, 2)]
        assert schedule_forced(q, "merged", SchedulerConfig())[0] == Merged(2)

    def test_unmerged_fcfs(self):
        q = [req(i, i % 2) for i in range(10)]
        mode, batch = schedule_forced(q, "unmerged", SchedulerConfig(max_bs=4))
        assert mode == Unmerged and [r.id for r in batch] == [0, 1, 2, 3]

    def test_unknown(self):
        with pytest.raises(ValueError):
            schedule_forced([req(0, 0)], "sideways", SchedulerConfig())


@pytest.fixture
def world(rng):
    model = BaseModel.random(2, 64, 32, rng)
    adapters = {i: LoraAdapter.random(i, 2, 64, 8, rng, num_classes=4) for i in range(3)}
    return model, adapters


class TestModeSwitch:
    def test_unmerged_to_merged(self, world):
        model, adapters = world
        before = model.checkpoint()
        state = ModelState()
        mode_switch(model, state, Merged(1), adapters, TABLE)
        assert state.mode == Merged(1)
        for layer in range(2):
            diff = model.checkpoint()[layer] - before[layer]
            assert np.allclose(diff, delta_w(adapters[1], layer, TABLE).array, atol=1e-6)

    def test_merged_to_mixture_writes_nothing(self, world):
        model, adapters = world
        state = ModelState()
        mode_switch(model, state, Merged(0), adapters, TABLE)
        snap = model.checkpoint()
        mode_switch(model, state, Mixture(0), adapters, TABLE)
        assert np.array_equal(model.checkpoint(), snap)
        assert state.delora_branch is adapters[0]

    def test_merged_to_other_merged(self, world):
        model, adapters = world
        base = model.checkpoint()
        state = ModelState()
        mode_switch(model, state, Merged(0), adapters, TABLE)
        mode_switch(model, state, Merged(2), adapters, TABLE)
        direct = BaseModel(base, model.lm_head.array)
        s2 = ModelState()
        mode_switch(direct, s2, Merged(2), adapters, TABLE)
        for a, b in zip(model.layer_weights, direct.layer_weights):
            assert max_abs_diff(a, b) <= 1e-4 * float(np.max(np.abs(b.array)))

    def test_mixture_to_unmerged_restores(self, world):
        model, adapters = world
        base = model.checkpoint()
        state = ModelState()
        mode_switch(model, state, Mixture(1), adapters, TABLE)
        assert state.mode == Mixture(1) and state.delora_branch is adapters[1]
        mode_switch(model, state, Unmerged, adapters, TABLE)
        assert state.delora_branch is None
        assert np.max(np.abs(model.checkpoint() - base)) <= 1e-6

    def test_same_mode_is_free(self, world):
        model, adapters = world
        assert mode_switch(model, ModelState(), Unmerged, adapters, TABLE) == 0.0

    def test_unknown_target(self, world):
        model, adapters = world
        with pytest.raises(UnknownAdapterError):
            mode_switch(model, ModelState(), Merged(42), adapters, TABLE)

    def test_init_delora_checks(self, world):
        _, adapters = world
        with pytest.raises(ModeError):
            init_delora(ModelState(), adapters[0])
        with pytest.raises(ModeError):
            init_delora(ModelState(Mixture(0)), None)


class TestCacheAndSink:
    def test_lru(self):
        cache = AdapterCache(capacity=2, load_ms=3.0)
        assert cache.touch([0, 1]) == 6.0
        assert cache.touch([0]) == 0.0
        assert cache.touch([2]) == 3.0   # evicts 1
        assert cache.touch([1]) == 3.0
        assert cache.touch([0, 1]) == 3.0   # 0 was evicted by 1

    def test_unbounded(self):
        cache = AdapterCache()
        assert cache.touch([0, 1, 2]) == 0.0

    def test_sink_drain_from_thread(self):
        sink = MetricsSink()
        got = []

        def reader():
            got.extend(sink.drain())

        for i in range(5):
            sink.append(i)
        t = threading.Thread(target=reader)
        t.start()
        t.join()
        assert got == list(range(5))
        assert sink.drain() == []


class TestServeLoop:
    def test_single_request(self, world):
        model, adapters = world
        r = Request(0, 1, 0.0, 6, 4)
        m = serve_loop(model, adapters, [r], SchedulerConfig(), TABLE)
        rec = m.requests[0]
        assert rec["rounds"] == 4
        assert m.avg_token_latency_ms == round(rec["e2e_ms"] / (6 + 4), 6)
        assert m.unserved == 0

    def test_empty_trace(self, world):
        model, adapters = world
        m = serve_loop(model, adapters, [], SchedulerConfig(), TABLE)
        assert m.requests == [] and m.avg_token_latency_ms == 0.0

    def test_unknown_adapter(self, world):
        model, adapters = world
        with pytest.raises(UnknownAdapterError):
            serve_loop(model, adapters, [Request(0, 9, 0.0, 1, 1)], SchedulerConfig(), TABLE)

    def test_unsorted(self, world):
        model, adapters = world
        trace = [Request(0, 0, 5.0, 1, 1), Request(1, 0, 1.0, 1, 1)]
        with pytest.raises(ValueError):
            serve_loop(model, adapters, trace, SchedulerConfig(), TABLE)

    def test_trace_not_mutated(self, world):
        model, adapters = world
        trace = [Request(i, i % 3, float(i), 3, 2) for i in range(6)]
        serve_loop(model, adapters, trace, SchedulerConfig(), TABLE)
        assert all(r.rounds_done == 0 and r.completion_time is None for r in trace)

    @pytest.mark.parametrize("mode", ["auto", "merged", "unmerged", "mixture"])
    def test_all_served(self, world, mode):
        model, adapters = world
        rng = np.random.default_rng(3)
        trace = [Request(i, int(rng.integers(0, 3)), float(i) * 0.3, int(rng.integers(1, 6)), int(rng.integers(1, 5)),
                         head_kind="task" if i % 5 == 0 else "lm", latency_budget=1.0) for i in range(40)]
        m = serve_loop(model, adapters, trace, SchedulerConfig(max_bs=4), TABLE, forced_mode=mode)
        assert len(m.requests) == 40 and m.unserved == 0
        for rec, r in zip(m.requests, trace):
            assert rec["rounds"] == r.effective_output_len
            assert rec["finish"] >= rec["start"] >= rec["arrival"]
        assert set(m.mode_occupancy) <= {"merged", "unmerged", "mixture"}
        assert 0 <= m.budget_violations <= 40

    def test_merged_rounds_have_no_bypass(self, world):
        model, adapters = world
        trace = [Request(i, 0, 0.0, 2, 3) for i in range(6)]
        with count_flops() as fc:
            m = serve_loop(model, adapters, trace, SchedulerConfig(max_bs=8), TABLE, forced_mode="merged")
        assert m.mode_occupancy == {"merged": 1.0}
        assert fc["bypass"] == 0 and fc["delora"] == 0

    def test_deep_queue_skew_one_stays_merged(self, world):
        # Alg. 1 goes merged whenever > MaxBS/2 hot requests wait and nobody starves.
        model, adapters = world
        trace = [Request(i, 0, 0.0, 2, 6) for i in range(40)]
        m = serve_loop(model, adapters, trace, SchedulerConfig(max_bs=8, theta=1e9), TABLE)
        rounds = [k for _, _, k in m.timeline if k != "switch"]
        # While more than four requests remain queued every round is merged.
        assert all(k == "merged(0)" for k in rounds[:30])
        assert m.switches <= 2

    def test_metrics_files(self, world, tmp_path):
        model, adapters = world
        trace = [Request(i, i % 2, float(i), 3, 2) for i in range(5)]
        m = serve_loop(model, adapters, trace, SchedulerConfig(), TABLE)
        m.write(tmp_path)
        rows = read_requests_csv(tmp_path / "requests.csv")
        assert list(rows[0]) == ["id", "adapter", "arrival", "start", "finish", "rounds", "e2e_ms", "input_tokens", "output_tokens"]
        assert avg_token_latency(rows) == m.avg_token_latency_ms
        summary = json.loads((tmp_path / "summary.json").read_text())
        for key in ("avg_token_latency_ms", "throughput_rps", "switches", "switch_time_ms", "mode_occupancy", "budget_violations"):
            assert key in summary

    def test_sink_receives_completions(self, world):
        model, adapters = world
        sink = MetricsSink()
        serve_loop(model, adapters, [Request(i, 0, 0.0, 1, 1) for i in range(3)], SchedulerConfig(), TABLE, sink=sink)
        assert sorted(e["id"] for e in sink.drain()) == [0, 1, 2]

    def test_adapter_cache_charges_load(self, world):
        model, adapters = world
        trace = [Request(0, 0, 0.0, 1, 1)]
        fast = serve_loop(model, adapters, trace, SchedulerConfig(), TABLE)
        slow = serve_loop(model, adapters, trace, SchedulerConfig(), TABLE, adapter_cache=AdapterCache(1, 50.0))
        assert slow.requests[0]["e2e_ms"] >= fast.requests[0]["e2e_ms"] + 40.0

    def test_theta_resolution(self):
        est = Estimates()
        assert math.isinf(SchedulerConfig().resolve_theta(est))
        est.observe_round("unmerged", 4.0)
        assert SchedulerConfig().resolve_theta(est) == pytest.approx(20.0)
        assert SchedulerConfig(theta=7.0).resolve_theta(est) == 7.0
        with pytest.raises(ValueError):
            SchedulerConfig(max_bs=0)
