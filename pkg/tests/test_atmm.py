import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loraserve.atmm import (
    DEFAULT_CONFIG,
    BenchmarkResult,
    InvalidConfigError,
    NoFeasibleConfigError,
    ShapeKey,
    TableEntry,
    TilingConfig,
    TilingTable,
    atmm_multiply,
    benchmark_config,
    benchmark_round_robin,
    bucket_m,
    candidate_configs,
    count_flops,
    default_shape_grid,
    lookup_config,
    parse_shape,
    set_num_threads,
    tiling_search,
    visit_counts,
)
from loraserve.matrix import Matrix, ShapeError, gemm_reference, max_abs_diff

EDGES = [16, 32, 64, 128, 256]
ALL_1MIB = candidate_configs(1 << 20)


def brute_candidates(budget, width=4):
    """Independent enumeration straight from the constraint list."""
    out = []
    for om, on, ok, im, inn, ik in itertools.product(EDGES, repeat=6):
        if om % im or on % inn or ok % ik:
            continue
        if (om * ok + ok * on + om * on) * width > budget:
            continue
        out.append((om, on, ok, im, inn, ik))
    return sorted(out)


def tol(ref):
    return 1e-4 * max(1.0, float(np.max(np.abs(ref.array))))


class TestTilingConfig:
    def test_valid(self):
        c = TilingConfig(64, 32, 32, 32, 32, 32)
        assert c.as_tuple() == (64, 32, 32, 32, 32, 32)
        assert c.footprint() == 64 * 32 + 32 * 32 + 64 * 32
        assert str(c) == "(64,32,32,32,32,32)"

    @pytest.mark.parametrize("edges", [
        (48, 32, 32, 16, 16, 16),   # not a power of two
        (8, 32, 32, 8, 16, 16),     # below 16
        (32, 32, 32, 64, 32, 32),   # inner larger than outer
    ])
    def test_invalid(self, edges):
        with pytest.raises(InvalidConfigError):
            TilingConfig(*edges)

    def test_large_edges_allowed_but_not_enumerated(self):
        c = TilingConfig(512, 32, 32, 16, 16, 16)
        assert c not in candidate_configs(1 << 30)

    def test_fits(self):
        c = TilingConfig(16, 16, 16, 16, 16, 16)
        assert c.fits(3 * 16 * 16 * 4)
        assert not c.fits(3 * 16 * 16 * 4 - 1)


class TestCandidates:
    def test_table_one_configs_present(self):
        assert TilingConfig(64, 32, 32, 32, 32, 32) in ALL_1MIB
        assert TilingConfig(64, 64, 64, 32, 64, 64) in ALL_1MIB

    @pytest.mark.parametrize("budget", [3072, 5119, 5120, 64 * 1024, 1 << 20, 2 << 20])
    def test_matches_brute_force(self, budget):
        got = [c.as_tuple() for c in candidate_configs(budget)]
        assert got == brute_candidates(budget)

    def test_sorted_and_deterministic(self):
        assert ALL_1MIB == sorted(ALL_1MIB)
        assert candidate_configs(1 << 20) == ALL_1MIB

    def test_too_small(self):
        with pytest.raises(NoFeasibleConfigError):
            candidate_configs(3 * 16 * 16 * 4 - 1)

    def test_singleton(self):
        assert candidate_configs(3 * 16 * 16 * 4) == [TilingConfig(16, 16, 16, 16, 16, 16)]

    def test_double_width_halves_feasible_set(self):
        assert len(candidate_configs(1 << 20, scalar_width=8)) == len(candidate_configs(1 << 19))


class TestMultiply:
    @pytest.mark.parametrize("cfg", [DEFAULT_CONFIG, TilingConfig(64, 32, 32, 32, 32, 32), TilingConfig(16, 16, 16, 16, 16, 16)])
    @pytest.mark.parametrize("shape", [(1, 1, 1), (3, 5, 7), (33, 17, 65), (100, 64, 256), (257, 130, 31)])
    def test_matches_reference(self, backend, cfg, shape, rng):
        m, k, n = shape
        a, b = Matrix.random(m, k, rng), Matrix.random(k, n, rng)
        ref = gemm_reference(a, b)
        c = atmm_multiply(a, b, cfg, backend=backend)
        assert c.shape == (m, n)
        assert max_abs_diff(c, ref) <= tol(ref)

    def test_identity(self, backend, rng):
        b = Matrix.random(32, 40, rng)
        for cfg in ALL_1MIB[::300]:
            assert max_abs_diff(atmm_multiply(Matrix.identity(32), b, cfg, backend=backend), b) <= 1e-6

    def test_table_one_input_shape(self, rng):
        a, b = Matrix.random(256, 4096, rng), Matrix.random(4096, 32, rng)
        ref = gemm_reference(a, b)
        for cfg in (TilingConfig(64, 32, 32, 32, 32, 32), TilingConfig(64, 64, 64, 32, 64, 64)):
            c = atmm_multiply(a, b, cfg)
            assert c.shape == (256, 32)
            assert max_abs_diff(c, ref) <= tol(ref)

    def test_float64(self, backend, rng):
        a = Matrix.random(20, 30, rng, dtype=np.float64)
        b = Matrix.random(30, 10, rng, dtype=np.float64)
        c = atmm_multiply(a, b, DEFAULT_CONFIG, backend=backend)
        assert c.dtype == np.float64
        assert max_abs_diff(c, gemm_reference(a, b)) <= 1e-12

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            atmm_multiply(Matrix.random(3, 4, rng), Matrix.random(5, 2, rng), DEFAULT_CONFIG)

    def test_invalid_config_type(self, rng):
        with pytest.raises((InvalidConfigError, TypeError)):
            atmm_multiply(Matrix.random(3, 4, rng), Matrix.random(4, 2, rng), (64, 64, 64, 32, 64, 64))

    def test_deterministic(self, backend, rng):
        a, b = Matrix.random(70, 90, rng), Matrix.random(90, 50, rng)
        c1 = atmm_multiply(a, b, DEFAULT_CONFIG, backend=backend)
        c2 = atmm_multiply(a, b, DEFAULT_CONFIG, backend=backend)
        assert np.array_equal(c1.array, c2.array)

    def test_threads_give_same_result(self, rng):
        a, b = Matrix.random(300, 64, rng), Matrix.random(64, 64, rng)
        ref = atmm_multiply(a, b, DEFAULT_CONFIG)
        set_num_threads(3)
        try:
            par = atmm_multiply(a, b, DEFAULT_CONFIG)
        finally:
            set_num_threads(1)
        assert np.array_equal(ref.array, par.array)

    def test_flop_counter(self, rng):
        with count_flops() as fc:
            atmm_multiply(Matrix.random(4, 5, rng), Matrix.random(5, 6, rng), DEFAULT_CONFIG, tag="x")
        assert fc["x"] == 2 * 4 * 5 * 6


@settings(max_examples=40, deadline=None)
@given(
    m=st.integers(1, 96), k=st.integers(1, 96), n=st.integers(1, 96),
    idx=st.integers(0, len(ALL_1MIB) - 1), seed=st.integers(0, 2**31),
)
def test_oracle_property(m, k, n, idx, seed):
    rng = np.random.default_rng(seed)
    a, b = Matrix.random(m, k, rng, scale=4.0), Matrix.random(k, n, rng)
    ref = gemm_reference(a, b)
    assert max_abs_diff(atmm_multiply(a, b, ALL_1MIB[idx]), ref) <= tol(ref)


@settings(max_examples=30, deadline=None)
@given(
    m=st.integers(1, 70), k=st.integers(1, 70), n=st.integers(1, 70),
    idx=st.integers(0, len(ALL_1MIB) - 1),
)
def test_visit_each_triple_once(m, k, n, idx):
    counts = visit_counts(m, k, n, ALL_1MIB[idx], backend="python")
    assert counts.shape == (m, k, n)
    assert np.all(counts == 1)


def test_visit_counts_compiled(backend):
    for cfg in (DEFAULT_CONFIG, TilingConfig(16, 32, 64, 16, 16, 16)):
        assert np.all(visit_counts(65, 33, 97, cfg, backend=backend) == 1)


class TestBenchmark:
    def test_positive(self):
        res = benchmark_config(8, 8, 8, DEFAULT_CONFIG, trials=5, rng=0)
        assert isinstance(res, BenchmarkResult)
        assert res.median_ns > 0 and len(res.samples) == 5

    def test_needs_three_trials(self):
        with pytest.raises(ValueError):
            benchmark_config(8, 8, 8, DEFAULT_CONFIG, trials=2)

    def test_repeatable_within_3x(self):
        a = benchmark_config(64, 256, 64, DEFAULT_CONFIG, trials=7, rng=0).median_ns
        b = benchmark_config(64, 256, 64, DEFAULT_CONFIG, trials=7, rng=1).median_ns
        assert max(a, b) <= 3 * min(a, b)

    def test_round_robin(self):
        cfgs = [DEFAULT_CONFIG, TilingConfig(16, 16, 16, 16, 16, 16)]
        res = benchmark_round_robin(32, 32, 32, cfgs, trials=3, rng=0, min_sample_ns=0)
        assert set(res) == set(cfgs) and all(v > 0 for v in res.values())
        with pytest.raises(ValueError):
            benchmark_round_robin(8, 8, 8, cfgs, trials=2)


def fake_bench(costs):
    def bench(m, k, n, cfg, trials, rng=None):
        v = costs(m, k, n, cfg)
        if v is None:
            raise RuntimeError("boom")
        return BenchmarkResult(v, (v,) * trials, False)
    return bench


class TestSearch:
    CANDS = [TilingConfig(16, 16, 16, 16, 16, 16), TilingConfig(32, 32, 32, 16, 16, 16), TilingConfig(64, 64, 64, 32, 64, 64)]

    def test_single_candidate(self):
        grid = [(32, 64, 64), (64, 64, 16)]
        t = tiling_search(grid, [DEFAULT_CONFIG], 3, bench=fake_bench(lambda *a: 5))
        assert len(t) == 2
        assert all(e.config == DEFAULT_CONFIG for e in t.entries.values())
        assert t.default_config == DEFAULT_CONFIG

    def test_argmin_and_default(self):
        # Small m prefers the small config, large m the big one.
        def cost(m, k, n, cfg):
            return abs(cfg.outer_m - m) + 1
        grid = [(16, 64, 64), (32, 64, 64), (64, 64, 64), (64, 64, 32)]
        t = tiling_search(grid, self.CANDS, 3, bench=fake_bench(cost))
        assert lookup_config(t, 32, 64, 64) == self.CANDS[1]
        assert lookup_config(t, 64, 64, 64) == self.CANDS[2]
        assert t.default_config == self.CANDS[2]

    def test_ties_go_to_smallest(self):
        t = tiling_search([(32, 32, 32)], list(reversed(self.CANDS)), 3, bench=fake_bench(lambda *a: 7))
        assert t.entries[ShapeKey(32, 32, 32)].config == self.CANDS[0]

    def test_failed_shape_reported(self):
        def cost(m, k, n, cfg):
            return None if k == 13 else 3
        t = tiling_search([(32, 13, 8), (32, 64, 64)], self.CANDS, 3, bench=fake_bench(cost))
        assert t.failed_shapes == ((32, 13, 8),)
        assert len(t) == 1

    def test_partial_failures_skip_candidates(self):
        def cost(m, k, n, cfg):
            return None if cfg == self.CANDS[0] else cfg.outer_m
        t = tiling_search([(32, 32, 32)], self.CANDS, 3, bench=fake_bench(cost))
        assert t.entries[ShapeKey(32, 32, 32)].config == self.CANDS[1]

    def test_empty_inputs(self):
        with pytest.raises(ValueError):
            tiling_search([], self.CANDS)
        with pytest.raises(ValueError):
            tiling_search([(32, 32, 32)], [])

    def test_real_search_small(self):
        t = tiling_search([(32, 64, 64), (64, 64, 16)], self.CANDS, 3)
        assert len(t) == 2
        assert all(e.ns > 0 for e in t.entries.values())

    def test_table_immutable(self):
        t = TilingTable.single(DEFAULT_CONFIG)
        with pytest.raises(TypeError):
            t.entries[ShapeKey(32, 1, 1)] = TableEntry(DEFAULT_CONFIG, 1)


class TestLookup:
    def table(self):
        a, b = TilingConfig(16, 16, 16, 16, 16, 16), TilingConfig(32, 32, 32, 16, 16, 16)
        entries = {ShapeKey(64, 256, 64): TableEntry(a, 10), ShapeKey(128, 256, 256): TableEntry(b, 20)}
        return TilingTable(entries, DEFAULT_CONFIG), a, b

    def test_exact(self):
        t, a, b = self.table()
        assert lookup_config(t, 64, 256, 64) == a
        assert lookup_config(t, 100, 256, 256) == b

    def test_neighbour_bucket(self):
        t, a, _ = self.table()
        assert lookup_config(t, 33, 256, 64) == a   # bucket 64 exact
        assert lookup_config(t, 20, 256, 64) == a   # bucket 32, neighbour 64
        assert lookup_config(t, 90, 256, 64) == a   # bucket 96, neighbour 64

    def test_default(self):
        t, _, _ = self.table()
        assert lookup_config(t, 200, 256, 64) == DEFAULT_CONFIG
        assert lookup_config(t, 64, 7, 7) == DEFAULT_CONFIG

    def test_bucket(self):
        assert [bucket_m(m) for m in (1, 32, 33, 64, 65)] == [32, 32, 64, 64, 96]
        assert ShapeKey.of(33, 5, 6) == ShapeKey(64, 5, 6)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        entries = {ShapeKey(64, 256, 64): TableEntry(TilingConfig(16, 16, 16, 16, 16, 16), 10)}
        t = TilingTable(entries, DEFAULT_CONFIG)
        path = tmp_path / "t.json"
        t.save(path)
        obj = json.loads(path.read_text())
        assert obj == {
            "default": [64, 64, 64, 32, 64, 64],
            "entries": [{"m_bucket": 64, "k": 256, "n": 64, "config": [16, 16, 16, 16, 16, 16], "ns": 10}],
        }
        back = TilingTable.load(path)
        assert back.to_json() == t.to_json()

    def test_rejects_invalid_config(self):
        with pytest.raises(InvalidConfigError):
            TilingTable.from_json({"default": [48, 64, 64, 32, 64, 64], "entries": []})


def test_default_grid():
    grid = default_shape_grid(256, (16, 64), m_max=64)
    assert (32, 256, 256) in grid and (64, 256, 16) in grid and (64, 64, 256) in grid
    assert len(grid) == 2 * 5


def test_parse_shape():
    assert parse_shape("256x4096x32") == (256, 4096, 32)
    for bad in ("256x4096", "0x1x1", "ax1x1"):
        with pytest.raises(ValueError):
            parse_shape(bad)
