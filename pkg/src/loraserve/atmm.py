"""Adaptive-tiling GEMM, its offline tiling search and the shape-keyed table."""
from __future__ import annotations

import contextlib
import itertools
import json
import logging
import os
import statistics
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Iterable, NamedTuple

import numpy as np

from . import _backend
from .matrix import Matrix, ShapeError

log = logging.getLogger(__name__)

MIN_EDGE = 16
MAX_EDGE = 256
M_STEP = 32
THREADS_ENV = "LORASERVE_NUM_THREADS"


class InvalidConfigError(ValueError):
    pass


class NoFeasibleConfigError(ValueError):
    pass


def _pow2(x):
    return x > 0 and x & (x - 1) == 0


@dataclass(frozen=True, order=True)
class TilingConfig:
    """Two-level blocking: outer (cache) tile edges and inner (micro-kernel) tile edges."""

    outer_m: int
    outer_n: int
    outer_k: int
    inner_m: int
    inner_n: int
    inner_k: int

    def __post_init__(self):
        edges = self.as_tuple()
        if any(not _pow2(e) or e < MIN_EDGE for e in edges):
            raise InvalidConfigError(f"tile edges must be powers of two >= {MIN_EDGE}: {edges}")
        for outer, inner in zip(edges[:3], edges[3:]):
            if outer % inner:
                raise InvalidConfigError(f"inner edge {inner} does not divide outer edge {outer}")

    def as_tuple(self):
        return (self.outer_m, self.outer_n, self.outer_k, self.inner_m, self.inner_n, self.inner_k)

    def footprint(self):
        """Elements held by one A, B and C outer tile."""
        return self.outer_m * self.outer_k + self.outer_k * self.outer_n + self.outer_m * self.outer_n

    def fits(self, cache_budget_bytes, scalar_width=4):
        return self.footprint() * scalar_width <= cache_budget_bytes

    def __str__(self):
        return "({},{},{},{},{},{})".format(*self.as_tuple())


class ShapeKey(NamedTuple):
    m_bucket: int
    k: int
    n: int

    @classmethod
    def of(cls, m, k, n):
        return cls(bucket_m(m), k, n)


def bucket_m(m):
    """Round ``m`` up to the next multiple of 32 (never below 32)."""
    return max(M_STEP, -(-m // M_STEP) * M_STEP)


class TableEntry(NamedTuple):
    config: TilingConfig
    ns: int


@dataclass(frozen=True)
class TilingTable:
    entries: MappingProxyType
    default_config: TilingConfig
    failed_shapes: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if not isinstance(self.entries, MappingProxyType):
            object.__setattr__(self, "entries", MappingProxyType(dict(self.entries)))

    def __len__(self):
        return len(self.entries)

    def to_json(self):
        rows = [
            {"m_bucket": key.m_bucket, "k": key.k, "n": key.n, "config": list(e.config.as_tuple()), "ns": int(e.ns)}
            for key, e in sorted(self.entries.items())
        ]
        return {"default": list(self.default_config.as_tuple()), "entries": rows}

    @classmethod
    def from_json(cls, obj):
        entries = {}
        for row in obj["entries"]:
            key = ShapeKey(int(row["m_bucket"]), int(row["k"]), int(row["n"]))
            entries[key] = TableEntry(TilingConfig(*row["config"]), int(row["ns"]))
        return cls(entries, TilingConfig(*obj["default"]))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    @classmethod
    def single(cls, config):
        """A table that answers every lookup with ``config``."""
        return cls({}, config)


DEFAULT_CONFIG = TilingConfig(64, 64, 64, 32, 64, 64)


def candidate_configs(cache_budget_bytes, scalar_width=4, min_edge=MIN_EDGE, max_edge=MAX_EDGE):
    """All power-of-two configs in [min_edge, max_edge] whose outer tiles fit the budget."""
    if cache_budget_bytes <= 0:
        raise ValueError("cache budget must be positive")
    edges = [e for e in (2 ** i for i in range(4, 12)) if min_edge <= e <= max_edge]
    per_dim = [(o, i) for o in edges for i in edges if i <= o]
    out = []
    for (om, im), (on, inn), (ok, ik) in itertools.product(per_dim, repeat=3):
        if (om * ok + ok * on + om * on) * scalar_width <= cache_budget_bytes:
            out.append(TilingConfig(om, on, ok, im, inn, ik))
    if not out:
        raise NoFeasibleConfigError(
            f"no tiling config fits {cache_budget_bytes} bytes with {scalar_width}-byte scalars"
        )
    out.sort()
    return out


class FlopCounter:
    """Floating-point operation totals (2 per multiply-add) grouped by tag."""

    def __init__(self):
        self.by_tag = Counter()

    def add(self, tag, flops):
        self.by_tag[tag] += flops

    @property
    def total(self):
        return sum(self.by_tag.values())

    def __getitem__(self, tag):
        return self.by_tag[tag]


_active_counters: list[FlopCounter] = []


@contextlib.contextmanager
def count_flops():
    """Record the FLOPs of every ``atmm_multiply`` call made inside the block."""
    counter = FlopCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


_num_threads = max(1, int(os.environ.get(THREADS_ENV, "1") or 1))
_pool = None


def set_num_threads(n):
    global _num_threads, _pool
    _num_threads = max(1, int(n))
    if _pool is not None:
        _pool.shutdown()
        _pool = None


def atmm_multiply(a: Matrix, b: Matrix, config: TilingConfig, *, tag="gemm", backend=None) -> Matrix:
    """Tiled product ``a @ b`` using ``config``; edge tiles are clamped, not padded."""
    global _pool
    if a.cols != b.rows:
        raise ShapeError("atmm dimension mismatch", a.shape, b.shape)
    if not isinstance(config, TilingConfig):
        raise InvalidConfigError(f"expected TilingConfig, got {type(config).__name__}")
    x, y = a.array, b.array
    if x.dtype != y.dtype:
        x, y = x.astype(np.float64), y.astype(np.float64)
    kern = _backend.get(backend)
    fn = kern.tiled_gemm_f32 if x.dtype == np.float32 else kern.tiled_gemm_f64
    m, k = x.shape
    n = y.shape[1]
    out = np.zeros((m, n), dtype=x.dtype)
    args = config.as_tuple()
    if _num_threads > 1 and m > config.outer_m:
        # Disjoint row blocks aligned to outer_m: same traversal per tile as the serial run.
        step = -(-m // _num_threads)
        step = -(-step // config.outer_m) * config.outer_m
        if _pool is None:
            _pool = ThreadPoolExecutor(_num_threads)
        futures = [_pool.submit(fn, x[r:r + step], y, out[r:r + step], *args) for r in range(0, m, step)]
        for f in futures:
            f.result()
    else:
        fn(x, y, out, *args)
    if _active_counters:
        flops = 2 * m * k * n
        for c in _active_counters:
            c.add(tag, flops)
    return Matrix.wrap(out)


def visit_counts(m, k, n, config: TilingConfig, backend=None):
    """Instrumented traversal: how many times the loop nest visits each (i, p, j)."""
    return _backend.get(backend).visit_counts(m, k, n, *config.as_tuple())


class BenchmarkResult(NamedTuple):
    median_ns: int
    samples: tuple
    coarse_timer: bool


_TIMER_RES_NS = time.get_clock_info("perf_counter").resolution * 1e9


def benchmark_config(m, k, n, config, trials=5, *, rng=None, dtype=np.float32, warmup=1) -> BenchmarkResult:
    """Median wall-clock of ``atmm_multiply`` over fresh random operands."""
    if trials < 3:
        raise ValueError("need at least 3 trials")
    rng = np.random.default_rng(rng)
    samples = []
    for i in range(warmup + trials):
        a = Matrix.wrap(rng.random((m, k), dtype=np.float32).astype(dtype, copy=False))
        b = Matrix.wrap(rng.random((k, n), dtype=np.float32).astype(dtype, copy=False))
        t0 = time.perf_counter_ns()
        atmm_multiply(a, b, config, tag="bench")
        dt = time.perf_counter_ns() - t0
        if i >= warmup:
            samples.append(dt)
    med = int(statistics.median(samples))
    return BenchmarkResult(max(med, 1), tuple(samples), med < 100 * _TIMER_RES_NS)


def benchmark_round_robin(m, k, n, configs, trials=5, *, rng=None, warmup=1, min_sample_ns=300_000) -> dict:
    """Median wall-clock per config, timing one sample of every config per trial.

    Host speed drifts on a scale of milliseconds, so timing configs one after
    another lets a slow stretch land on a single config. Interleaving spreads
    it over all of them, the visiting order alternates to cancel position
    effects, and every config sees the same operands. Calls faster than
    ``min_sample_ns`` are repeated within a sample and averaged.
    """
    if trials < 3:
        raise ValueError("need at least 3 trials")
    rng = np.random.default_rng(rng)
    order = list(configs)
    samples = {cfg: [] for cfg in order}
    reps = None
    for i in range(warmup + trials):
        a = Matrix.wrap(rng.random((m, k), dtype=np.float32))
        b = Matrix.wrap(rng.random((k, n), dtype=np.float32))
        if reps is None:
            t0 = time.perf_counter_ns()
            atmm_multiply(a, b, order[0], tag="bench")
            reps = max(1, min_sample_ns // max(time.perf_counter_ns() - t0, 1))
        for cfg in order if i % 2 == 0 else reversed(order):
            t0 = time.perf_counter_ns()
            for _ in range(reps):
                atmm_multiply(a, b, cfg, tag="bench")
            dt = (time.perf_counter_ns() - t0) / reps
            if i >= warmup:
                samples[cfg].append(dt)
    return {cfg: max(int(statistics.median(v)), 1) for cfg, v in samples.items()}


def tiling_search(
    shape_grid: Iterable[tuple],
    candidates: list,
    trials=5,
    *,
    bench: Callable | None = None,
    seed=0,
    progress: Callable | None = None,
    refine=8,
) -> TilingTable:
    """Benchmark every candidate on every grid shape and keep the per-shape argmin.

    By default candidates are timed round-robin (see ``benchmark_round_robin``).
    A custom ``bench`` with the signature of ``benchmark_config`` is called one
    config at a time instead. The ``refine`` fastest candidates of a shape are
    then timed again with three times the trials, since near-ties between
    tilings are common and a single sweep tends to crown a lucky one. A shape
    whose benchmarks all fail is left out of the table and listed in
    ``failed_shapes``.
    """
    shape_grid = list(shape_grid)
    candidates = sorted(candidates)
    if not shape_grid or not candidates:
        raise ValueError("tiling search needs a non-empty grid and candidate list")
    rng = np.random.default_rng(seed)
    entries = {}
    failed = []
    for m, k, n in shape_grid:
        timed = _time_configs(bench, m, k, n, candidates, trials, rng)
        key = ShapeKey.of(m, k, n)
        if not timed:
            failed.append((m, k, n))
            continue
        # Sorting on (ns, cfg) keeps the lexicographically smallest config on ties.
        top = [cfg for _, cfg in sorted((ns, cfg) for cfg, ns in timed.items())[:refine]]
        if len(top) > 1:
            timed.update(_time_configs(bench, m, k, n, top, 3 * trials, rng))
        ns, cfg = min((timed[c], c) for c in top)
        best = TableEntry(cfg, ns)
        if key in entries:
            log.warning("grid shape %dx%dx%d overrides bucket %s", m, k, n, key)
        entries[key] = best
        if progress is not None:
            progress((m, k, n), best)
    if not entries:
        raise RuntimeError(f"every grid shape failed to benchmark: {failed}")
    wins = Counter(e.config for e in entries.values())
    top = max(wins.values())
    default = min(cfg for cfg, c in wins.items() if c == top)
    return TilingTable(entries, default, tuple(failed))


def _time_configs(bench, m, k, n, configs, trials, rng):
    if bench is None:
        try:
            return benchmark_round_robin(m, k, n, configs, trials, rng=rng)
        except Exception as exc:
            # Fall back to one config at a time so a single bad config is isolated.
            log.warning("round-robin benchmark on %dx%dx%d failed: %s", m, k, n, exc)
            bench = benchmark_config
    timed = {}
    for cfg in configs:
        try:
            timed[cfg] = bench(m, k, n, cfg, trials, rng=rng).median_ns
        except Exception as exc:
            log.warning("benchmark of %s on %dx%dx%d failed: %s", cfg, m, k, n, exc)
    return timed


def lookup_config(table: TilingTable, m, k, n) -> TilingConfig:
    """Exact bucket hit, else a neighbouring bucket with the same (k, n), else the default."""
    key = ShapeKey.of(m, k, n)
    hit = table.entries.get(key)
    if hit is not None:
        return hit.config
    for mb in (key.m_bucket + M_STEP, key.m_bucket - M_STEP):
        hit = table.entries.get(ShapeKey(mb, k, n))
        if hit is not None:
            return hit.config
    return table.default_config


def default_shape_grid(hidden_dim=256, ranks=(16, 32, 64, 128), m_max=256, m_min=32):
    """Decode/prefill-sized shapes for the base projection and both adapter projections."""
    kn = [(hidden_dim, hidden_dim)]
    for r in ranks:
        kn += [(hidden_dim, r), (r, hidden_dim)]
    return [(m, k, n) for m in range(m_min, m_max + 1, M_STEP) for k, n in kn]


def parse_shape(text):
    """``"256x4096x32"`` -> (256, 4096, 32) as (m, k, n)."""
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ValueError(f"shape must look like MxKxN, got {text!r}")
    m, k, n = (int(p) for p in parts)
    if min(m, k, n) < 1:
        raise ValueError(f"shape dimensions must be positive: {text!r}")
    return m, k, n
