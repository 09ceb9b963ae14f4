"""Runtime control plane: credits, mode scheduling, mode switches and the serving loop.

Time inside the loop is a virtual clock in milliseconds. It jumps to the next
arrival when the server is idle and otherwise advances by the measured wall
time of each mode switch and decode round, so latencies reflect real compute.
"""
from __future__ import annotations

import csv
import json
import math
import threading
import time
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .batching import UnknownAdapterError
from .matrix import Matrix
from .model import (
    MERGED,
    MIXTURE,
    UNMERGED,
    InferMode,
    ModeError,
    ModelState,
    Merged,
    Mixture,
    Unmerged,
    forward,
    merge,
    project_heads,
    unmerge,
)

QUEUED, RUNNING, DONE = "queued", "running", "done"
EWMA_ALPHA = 0.2
THETA_FACTOR = 5.0


@dataclass(eq=False)
class Request:
    id: int
    adapter_id: int
    arrival_time: float
    input_len: int
    output_len: int
    head_kind: str = "lm"
    latency_budget: Optional[float] = None
    credit: float = 0.0
    state: str = QUEUED
    start_time: Optional[float] = None
    completion_time: Optional[float] = None
    rounds_done: int = 0
    ready_time: Optional[float] = None
    max_wait: float = 0.0

    def __post_init__(self):
        if self.head_kind not in ("lm", "task"):
            raise ValueError(f"head_kind must be 'lm' or 'task', got {self.head_kind!r}")
        if self.input_len < 1 or self.output_len < 1:
            raise ValueError(f"request {self.id}: token counts must be positive")
        if self.ready_time is None:
            self.ready_time = self.arrival_time

    @property
    def effective_output_len(self):
        return 1 if self.head_kind == "task" else self.output_len

    def fresh(self):
        """Copy with all runtime fields reset."""
        return Request(self.id, self.adapter_id, self.arrival_time, self.input_len,
                       self.output_len, self.head_kind, self.latency_budget)


class Ewma:
    def __init__(self, alpha=EWMA_ALPHA):
        self.alpha = alpha
        self.value = None

    def update(self, x):
        self.value = x if self.value is None else self.alpha * x + (1 - self.alpha) * self.value
        return self.value

    def get(self, default=0.0):
        return default if self.value is None else self.value


class Estimates:
    """Running means of round durations per mode kind and of switch latencies per transition."""

    def __init__(self, alpha=EWMA_ALPHA):
        self.alpha = alpha
        self.exec = {k: Ewma(alpha) for k in (UNMERGED, MERGED, MIXTURE)}
        self.switch = {}
        self.batch = Ewma(alpha)

    def exec_ms(self, kind):
        return self.exec[kind].get()

    def switch_ms(self, src, dst):
        e = self.switch.get((src, dst))
        return 0.0 if e is None else e.get()

    def observe_switch(self, src, dst, ms):
        self.switch.setdefault((src, dst), Ewma(self.alpha)).update(ms)

    def observe_round(self, kind, ms):
        self.exec[kind].update(ms)
        self.batch.update(ms)


@dataclass(frozen=True)
class SchedulerConfig:
    max_bs: int = 8
    theta: Optional[float] = None
    theta_factor: float = THETA_FACTOR

    def __post_init__(self):
        if self.max_bs < 1:
            raise ValueError("max_bs must be >= 1")
        if self.theta is not None and self.theta <= 0:
            raise ValueError("theta must be positive")

    def resolve_theta(self, estimates: Estimates):
        if self.theta is not None:
            return self.theta
        if estimates.batch.value is None:
            return math.inf
        return self.theta_factor * estimates.batch.value


def _switch_estimate(request, mode, est):
    kind, merged_id = mode
    if kind != MERGED or request.adapter_id == merged_id:
        return 0.0
    # Cheapest mode that can also serve this adapter.
    return min(est.switch_ms(MERGED, MIXTURE), est.switch_ms(MERGED, UNMERGED))


def update_credits(queue, now, current_mode, estimates: Estimates):
    """credit = waiting time + estimated round time in the current mode + estimated switch cost.

    Waiting time counts from the end of the request's last executed round
    (from arrival before its first).
    """
    exec_ms = estimates.exec_ms(current_mode.kind)
    for r in queue:
        r.credit = max(0.0, now - r.ready_time) + exec_ms + _switch_estimate(r, current_mode, estimates)


def hottest_adapter(queue):
    counts = Counter(r.adapter_id for r in queue)
    top = max(counts.values())
    return min(a for a, c in counts.items() if c == top)


def schedule(queue, mode: InferMode, config: SchedulerConfig, theta=None):
    """Pick the next inference mode and batch from the queue (arrival-ordered).

    Starving requests (credit above theta) go first. Merged mode is chosen
    when nobody starves and more than half a batch belongs to the most
    requested adapter; mixture when a few starve; unmerged otherwise.
    """
    if not queue:
        return mode, []
    theta = config.theta if theta is None else theta
    if theta is None:
        theta = math.inf
    max_bs = config.max_bs
    starve = [r for r in queue if r.credit > theta]
    room = max_bs - len(starve)
    hot = hottest_adapter(queue)
    r_merge = [r for r in queue if r.adapter_id == hot]
    if len(starve) / max_bs <= 0.5 and len(r_merge) / max_bs > 0.5:
        if not starve:
            return Merged(hot), r_merge[:max_bs]
        starving = set(map(id, starve))
        return Mixture(hot), starve + [r for r in r_merge if id(r) not in starving][:room]
    starving = set(map(id, starve))
    # More starving requests than a batch holds: oldest first.
    return Unmerged, starve[:max_bs] + [r for r in queue if id(r) not in starving][:max(room, 0)]


def schedule_forced(queue, kind, config: SchedulerConfig, theta=None):
    """Single-mode baselines used for ablations."""
    if kind == "auto":
        return None
    if not queue:
        return None, []
    if kind == MERGED:
        hot = hottest_adapter(queue)
        return Merged(hot), [r for r in queue if r.adapter_id == hot][:config.max_bs]
    theta = math.inf if theta is None else theta
    starve = [r for r in queue if r.credit > theta]
    ids = set(map(id, starve))
    batch = (starve + [r for r in queue if id(r) not in ids])[:config.max_bs]
    if kind == UNMERGED:
        return Unmerged, batch
    if kind == MIXTURE:
        return Mixture(hottest_adapter(queue)), batch
    raise ValueError(f"unknown forced mode {kind!r}")


def init_delora(state: ModelState, merged_adapter):
    """Point the deLoRA branch at the merged adapter (shared, never copied)."""
    if merged_adapter is None:
        raise ModeError("no merged adapter to build a deLoRA branch from")
    if state.mode.kind != MIXTURE or state.mode.adapter_id != merged_adapter.id:
        raise ModeError(f"deLoRA init needs mixture mode over adapter {merged_adapter.id}, model is {state.mode}")
    state.delora_branch = merged_adapter


def mode_switch(model, state: ModelState, to_mode: InferMode, adapters, table) -> float:
    """Minimal unmerge/merge sequence from ``state.mode`` to ``to_mode``; returns wall seconds."""
    src = state.mode
    if to_mode == src:
        return 0.0
    if to_mode.kind not in (UNMERGED, MERGED, MIXTURE):
        raise ModeError(f"illegal target mode {to_mode}")
    if to_mode.kind != UNMERGED and to_mode.adapter_id not in adapters:
        raise UnknownAdapterError(to_mode.adapter_id)
    t0 = time.perf_counter()
    if src.kind != UNMERGED and (to_mode.kind == UNMERGED or to_mode.adapter_id != src.adapter_id):
        unmerge(model, state, adapters[src.adapter_id], table)
    if to_mode.kind != UNMERGED:
        if state.mode.kind == UNMERGED:
            merge(model, state, adapters[to_mode.adapter_id], table)
        if to_mode.kind == MIXTURE:
            state.mode = to_mode
            init_delora(state, adapters[to_mode.adapter_id])
        else:
            state.mode = to_mode
            state.delora_branch = None
    return time.perf_counter() - t0


class AdapterCache:
    """Fixed-capacity LRU of resident adapters; a miss costs ``load_ms`` of virtual time."""

    def __init__(self, capacity=None, load_ms=0.0):
        self.capacity = capacity
        self.load_ms = load_ms
        self._lru = OrderedDict()
        self.misses = 0

    def touch(self, adapter_ids):
        charged = 0.0
        for a in adapter_ids:
            if a in self._lru:
                self._lru.move_to_end(a)
                continue
            self.misses += 1
            charged += self.load_ms
            self._lru[a] = True
            if self.capacity is not None and len(self._lru) > self.capacity:
                self._lru.popitem(last=False)
        return charged


class MetricsSink:
    """Append-only record buffer that another thread may drain."""

    def __init__(self):
        self._lock = threading.Lock()
        self._items = []

    def append(self, item):
        with self._lock:
            self._items.append(item)

    def drain(self):
        with self._lock:
            items, self._items = self._items, []
        return items


REQUEST_COLUMNS = ["id", "adapter", "arrival", "start", "finish", "rounds", "e2e_ms", "input_tokens", "output_tokens"]
PRECISION = 6


@dataclass
class Metrics:
    requests: list = field(default_factory=list)
    avg_token_latency_ms: float = 0.0
    throughput_rps: float = 0.0
    switches: int = 0
    switch_time_ms: float = 0.0
    mode_occupancy: dict = field(default_factory=dict)
    budget_violations: int = 0
    timeline: list = field(default_factory=list)
    max_wait_ms: float = 0.0
    theta_max_ms: float = 0.0
    max_batch_ms: float = 0.0
    max_switch_ms: float = 0.0
    unserved: int = 0

    def summary(self):
        return {
            "requests": len(self.requests),
            "avg_token_latency_ms": self.avg_token_latency_ms,
            "throughput_rps": self.throughput_rps,
            "switches": self.switches,
            "switch_time_ms": self.switch_time_ms,
            "mode_occupancy": self.mode_occupancy,
            "budget_violations": self.budget_violations,
            "max_wait_ms": self.max_wait_ms,
            "theta_max_ms": self.theta_max_ms if math.isfinite(self.theta_max_ms) else None,
            "max_batch_ms": self.max_batch_ms,
            "max_switch_ms": self.max_switch_ms,
            "unserved": self.unserved,
        }

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "requests.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REQUEST_COLUMNS)
            w.writeheader()
            for rec in self.requests:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})
        (out_dir / "summary.json").write_text(json.dumps(self.summary(), indent=1, sort_keys=True) + "\n")
        (out_dir / "timeline.json").write_text(json.dumps(self.timeline) + "\n")


def avg_token_latency(records):
    """Sum of end-to-end latencies over total tokens, rounded to the CSV precision."""
    tokens = sum(int(r["input_tokens"]) + int(r["output_tokens"]) for r in records)
    if tokens == 0:
        return 0.0
    return round(sum(float(r["e2e_ms"]) for r in records) / tokens, PRECISION)


def read_requests_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _finalize(done, stats, metrics):
    recs = []
    for r in sorted(done, key=lambda r: r.id):
        recs.append({
            "id": r.id,
            "adapter": r.adapter_id,
            "arrival": round(r.arrival_time, PRECISION),
            "start": round(r.start_time, PRECISION),
            "finish": round(r.completion_time, PRECISION),
            "rounds": r.rounds_done,
            "e2e_ms": round(r.completion_time - r.arrival_time, PRECISION),
            "input_tokens": r.input_len,
            "output_tokens": r.rounds_done,
        })
    metrics.requests = recs
    metrics.avg_token_latency_ms = avg_token_latency(recs)
    if recs:
        span = max(r.completion_time for r in done) - min(r.arrival_time for r in done)
        metrics.throughput_rps = len(recs) / (span / 1000.0) if span > 0 else float(len(recs))
    metrics.budget_violations = sum(
        1 for r in done if r.latency_budget is not None and r.completion_time - r.arrival_time > r.latency_budget
    )
    busy = sum(stats.values())
    metrics.mode_occupancy = {k: v / busy for k, v in sorted(stats.items())} if busy > 0 else {}
    return metrics


def serve_loop(model, adapters, trace, config: SchedulerConfig, table, *, forced_mode="auto",
               seed=0, adapter_cache=None, sink=None, state=None) -> Metrics:
    """Serve ``trace`` with iteration-level (per decode round) scheduling.

    Each iteration admits arrivals, refreshes credits, schedules, switches
    mode if needed, runs one round for every batched request (its first
    round is the prefill over ``input_len`` rows) and retires finished ones.
    """
    requests = [r.fresh() for r in trace]
    for a, b in zip(requests, requests[1:]):
        if b.arrival_time < a.arrival_time:
            raise ValueError("trace must be sorted by arrival time")
    for r in requests:
        if r.adapter_id not in adapters:
            raise UnknownAdapterError(r.adapter_id)
    state = state or ModelState()
    est = Estimates()
    cache = adapter_cache or AdapterCache()
    metrics = Metrics()
    if not requests:
        return metrics

    d = model.hidden_dim
    max_rows = config.max_bs * max(r.input_len for r in requests)
    pool = np.random.default_rng(seed).standard_normal((max_rows, d)).astype(model.dtype)

    pending = list(reversed(requests))
    active, done = [], []
    occupancy = Counter()
    now = requests[0].arrival_time
    while pending or active:
        while pending and pending[-1].arrival_time <= now:
            active.append(pending.pop())
        if not active:
            now = pending[-1].arrival_time
            continue
        theta = config.resolve_theta(est)
        metrics.theta_max_ms = max(metrics.theta_max_ms, theta) if math.isfinite(theta) else metrics.theta_max_ms
        update_credits(active, now, state.mode, est)
        if forced_mode == "auto":
            next_mode, batch = schedule(active, state.mode, config, theta)
        else:
            next_mode, batch = schedule_forced(active, forced_mode, config, theta)

        if next_mode != state.mode:
            src = state.mode.kind
            sw_ms = mode_switch(model, state, next_mode, adapters, table) * 1000.0
            est.observe_switch(src, next_mode.kind, sw_ms)
            metrics.switches += 1
            metrics.switch_time_ms += sw_ms
            metrics.max_switch_ms = max(metrics.max_switch_ms, sw_ms)
            metrics.timeline.append([now, now + sw_ms, "switch"])
            now += sw_ms
        now += cache.touch(sorted({r.adapter_id for r in batch}))

        start = now
        assignment, heads, last_rows = [], [], []
        for r in batch:
            r.max_wait = max(r.max_wait, start - r.ready_time)
            metrics.max_wait_ms = max(metrics.max_wait_ms, start - r.ready_time)
            if r.start_time is None:
                r.start_time = start
            r.state = RUNNING
            rows = r.input_len if r.rounds_done == 0 else 1
            assignment.extend([r.adapter_id] * rows)
            last_rows.append(len(assignment) - 1)
            heads.append((r.head_kind, r.adapter_id))
        x = Matrix.wrap(pool[:len(assignment)])

        t0 = time.perf_counter()
        h = forward(model, state, x, assignment, adapters, table)
        project_heads(model, Matrix.wrap(h.array[last_rows]), heads, adapters, table)
        round_ms = (time.perf_counter() - t0) * 1000.0

        now += round_ms
        est.observe_round(state.mode.kind, round_ms)
        occupancy[state.mode.kind] += round_ms
        metrics.max_batch_ms = max(metrics.max_batch_ms, round_ms)
        metrics.timeline.append([start, now, str(state.mode)])

        finished = []
        for r in batch:
            r.rounds_done += 1
            r.ready_time = now
            if r.rounds_done >= r.effective_output_len:
                r.state = DONE
                r.completion_time = now
                finished.append(r)
                if sink is not None:
                    sink.append({"id": r.id, "finish": now, "e2e_ms": now - r.arrival_time})
            else:
                r.state = QUEUED
        if finished:
            gone = set(map(id, finished))
            active = [r for r in active if id(r) not in gone]
            done.extend(finished)

    metrics.unserved = len(requests) - len(done)
    return _finalize(done, occupancy, metrics)
