"""Synthetic request traces and the trace CSV format."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .orchestrator import Request

TRACE_COLUMNS = ["arrival_ms", "request_id", "adapter_id", "input_tokens", "output_tokens", "head_kind", "budget_ms"]


class TraceFormatError(ValueError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Dist:
    """Positive integer distribution: ``const`` or inclusive ``uniform``."""

    kind: str
    low: int
    high: Optional[int] = None

    def __post_init__(self):
        if self.kind == "const":
            object.__setattr__(self, "high", self.low)
        elif self.kind != "uniform":
            raise ValueError(f"unknown distribution {self.kind!r}")
        if self.low < 1 or self.high < self.low:
            raise ValueError(f"distribution must produce positive integers: {self}")

    def sample(self, rng, size=None):
        if self.low == self.high:
            return self.low if size is None else np.full(size, self.low)
        return rng.integers(self.low, self.high + 1, size=size)

    @classmethod
    def parse(cls, obj):
        if isinstance(obj, int):
            return cls("const", obj)
        if isinstance(obj, (list, tuple)):
            return cls("uniform", int(obj[0]), int(obj[1]))
        return cls(obj["kind"], int(obj["low"]), obj.get("high"))


@dataclass(frozen=True)
class AppProfile:
    name: str
    input_len: Dist
    output_len: Dist
    head_kind: str = "lm"
    latency_budget: Optional[float] = None

    def __post_init__(self):
        if self.head_kind not in ("lm", "task"):
            raise ValueError(f"head_kind must be 'lm' or 'task', got {self.head_kind!r}")


# Video understanding: 6 frames of 256 tokens in, 5-10 tokens out, answered by a task head.
VIDEO_ANALYTICS = AppProfile("video-analytics", Dist("const", 6 * 256), Dist("uniform", 5, 10), "task")
# Visual question answering: 256 tokens in, 200+ out (upper end fixed at 300 here).
VQA = AppProfile("vqa", Dist("const", 256), Dist("uniform", 200, 300), "lm")
# Scaled-down profiles for desk-sized runs.
DESK_VQA = AppProfile("desk-vqa", Dist("uniform", 8, 32), Dist("uniform", 4, 12), "lm")
DESK_VIDEO = AppProfile("desk-video", Dist("const", 48), Dist("uniform", 5, 10), "task")

PROFILES = {p.name: p for p in (VIDEO_ANALYTICS, VQA, DESK_VQA, DESK_VIDEO)}


@dataclass(frozen=True)
class WorkloadSpec:
    duration: float  # seconds
    rate: float  # requests per second
    num_adapters: int
    skewness: float
    arrival: str = "poisson"
    profiles: tuple = (DESK_VQA,)
    weights: tuple = (1.0,)
    seed: int = 0
    trace_path: Optional[str] = None

    def validate(self):
        if self.arrival not in ("poisson", "uniform", "trace-replay"):
            raise ValueError(f"unknown arrival process {self.arrival!r}")
        if self.arrival == "trace-replay":
            if not self.trace_path:
                raise ValueError("trace-replay needs trace_path")
            return
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.num_adapters < 1:
            raise ValueError("need at least one adapter")
        if not (0 < self.skewness <= 1) or self.skewness < 1 / self.num_adapters - 1e-12:
            raise ValueError(f"skewness {self.skewness} not achievable with {self.num_adapters} adapters")
        if len(self.profiles) != len(self.weights) or not self.profiles or min(self.weights) < 0 or sum(self.weights) <= 0:
            raise ValueError("profile mix needs one non-negative weight per profile")


def generate(spec: WorkloadSpec):
    """Arrival-ordered requests; adapter 0 is the hot adapter and gets ``skewness`` of the traffic."""
    spec.validate()
    if spec.arrival == "trace-replay":
        return load_trace(spec.trace_path)
    rng = np.random.default_rng(spec.seed)
    horizon_ms = spec.duration * 1000.0
    if spec.arrival == "poisson":
        times = []
        t = 0.0
        while True:
            t += rng.exponential(1000.0 / spec.rate)
            if t >= horizon_ms:
                break
            times.append(t)
    else:
        count = int(spec.duration * spec.rate)
        times = [i * 1000.0 / spec.rate for i in range(count)]
    n = len(times)
    hot = rng.random(n) < spec.skewness
    if spec.num_adapters > 1:
        cold = rng.integers(1, spec.num_adapters, size=n)
    else:
        cold = np.zeros(n, dtype=int)
    adapters = np.where(hot, 0, cold)
    w = np.asarray(spec.weights, dtype=float)
    which = rng.choice(len(spec.profiles), size=n, p=w / w.sum())
    trace = []
    for i in range(n):
        prof = spec.profiles[which[i]]
        trace.append(Request(
            id=i,
            adapter_id=int(adapters[i]),
            arrival_time=round(float(times[i]), 6),
            input_len=int(prof.input_len.sample(rng)),
            output_len=int(prof.output_len.sample(rng)),
            head_kind=prof.head_kind,
            latency_budget=prof.latency_budget,
        ))
    return trace


def _fmt(x):
    return "" if x is None else repr(float(x))


def dumps_trace(trace):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in trace:
        w.writerow([_fmt(r.arrival_time), r.id, r.adapter_id, r.input_len, r.output_len, r.head_kind, _fmt(r.latency_budget)])
    return buf.getvalue()


def save_trace(trace, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(dumps_trace(trace))


def loads_trace(text):
    rows = csv.reader(io.StringIO(text))
    try:
        header = next(rows)
    except StopIteration:
        raise TraceFormatError(1, "missing header row") from None
    if header != TRACE_COLUMNS:
        raise TraceFormatError(1, f"expected header {','.join(TRACE_COLUMNS)}")
    trace = []
    lines = []
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != len(TRACE_COLUMNS):
            raise TraceFormatError(lineno, f"expected {len(TRACE_COLUMNS)} fields, got {len(row)}")
        try:
            trace.append(Request(
                id=int(row[1]),
                adapter_id=int(row[2]),
                arrival_time=float(row[0]),
                input_len=int(row[3]),
                output_len=int(row[4]),
                head_kind=row[5],
                latency_budget=float(row[6]) if row[6] else None,
            ))
        except ValueError as exc:
            raise TraceFormatError(lineno, str(exc)) from None
        lines.append(lineno)
    for i in range(1, len(trace)):
        if trace[i].arrival_time < trace[i - 1].arrival_time:
            raise TraceFormatError(lines[i], f"request {trace[i].id} arrives before request {trace[i - 1].id}")
    return trace


def load_trace(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return loads_trace(fh.read())
