"""Accuracy-aware knowledge fusion: greedy packing of knowledge sources into adapters.

Sources are trained into the current adapter one at a time. When a training
step pushes any fused task below its accuracy requirement, the adapter is
restored from the checkpoint taken before the step, closed, and a fresh
adapter is started from the offending source.
"""
from __future__ import annotations

import copy
import json
import random
import zlib
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np


class UnsatisfiableSourceError(ValueError):
    def __init__(self, source_id, accuracy, requirement):
        super().__init__(
            f"source {source_id!r} reaches {accuracy:.4f} on its own task, below the required {requirement:.4f}"
        )
        self.source_id = source_id


class OracleSpecError(ValueError):
    pass


@dataclass(frozen=True)
class KnowledgeSource:
    id: str
    task_id: str
    accuracy_requirement: float
    task_type: Optional[str] = None
    head: bool = False

    def __post_init__(self):
        if not 0.0 <= self.accuracy_requirement <= 1.0:
            raise ValueError(f"source {self.id}: requirement must lie in [0, 1]")


class AccuracyOracle(Protocol):
    def init(self): ...

    def train(self, state, source: KnowledgeSource): ...

    def eval(self, state, task_id) -> float: ...


@dataclass
class FusedAdapter:
    sources: tuple
    accuracies: dict
    task_head: Optional[str] = None

    @property
    def source_ids(self):
        return [s.id for s in self.sources]


@dataclass
class FusionPlan:
    adapters: list = field(default_factory=list)

    def to_json(self):
        return {
            "adapters": [
                {"sources": a.source_ids, "accuracies": a.accuracies, "task_head": a.task_head}
                for a in self.adapters
            ]
        }

    def __len__(self):
        return len(self.adapters)


@dataclass(frozen=True)
class Violation:
    adapter: int
    task_id: str
    accuracy: float
    requirement: float


def requirements(sources):
    """Per-task requirement: the strictest among the sources of that task."""
    req = {}
    for s in sources:
        req[s.task_id] = max(req.get(s.task_id, 0.0), s.accuracy_requirement)
    return req


def _task_head(sources):
    types = {s.task_type for s in sources}
    if len(types) == 1 and all(s.head for s in sources):
        return types.pop()
    return None


def _evaluate(oracle, state, sources):
    return {t: float(oracle.eval(state, t)) for t in sorted(requirements(sources))}


def _close(oracle, state, members):
    return FusedAdapter(tuple(members), _evaluate(oracle, state, members), _task_head(members))


def fuse(sources, oracle, seed=None, *, trace=None) -> FusionPlan:
    """Greedy fusion. ``seed`` shuffles the source order; ``None`` keeps the given order.

    ``trace`` (a list) receives ``(event, source_id)`` tuples for inspection.
    """
    sources = list(sources)
    if not sources:
        raise ValueError("no knowledge sources")
    if seed is not None:
        random.Random(seed).shuffle(sources)
    plan = FusionPlan()
    members = []
    state = oracle.init()
    for src in sources:
        checkpoint = copy.deepcopy(state)
        trial = oracle.train(state, src)
        fused = members + [src]
        req = requirements(fused)
        accs = _evaluate(oracle, trial, fused)
        if all(accs[t] >= req[t] for t in req):
            state, members = trial, fused
            if trace is not None:
                trace.append(("fuse", src.id))
            continue
        if not members:
            raise UnsatisfiableSourceError(src.id, accs[src.task_id], req[src.task_id])
        # Roll back to the stored copy, never an arithmetic undo.
        state = checkpoint
        if trace is not None:
            trace.append(("rollback", src.id))
        plan.adapters.append(_close(oracle, state, members))
        state = oracle.train(oracle.init(), src)
        alone = float(oracle.eval(state, src.task_id))
        if alone < src.accuracy_requirement:
            raise UnsatisfiableSourceError(src.id, alone, src.accuracy_requirement)
        members = [src]
        if trace is not None:
            trace.append(("open", src.id))
    plan.adapters.append(_close(oracle, state, members))
    return plan


def validate_plan(plan: FusionPlan, oracle):
    """Re-train every adapter on its sources in plan order and list requirement violations."""
    found = []
    for idx, ad in enumerate(plan.adapters):
        state = oracle.init()
        for src in ad.sources:
            state = oracle.train(state, src)
        req = requirements(ad.sources)
        for task, acc in _evaluate(oracle, state, ad.sources).items():
            if acc < req[task]:
                found.append(Violation(idx, task, acc, req[task]))
    return found


@dataclass
class SyntheticState:
    members: tuple = ()
    types: dict = field(default_factory=dict)
    weights: np.ndarray = field(default_factory=lambda: np.zeros(8))


def _stable_u01(*parts):
    return zlib.crc32("\x1f".join(map(str, parts)).encode()) / 0xFFFFFFFF


class SyntheticOracle:
    """Deterministic stand-in for fine-tuning.

    ``decay`` mode: a task's accuracy is ``base - slope * k`` where ``k`` is
    the number of sources fused so far and the slope may depend on the
    task type. ``interference`` mode: ``standalone - sum of penalties`` that
    the other fused sources impose on the task. Optional bounded noise is a
    pure function of (seed, fused set, task).
    """

    def __init__(self, mode="decay", base=1.0, slope=0.05, slopes=None, standalone=None,
                 table=None, default_penalty=0.0, noise=0.0, seed=0):
        if mode not in ("decay", "interference"):
            raise OracleSpecError(f"unknown oracle mode {mode!r}")
        if noise < 0:
            raise OracleSpecError("noise must be non-negative")
        self.mode = mode
        self.base = float(base)
        self.slope = float(slope)
        self.slopes = dict(slopes or {})
        self.standalone = dict(standalone or {})
        self.table = {k: dict(v) for k, v in (table or {}).items()}
        self.default_penalty = float(default_penalty)
        self.noise = float(noise)
        self.seed = seed

    def init(self):
        return SyntheticState()

    def train(self, state, source):
        rng = np.random.default_rng(zlib.crc32(f"{self.seed}/{source.id}".encode()))
        types = dict(state.types)
        types[source.task_id] = source.task_type
        return SyntheticState(
            state.members + ((source.id, source.task_id),),
            types,
            state.weights * 0.9 + rng.standard_normal(state.weights.shape),
        )

    def eval(self, state, task_id):
        if task_id not in state.types:
            return 0.0
        if self.mode == "decay":
            slope = self.slopes.get(state.types[task_id], self.slope)
            acc = self.base - slope * len(state.members)
        else:
            acc = self.standalone.get(task_id, self.base)
            for sid, tid in state.members:
                if tid != task_id:
                    acc -= self.table.get(sid, {}).get(task_id, self.default_penalty)
        if self.noise:
            key = sorted(sid for sid, _ in state.members)
            acc += self.noise * (2 * _stable_u01(self.seed, key, task_id) - 1)
        return min(1.0, max(0.0, acc))


def synthetic_oracle(spec) -> SyntheticOracle:
    """Build an oracle from a JSON-style dict (``mode`` plus that mode's parameters)."""
    if not isinstance(spec, dict):
        raise OracleSpecError("oracle spec must be a mapping")
    allowed = {"mode", "base", "slope", "slopes", "standalone", "table", "default_penalty", "noise", "seed"}
    extra = set(spec) - allowed
    if extra:
        raise OracleSpecError(f"unknown oracle fields: {sorted(extra)}")
    try:
        return SyntheticOracle(**spec)
    except (TypeError, ValueError) as exc:
        raise OracleSpecError(str(exc)) from None


class ToyTrainingOracle:
    """A real (tiny) low-rank softmax classifier trained by gradient descent.

    Every task is a two-class problem on its own Gaussian clusters and owns
    two output columns. All tasks share one rank-``rank`` factor pair, so
    fusing more tasks competes for the same capacity.
    """

    def __init__(self, task_ids, dim=16, rank=2, steps=60, lr=0.5, samples=128, seed=0):
        self.tasks = {t: i for i, t in enumerate(sorted(set(task_ids)))}
        self.dim, self.rank, self.steps, self.lr = dim, rank, steps, lr
        rng = np.random.default_rng(seed)
        self.data = {}
        for t in self.tasks:
            centers = rng.standard_normal((2, dim)) * 1.5
            x = np.concatenate([c + rng.standard_normal((samples, dim)) for c in centers])
            y = np.repeat([0, 1], samples)
            self.data[t] = (x, y)
        self.seed = seed

    def init(self):
        rng = np.random.default_rng(self.seed + 1)
        return {
            "down": rng.standard_normal((self.dim, self.rank)) * 0.1,
            "up": np.zeros((self.rank, 2 * len(self.tasks))),
        }

    def _cols(self, task_id):
        i = self.tasks[task_id]
        return slice(2 * i, 2 * i + 2)

    def train(self, state, source):
        down, up = state["down"].copy(), state["up"].copy()
        x, y = self.data[source.task_id]
        cols = self._cols(source.task_id)
        onehot = np.eye(2)[y]
        for _ in range(self.steps):
            h = x @ down
            logits = h @ up[:, cols]
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - onehot) / len(x)
            g_up = h.T @ g
            g_down = x.T @ (g @ up[:, cols].T)
            up[:, cols] -= self.lr * g_up
            down -= self.lr * g_down
        return {"down": down, "up": up}

    def eval(self, state, task_id):
        x, y = self.data[task_id]
        logits = x @ state["down"] @ state["up"][:, self._cols(task_id)]
        return float(np.mean(np.argmax(logits, axis=1) == y))


def load_sources_spec(path):
    """Read ``{"sources": [...], "oracle": {...}, "seed": int|null}``."""
    with open(path) as fh:
        obj = json.load(fh)
    sources = [
        KnowledgeSource(
            str(s["id"]),
            str(s.get("task_id", s["id"])),
            float(s["requirement"]),
            s.get("task_type"),
            bool(s.get("head", False)),
        )
        for s in obj["sources"]
    ]
    return sources, synthetic_oracle(obj.get("oracle", {})), obj.get("seed")
