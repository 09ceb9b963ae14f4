"""Self-check suite behind ``loraserve verify``.

Every check returns a :class:`CheckResult`; :func:`run_all` collects them
into a JSON-friendly report. Checks build their own random instances from
a seed so the report is reproducible apart from timings.
"""
from __future__ import annotations

import math
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _backend
from .atmm import DEFAULT_CONFIG, TilingConfig, TilingTable, atmm_multiply, candidate_configs
from .fusion import KnowledgeSource, SyntheticOracle, fuse, validate_plan
from .matrix import Matrix, gemm_reference, load_binary, max_abs_diff, save_binary
from .model import (
    BaseModel,
    LoraAdapter,
    Merged,
    Mixture,
    ModelState,
    Unmerged,
    forward_merged,
    forward_mixture,
    forward_unmerged,
    merge,
    unmerge,
)
from .orchestrator import Request, SchedulerConfig, init_delora, schedule

TOL = 1e-4
FAULTS = ("none", "weight", "delora")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0


def relative_error(got: Matrix, ref: Matrix):
    """max |got - ref| scaled by max(1, max |ref|)."""
    scale = max(1.0, float(np.max(np.abs(ref.array.astype(np.float64)))))
    return max_abs_diff(got, ref) / scale


def _timed(fn):
    def run(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = round(time.perf_counter() - t0, 3)
        return res
    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


def random_shapes(count, rng, max_dim=512):
    return [tuple(int(v) for v in rng.integers(1, max_dim + 1, size=3)) for _ in range(count)]


@_timed
def check_atmm_oracle(rng, shapes=50, configs=5, max_dim=512, backend=None):
    """Tiled GEMM against the float64 reference on random shapes and configs."""
    pool = candidate_configs(1 << 20)
    worst = 0.0
    worst_case = None
    for m, k, n in random_shapes(shapes, rng, max_dim):
        a = Matrix.random(m, k, rng)
        b = Matrix.random(k, n, rng)
        ref = gemm_reference(a, b)
        picks = rng.choice(len(pool), size=configs, replace=False)
        for i in picks:
            err = relative_error(atmm_multiply(a, b, pool[i], backend=backend), ref)
            if err > worst:
                worst, worst_case = err, [m, k, n, list(pool[i].as_tuple())]
    return CheckResult("atmm_oracle", worst <= TOL, {
        "shapes": shapes, "configs_per_shape": configs, "max_rel_err": worst, "worst_case": worst_case,
    })


@_timed
def check_backend_agreement(rng, shapes=10):
    """Compiled and fallback kernels agree to float32 rounding."""
    if _backend.compiled is None:
        return CheckResult("backend_agreement", True, {"skipped": "compiled kernels unavailable"})
    worst = 0.0
    for m, k, n in random_shapes(shapes, rng, 200):
        a, b = Matrix.random(m, k, rng), Matrix.random(k, n, rng)
        c1 = atmm_multiply(a, b, DEFAULT_CONFIG, backend="cython")
        c2 = atmm_multiply(a, b, DEFAULT_CONFIG, backend="python")
        worst = max(worst, relative_error(c1, c2))
    return CheckResult("backend_agreement", worst <= TOL, {"max_rel_err": worst})


def random_instance(rng, num_adapters=3, hidden_dim=256, num_layers=4, max_rank=64, max_rows=48):
    model = BaseModel.random(num_layers, hidden_dim, 64, rng)
    ranks = [16, 32, 64]
    adapters = {}
    for i in range(num_adapters):
        r = int(rng.choice([x for x in ranks if x <= max_rank]))
        adapters[i] = LoraAdapter.random(i, num_layers, hidden_dim, r, rng)
    rows = int(rng.integers(num_adapters, max_rows + 1))
    assignment = [int(a) for a in rng.integers(0, num_adapters, size=rows)]
    assignment[:num_adapters] = list(range(num_adapters))
    x = Matrix.random(rows, hidden_dim, rng)
    return model, adapters, x, assignment


def _perturb(model):
    model.layer_weights[0].array[0, 0] += 0.5


@_timed
def check_mode_equivalence(rng, instances=100, table=None, fault="none"):
    """Merged forward equals unmerged forward for a single adapter."""
    table = table or TilingTable.single(DEFAULT_CONFIG)
    worst = 0.0
    for _ in range(instances):
        model, adapters, x, _ = random_instance(rng, num_adapters=1)
        assignment = [0] * x.rows
        state = ModelState()
        ref = forward_unmerged(model, state, x, assignment, adapters, table)
        merge(model, state, adapters[0], table)
        if fault == "weight":
            _perturb(model)
        got = forward_merged(model, state, x, table)
        worst = max(worst, relative_error(got, ref))
    return CheckResult("mode_equivalence", worst <= TOL, {"instances": instances, "max_rel_err": worst, "fault": fault})


@_timed
def check_delora_identity(rng, instances=100, table=None, fault="none"):
    """Rows of non-merged adapters in mixture mode equal their unmerged rows."""
    table = table or TilingTable.single(DEFAULT_CONFIG)
    worst = 0.0
    for _ in range(instances):
        model, adapters, x, assignment = random_instance(rng)
        others = [i for i, a in enumerate(assignment) if a != 0]
        state = ModelState()
        ref = forward_unmerged(model, state, x, assignment, adapters, table)
        merge(model, state, adapters[0], table)
        state.mode = Mixture(0)
        init_delora(state, adapters[0])
        if fault == "delora":
            _perturb(model)
        got = forward_mixture(model, state, x, assignment, adapters, table)
        worst = max(worst, relative_error(Matrix.wrap(got.array[others]), Matrix.wrap(ref.array[others])))
    return CheckResult("delora_identity", worst <= TOL, {"instances": instances, "max_rel_err": worst, "fault": fault})


@_timed
def check_round_trip(rng, cycles=100, table=None):
    """Repeated merge/unmerge keeps weights within tolerance and in place."""
    table = table or TilingTable.single(DEFAULT_CONFIG)
    model = BaseModel.random(4, 256, 64, rng)
    adapter = LoraAdapter.random(0, 4, 256, 64, rng)
    before = model.checkpoint()
    addrs = model.weight_addresses()
    state = ModelState()
    moved = 0
    for _ in range(cycles):
        merge(model, state, adapter, table)
        unmerge(model, state, adapter, table)
        moved += model.weight_addresses() != addrs
    drift = float(np.max(np.abs(model.checkpoint().astype(np.float64) - before)))
    bound = TOL * float(np.max(np.abs(before)))
    return CheckResult("merge_round_trip", drift <= bound and moved == 0, {
        "cycles": cycles, "drift": drift, "bound": bound, "reallocations": int(moved),
    })


def _req(rid, adapter, credit):
    r = Request(rid, adapter, float(rid), 1, 1)
    r.credit = credit
    return r


def hand_traces():
    """The three documented scheduling scenarios as (name, queue, expected mode, expected ids)."""
    theta = 10.0
    merge_q = [_req(i, 1, 0.0) for i in range(6)] + [_req(6, 2, 0.0), _req(7, 2, 0.0)]
    mix_q = [_req(0, 2, 20.0), _req(1, 2, 20.0)] + [_req(i, 1, 0.0) for i in range(2, 7)]
    unm_q = [_req(i, i % 3, 20.0) for i in range(5)] + [_req(i, 1, 0.0) for i in range(5, 9)]
    return theta, [
        ("merge", merge_q, Merged(1), [0, 1, 2, 3, 4, 5]),
        ("mixture", mix_q, Mixture(1), [0, 1, 2, 3, 4, 5, 6]),
        ("unmerge", unm_q, Unmerged, [0, 1, 2, 3, 4, 5, 6, 7]),
    ]


@_timed
def check_scheduler(rng=None):
    """Alg. 1 on the three hand-written queues."""
    theta, cases = hand_traces()
    cfg = SchedulerConfig(max_bs=8, theta=theta)
    got = {}
    ok = True
    for name, queue, mode, ids in cases:
        m, batch = schedule(queue, Unmerged, cfg)
        ids_got = [r.id for r in batch]
        got[name] = {"mode": str(m), "batch": ids_got}
        ok &= m == mode and ids_got == ids
    return CheckResult("scheduler_hand_traces", bool(ok), got)


@_timed
def check_binary_round_trip(rng):
    ok = True
    with tempfile.TemporaryDirectory() as tmp:
        for dtype in (np.float32, np.float64):
            m = Matrix.random(int(rng.integers(1, 40)), int(rng.integers(1, 40)), rng, dtype=dtype)
            path = Path(tmp) / "m.bin"
            save_binary(m, path)
            back = load_binary(path)
            ok &= back == m and back.dtype == m.dtype
    return CheckResult("binary_round_trip", bool(ok))


@_timed
def check_fusion(rng, runs=20):
    """Closed-form decay case plus soundness of random plans."""
    detail = {}
    ok = True
    for n in (1, 2, 5, 8):
        srcs = [KnowledgeSource(f"s{i}", f"t{i}", 0.87) for i in range(n)]
        plan = fuse(srcs, SyntheticOracle("decay", base=1.0, slope=0.05))
        detail[f"decay_n{n}"] = len(plan)
        ok &= len(plan) == math.ceil(n / 2)
    bad = 0
    for i in range(runs):
        srcs = [KnowledgeSource(f"s{j}", f"t{j}", float(rng.uniform(0.5, 0.9))) for j in range(int(rng.integers(1, 9)))]
        oracle = SyntheticOracle("decay", base=1.0, slope=float(rng.uniform(0.0, 0.1)), noise=0.01, seed=i)
        try:
            plan = fuse(srcs, oracle, seed=i)
        except ValueError:
            continue
        bad += len(validate_plan(plan, oracle))
    detail["violations"] = bad
    return CheckResult("fusion", bool(ok and bad == 0), detail)


@_timed
def check_table_round_trip(rng):
    cfg = TilingConfig(64, 32, 32, 32, 32, 32)
    table = TilingTable.single(cfg)
    back = TilingTable.from_json(table.to_json())
    return CheckResult("tiling_table_round_trip", back.to_json() == table.to_json())


def run_all(seed=0, quick=False, fault="none"):
    """Run every check; ``quick`` shrinks instance counts to fit a short budget."""
    if fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    rng = np.random.default_rng(seed)
    n = 10 if quick else 100
    results = [
        check_atmm_oracle(rng, shapes=10 if quick else 50, configs=5, max_dim=256 if quick else 512),
        check_backend_agreement(rng),
        check_mode_equivalence(rng, instances=n, fault=fault),
        check_delora_identity(rng, instances=n, fault=fault),
        check_round_trip(rng, cycles=20 if quick else 100),
        check_scheduler(rng),
        check_binary_round_trip(rng),
        check_fusion(rng, runs=5 if quick else 20),
        check_table_round_trip(rng),
    ]
    return {
        "seed": seed,
        "quick": quick,
        "backend": _backend.NAME,
        "passed": all(r.passed for r in results),
        "checks": [asdict(r) for r in results],
    }
