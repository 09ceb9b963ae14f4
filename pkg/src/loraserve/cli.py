"""``loraserve`` command line: tune, bench, fuse, gen-workload, verify.

Options may also come from a JSON file given with ``--config``; keys are the
option names with dashes replaced by underscores, and flags on the command
line win over the file.

Exit codes: 0 success, 1 usage error, 2 failed verification or run, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import _backend
from .atmm import (
    DEFAULT_CONFIG,
    THREADS_ENV,
    NoFeasibleConfigError,
    TilingTable,
    candidate_configs,
    default_shape_grid,
    parse_shape,
    set_num_threads,
    tiling_search,
)
from .batching import UnknownAdapterError
from .fusion import OracleSpecError, UnsatisfiableSourceError, fuse, load_sources_spec
from .model import BaseModel, LoraAdapter, load_fixture
from .orchestrator import SchedulerConfig, serve_loop
from .workload import PROFILES, TraceFormatError, WorkloadSpec, generate, load_trace, save_trace

EXIT_OK, EXIT_USAGE, EXIT_FAIL, EXIT_IO = 0, 1, 2, 3
MODES = ("auto", "merged", "unmerged", "mixture")

log = logging.getLogger("loraserve")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _l2_bytes(default=1 << 20):
    path = Path("/sys/devices/system/cpu/cpu0/cache/index2/size")
    try:
        text = path.read_text().strip().upper()
    except OSError:
        return default
    mult = {"K": 1 << 10, "M": 1 << 20}.get(text[-1:], 1)
    try:
        return int(text.rstrip("KM")) * mult
    except ValueError:
        return default


def _csv_ints(text):
    return tuple(int(v) for v in text.split(",") if v)


def _profiles(items):
    """``name`` or ``name:weight`` items into (profiles, weights)."""
    profs, weights = [], []
    for item in items:
        name, _, w = item.partition(":")
        if name not in PROFILES:
            raise UsageError(f"unknown profile {name!r}; known: {', '.join(sorted(PROFILES))}")
        profs.append(PROFILES[name])
        weights.append(float(w) if w else 1.0)
    return tuple(profs), tuple(weights)


def _add_workload_args(p):
    p.add_argument("--duration", type=float, default=10.0, help="seconds of arrivals")
    p.add_argument("--rate", type=float, default=50.0, help="requests per second")
    p.add_argument("--adapters", type=int, default=4)
    p.add_argument("--skew", type=float, default=0.9, help="share of traffic for the hot adapter")
    p.add_argument("--arrival", choices=["poisson", "uniform"], default="poisson")
    p.add_argument("--profile", action="append", default=None, metavar="NAME[:WEIGHT]",
                   help=f"app profile, repeatable ({', '.join(sorted(PROFILES))})")


def build_parser():
    p = _Parser(prog="loraserve", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON file with option defaults")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0; fuse: the spec's seed)")
    p.add_argument("--threads", type=int, default=None, help=f"worker threads (also ${THREADS_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    p.commands = {}

    t = p.commands["tune"] = sub.add_parser("tune", help="search tiling configs and write a tiling table")
    t.add_argument("-o", "--output", required=True)
    t.add_argument("--shapes", nargs="+", metavar="MxKxN", help="explicit shapes instead of the default grid")
    t.add_argument("--hidden-dim", type=int, default=256)
    t.add_argument("--ranks", type=_csv_ints, default=(16, 32, 64, 128))
    t.add_argument("--m-max", type=int, default=256)
    t.add_argument("--cache-budget", type=int, default=None, help="bytes; defaults to the L2 size")
    t.add_argument("--max-edge", type=int, default=256)
    t.add_argument("--trials", type=int, default=5)
    t.add_argument("--quick", action="store_true", help="small grid and candidate set")

    b = p.commands["bench"] = sub.add_parser("bench", help="serve a workload and write metrics")
    b.add_argument("-o", "--output", required=True, help="output directory")
    b.add_argument("--tiling-table")
    b.add_argument("--fixture", help="model directory with manifest.json")
    b.add_argument("--trace", help="trace CSV; otherwise a workload is generated")
    b.add_argument("--force-mode", "--mode", dest="mode", choices=MODES, default="auto")
    b.add_argument("--max-bs", type=int, default=8)
    b.add_argument("--theta", type=float, default=None, help="fixed starvation threshold in ms")
    b.add_argument("--layers", type=int, default=4)
    b.add_argument("--hidden-dim", type=int, default=256)
    b.add_argument("--vocab", type=int, default=1024)
    b.add_argument("--rank", type=int, default=64)
    b.add_argument("--num-classes", type=int, default=8)
    _add_workload_args(b)

    f = p.commands["fuse"] = sub.add_parser("fuse", help="plan fused adapters from a sources spec")
    f.add_argument("spec")
    f.add_argument("-o", "--output", required=True)

    g = p.commands["gen-workload"] = sub.add_parser("gen-workload", help="write a synthetic trace CSV")
    g.add_argument("-o", "--output", required=True)
    _add_workload_args(g)

    v = p.commands["verify"] = sub.add_parser("verify", help="run the invariant suite")
    v.add_argument("--quick", action="store_true")
    v.add_argument("--inject-fault", choices=["none", "weight", "delora"], default="none")
    v.add_argument("--report", help="write the JSON report here as well as stdout")
    return p


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.error("a subcommand is required")
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            parser.error(f"config {args.config} is not valid JSON: {exc}")
        if not isinstance(cfg, dict):
            parser.error("config file must hold a JSON object")
        # Re-parse with the file as defaults so explicit flags still win.
        parser = build_parser()
        top = {"config", "seed", "threads", "verbose"}
        parser.set_defaults(**{k: v for k, v in cfg.items() if k in top})
        # Subparser defaults would clobber top-level flags, so keep them apart.
        parser.commands[args.command].set_defaults(**{k: v for k, v in cfg.items() if k not in top})
        args = parser.parse_args(argv)
    return args


def _seed(args):
    return 0 if args.seed is None else args.seed


def _workload(args):
    profiles, weights = _profiles(args.profile or ["desk-vqa"])
    return WorkloadSpec(args.duration, args.rate, args.adapters, args.skew, args.arrival,
                        profiles, weights, _seed(args))


def cmd_tune(args):
    if args.shapes:
        try:
            grid = [parse_shape(s) for s in args.shapes]
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    elif args.quick:
        grid = default_shape_grid(args.hidden_dim, (16, 64), m_max=96)
    else:
        grid = default_shape_grid(args.hidden_dim, args.ranks, m_max=args.m_max)
    budget = args.cache_budget or _l2_bytes()
    cands = candidate_configs(budget, max_edge=64 if args.quick else args.max_edge)
    trials = 3 if args.quick else args.trials
    log.info("tuning %d shapes x %d candidates, %d trials", len(grid), len(cands), trials)

    def report(shape, entry):
        print(f"{shape[0]}x{shape[1]}x{shape[2]}\t{entry.config}\t{entry.ns} ns", flush=True)

    table = tiling_search(grid, cands, trials, seed=_seed(args), progress=report)
    table.save(args.output)
    print(f"wrote {len(table)} entries to {args.output}; default {table.default_config}")
    if table.failed_shapes:
        print(f"failed shapes: {table.failed_shapes}", file=sys.stderr)
    return EXIT_OK


def _load_models(args):
    if args.fixture:
        return load_fixture(args.fixture)
    rng = np.random.default_rng(_seed(args))
    model = BaseModel.random(args.layers, args.hidden_dim, args.vocab, rng)
    adapters = {
        i: LoraAdapter.random(i, args.layers, args.hidden_dim, args.rank, rng, num_classes=args.num_classes)
        for i in range(args.adapters)
    }
    return model, adapters


def cmd_bench(args):
    table = TilingTable.load(args.tiling_table) if args.tiling_table else TilingTable.single(DEFAULT_CONFIG)
    model, adapters = _load_models(args)
    trace = load_trace(args.trace) if args.trace else generate(_workload(args))
    config = SchedulerConfig(max_bs=args.max_bs, theta=args.theta)
    metrics = serve_loop(model, adapters, trace, config, table, forced_mode=args.mode, seed=_seed(args))
    metrics.write(args.output)
    s = metrics.summary()
    print(f"{s['requests']} requests  avg_token_latency {s['avg_token_latency_ms']:.4f} ms  "
          f"throughput {s['throughput_rps']:.1f} rps  switches {s['switches']}")
    return EXIT_OK


def cmd_fuse(args):
    sources, oracle, seed = load_sources_spec(args.spec)
    if args.seed is not None:
        seed = args.seed
    plan = fuse(sources, oracle, seed=seed)
    out = plan.to_json()
    Path(args.output).write_text(json.dumps(out, indent=1) + "\n")
    print(f"{len(plan)} adapters")
    for i, ad in enumerate(plan.adapters):
        accs = ", ".join(f"{t}={a:.4f}" for t, a in ad.accuracies.items())
        print(f"  adapter {i}: {', '.join(ad.source_ids)}  [{accs}]")
    return EXIT_OK


def cmd_gen_workload(args):
    trace = generate(_workload(args))
    save_trace(trace, args.output)
    print(f"wrote {len(trace)} requests to {args.output}")
    return EXIT_OK


def cmd_verify(args):
    from .verify import run_all

    report = run_all(seed=_seed(args), quick=args.quick, fault=args.inject_fault)
    text = json.dumps(report, indent=1)
    print(text)
    if args.report:
        Path(args.report).write_text(text + "\n")
    for c in report["checks"]:
        if not c["passed"]:
            print(f"FAILED: {c['name']}", file=sys.stderr)
    return EXIT_OK if report["passed"] else EXIT_FAIL


COMMANDS = {
    "tune": cmd_tune,
    "bench": cmd_bench,
    "fuse": cmd_fuse,
    "gen-workload": cmd_gen_workload,
    "verify": cmd_verify,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except OSError as exc:
        print(f"loraserve: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = args.threads or os.environ.get(THREADS_ENV)
    if threads:
        set_num_threads(int(threads))
    log.info("kernel backend: %s", _backend.NAME)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"loraserve: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UnsatisfiableSourceError, UnknownAdapterError, NoFeasibleConfigError) as exc:
        print(f"loraserve: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (TraceFormatError, OracleSpecError, KeyError, json.JSONDecodeError, ValueError) as exc:
        print(f"loraserve: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"loraserve: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
