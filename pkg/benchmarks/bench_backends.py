"""Compare the compiled tiled kernel with the numpy fallback.

    python3 benchmarks/bench_backends.py [--trials 5] [--json out.json]

Both backends run the same tiling config on the same operands; the report
lists the median time and GFLOP/s per shape.
"""
import argparse
import json
import statistics
import time

import numpy as np

from loraserve import _backend
from loraserve.atmm import DEFAULT_CONFIG, TilingConfig, atmm_multiply
from loraserve.matrix import Matrix

SHAPES = [(32, 256, 256), (128, 256, 64), (128, 64, 256), (256, 256, 256), (512, 512, 512), (256, 4096, 32)]
CONFIGS = [DEFAULT_CONFIG, TilingConfig(64, 32, 32, 32, 32, 32)]


def median_ms(a, b, cfg, backend, trials):
    atmm_multiply(a, b, cfg, backend=backend)
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        atmm_multiply(a, b, cfg, backend=backend)
        times.append(time.perf_counter() - t0)
    return statistics.median(times) * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args()
    backends = ["python"] + (["cython"] if _backend.compiled is not None else [])
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'shape':>14} {'config':>22} " + " ".join(f"{b + ' ms':>11} {'GF/s':>6}" for b in backends) + "  speedup")
    for m, k, n in SHAPES:
        a, b = Matrix.random(m, k, rng), Matrix.random(k, n, rng)
        for cfg in CONFIGS:
            res = {be: median_ms(a, b, cfg, be, args.trials) for be in backends}
            flops = 2.0 * m * k * n
            row = {"shape": [m, k, n], "config": list(cfg.as_tuple()), "ms": res}
            cells = " ".join(f"{res[be]:11.3f} {flops / res[be] / 1e6:6.2f}" for be in backends)
            speed = ""
            if "cython" in res:
                row["speedup"] = res["python"] / res["cython"]
                speed = f"{row['speedup']:8.2f}x"
            print(f"{m:>4}x{k:>4}x{n:<4} {str(cfg):>22} {cells}  {speed}")
            rows.append(row)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
