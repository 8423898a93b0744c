"""Compiled-extension vs pure-numpy kernel timings.

Runs each hot kernel on representative shapes under both backends by
re-executing itself with DILSEG_KERNELS set, then prints a side-by-side
table. Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

CASES = [
    # (label, builder name, kwargs)
    ("conv3x3 r1 8->16 48px", "conv", {"m": 3, "r": 1, "cin": 8, "cout": 16, "hw": 48}),
    ("conv3x3 r4 32->32 48px", "conv", {"m": 3, "r": 4, "cin": 32, "cout": 32, "hw": 48}),
    ("conv1x1 32->8 48px", "conv", {"m": 1, "r": 1, "cin": 32, "cout": 8, "hw": 48}),
    ("tconv16 s8 8ch 12px", "tconv", {"m": 16, "s": 8, "c": 8, "hw": 12}),
    ("maxpool2 96px 8ch", "pool", {"c": 8, "hw": 96}),
]


def run_case(ops, name, kwargs, repeats):
    rng = np.random.default_rng(0)
    if name == "conv":
        m, r, cin, cout, hw = (kwargs[k] for k in ("m", "r", "cin", "cout", "hw"))
        spec = ops.ConvSpec(m, cin, cout, dilation=r)
        x = ops.Tensor(rng.standard_normal((cin, hw, hw)))
        k = ops.Tensor(rng.standard_normal((cout, cin, m, m)))
        b = ops.Tensor(rng.standard_normal(cout))
        fwd = lambda: ops.dilated_conv2d_forward(x, k, b, spec)
        g = ops.Tensor(np.asarray(fwd().data))
        bwd = lambda: ops.dilated_conv2d_backward(x, k, spec, g)
    elif name == "tconv":
        m, s, c, hw = (kwargs[k] for k in ("m", "s", "c", "hw"))
        x = ops.Tensor(rng.standard_normal((c, hw, hw)))
        k = ops.Tensor(rng.standard_normal((c, c, m, m)))
        fwd = lambda: ops.transposed_conv2d(x, k, s)
        g = ops.Tensor(np.asarray(fwd().data))
        bwd = lambda: ops.transposed_conv2d_backward(x, k, s, g)
    else:
        c, hw = kwargs["c"], kwargs["hw"]
        spec = ops.PoolSpec(2, 2)
        x = ops.Tensor(rng.standard_normal((c, hw, hw)))
        fwd = lambda: ops.maxpool2d(x, spec)
        _, idx = fwd()
        g = ops.Tensor(rng.standard_normal((c, hw // 2, hw // 2)))
        bwd = lambda: ops.maxpool2d_backward(idx, (c, hw, hw), g)

    times = {}
    for label, fn in (("fwd", fwd), ("bwd", bwd)):
        fn()  # warm up
        best = min(
            (lambda t0=time.perf_counter(): (fn(), time.perf_counter() - t0)[1])()
            for _ in range(repeats)
        )
        times[label] = best
    return times


def measure(repeats):
    from dilseg import backend, ops

    rows = {}
    for label, name, kwargs in CASES:
        rows[label] = run_case(ops, name, kwargs, repeats)
    return {"backend": backend.KERNEL_BACKEND, "rows": rows}


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--emit-json", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()

    if args.emit_json:
        print(json.dumps(measure(args.repeats)))
        return

    results = {}
    for backend_name in ("compiled", "python"):
        env = dict(os.environ, DILSEG_KERNELS=backend_name)
        proc = subprocess.run(
            [sys.executable, __file__, "--repeats", str(args.repeats), "--emit-json"],
            capture_output=True,
            text=True,
            env=env,
        )
        if proc.returncode != 0:
            print(f"{backend_name}: unavailable\n{proc.stderr.strip()}", file=sys.stderr)
            continue
        results[backend_name] = json.loads(proc.stdout)

    if not results:
        sys.exit(1)
    width = max(len(label) for label, _, _ in CASES)
    print(f"{'case':<{width}}  pass  " + "".join(f"{b:>12}" for b in results)
          + ("     speedup" if len(results) == 2 else ""))
    for label, _, _ in CASES:
        for pass_name in ("fwd", "bwd"):
            cells = [results[b]["rows"][label][pass_name] for b in results]
            line = f"{label:<{width}}  {pass_name}   " + "".join(
                f"{1e3 * v:>10.3f}ms" for v in cells
            )
            if len(cells) == 2:
                line += f"  {cells[1] / cells[0]:>9.1f}x"
            print(line)


if __name__ == "__main__":
    main()
