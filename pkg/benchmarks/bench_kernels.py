"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Also reports what one toy training step costs end to end under each backend,
which is the number that decides whether the extension earns its keep.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from compactlm import _fallback, backend

SHAPES = [(128, 32), (344, 86), (1024, 256), (4096, 1024)]


def kernel_cases(n, r):
    rng = np.random.default_rng(0)
    M = rng.normal(size=(r, n)).astype(np.float32)
    V = np.abs(M)
    G = rng.normal(size=(r, n)).astype(np.float32)
    return {
        "counter_bits": lambda k: k.counter_bits(7, 0, n * r),
        "gaussian_fill": lambda k: k.gaussian_fill(7, n, r, 0.1),
        "sparse_jl_fill": lambda k: k.sparse_jl_fill(7, n, r, 0.1),
        "adam_direction": lambda k: k.adam_direction(M.copy(), V.copy(), G, 0.9, 0.999, 0.5, 0.1, 1e-8),
    }


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


STEP_SNIPPET = """
import time, numpy as np
from compactlm import autograd as ag
from compactlm.train import TrainConfig, build
cfg = TrainConfig(metrics=None)
model, opt = build(cfg, 256)
ids = np.random.default_rng(0).integers(0, 256, (cfg.batch, cfg.seq_len))
store = ag.SavedBufferStore()
times = []
with ag.use_store(store):
    for i in range(12):
        t = time.perf_counter()
        model.zero_grad(); ag.backward(model.loss(ids, ids)); opt.step(1e-3)
        times.append(time.perf_counter() - t)
print(min(times[2:]))
"""


def step_time(name):
    env = dict(os.environ, COMPACTLM_BACKEND=name)
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET], env=env, capture_output=True, text=True,
                         check=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="write results here")
    ap.add_argument("--no-step", action="store_true", help="skip the end-to-end step timing")
    args = ap.parse_args(argv)
    if not backend.native_available():
        sys.exit("compiled kernels are not built; run pip install -e . --no-build-isolation")
    native = backend.get("native")
    rows = []
    print(f"{'kernel':<16}{'shape':>12}{'numpy us':>12}{'native us':>12}{'speedup':>9}")
    for n, r in SHAPES:
        for name, fn in kernel_cases(n, r).items():
            tp, tn = best(lambda: fn(_fallback), args.repeat), best(lambda: fn(native), args.repeat)
            rows.append(dict(kernel=name, n=n, r=r, python_s=tp, native_s=tn))
            print(f"{name:<16}{f'{n}x{r}':>12}{tp * 1e6:>12.1f}{tn * 1e6:>12.1f}{tp / tn:>8.2f}x")
    result = {"kernels": rows}
    if not args.no_step:
        sp, sn = step_time("python"), step_time("native")
        result["train_step"] = dict(python_s=sp, native_s=sn)
        print(f"\ntoy train step: numpy {sp * 1e3:.1f} ms, native {sn * 1e3:.1f} ms ({sp / sn:.2f}x)")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(result, f, indent=2)


if __name__ == "__main__":
    main()
