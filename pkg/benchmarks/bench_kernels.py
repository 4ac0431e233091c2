"""Compare the compiled and numpy convolution kernels on the extractor's layer shapes.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints median wall time per call for forward, input-gradient and
weight-gradient passes, plus the max abs difference between backends. Then
times one optimisation epoch end to end under the default dispatch and with
the numpy fallback forced (``BTC_KERNELS=python``, in a subprocess).
"""
import argparse
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from btcuap import _pykernels, kernels

try:
    from btcuap import _ckernels
except ImportError:  # extension not built
    _ckernels = None

# (batch, in channels, padded H/W, out channels) for a 3-block extractor on 32x32 input,
# batch 7 = cursor frame + 4 neighbours + 2 spare, roughly one loss evaluation
LAYERS = [("block1", 7, 3, 34, 8), ("block2", 7, 8, 18, 16), ("block3", 7, 16, 10, 32)]


def timeit(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--e2e-repeat", type=int, default=3)
    args = p.parse_args()
    impls = [("numpy", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"selected backend: {kernels.BACKEND}")
    print(f"{'layer':8} {'pass':9} " + " ".join(f"{name:>11}" for name, _ in impls) + "   speedup  max|diff|")
    rng = np.random.default_rng(0)
    for name, B, C, S, O in LAYERS:
        x = rng.random((B, C, S, S), dtype=np.float32)
        w = rng.standard_normal((O, C, 3, 3)).astype(np.float32)
        gy = rng.standard_normal((B, O, S - 2, S - 2)).astype(np.float32)
        passes = {
            "forward": lambda m: kernels.conv2d_forward(x, w, 1, impl=m),
            "grad_in": lambda m: kernels.conv2d_backward_input(gy, w, 1, S, S, impl=m),
            "grad_w": lambda m: kernels.conv2d_backward_weight(gy, x, 3, 1, impl=m),
        }
        for pname, call in passes.items():
            times = [timeit(lambda m=m: call(m), args.repeat) for _, m in impls]
            cells = " ".join(f"{1e3 * t:9.3f}ms" for t in times)
            if len(impls) == 2:
                diff = float(np.max(np.abs(call(impls[0][1]).astype(np.float64) - call(impls[1][1]))))
                extra = f"   {times[0] / times[1]:6.2f}x  {diff:.1e}"
            else:
                extra = ""
            print(f"{name:8} {pname:9} {cells}{extra}")
    print(f"dispatch: compiled when in_channels*k*k <= {kernels.COMPILED_MAX_FAN_IN}")
    end_to_end(args.e2e_repeat)


END_TO_END = """
import time, numpy as np
from btcuap import models, uap
imgs = list(np.random.default_rng(0).random((64, 3, 32, 32), dtype=np.float32))
spec = models.build_feature_extractor(2)
t = time.perf_counter()
uap.optimize_uap(imgs, spec, uap.BtcConfig(epochs=1))
print(time.perf_counter() - t)
"""


def end_to_end(repeat):
    print("\noptimize_uap, 64 images x 1 epoch (median of %d runs)" % repeat)
    for label, extra in (("default dispatch", {}), ("numpy fallback", {"BTC_KERNELS": "python"})):
        env = dict(os.environ, **extra)
        runs = [float(subprocess.run([sys.executable, "-c", END_TO_END], env=env, check=True,
                                     capture_output=True, text=True).stdout) for _ in range(repeat)]
        print(f"  {label:17} {statistics.median(runs):.3f}s")


if __name__ == "__main__":
    main()
