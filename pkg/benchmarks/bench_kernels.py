"""numba vs numpy timings for every hot kernel, plus one full training step
per backend (each in a fresh interpreter, since the backend is fixed at import).

    python benchmarks/bench_kernels.py [--repeat 200]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from goalflow import _kernels as K

STEP_SNIPPET = """
import time
from goalflow import _kernels
from goalflow.bundle import configs_for, init_bundle
from goalflow.msth import MSTHParams
from goalflow.simenv import EnvConfig, generate_demos
from goalflow.trainkit import TrainConfig, train_stage1
m = MSTHParams(24, 8, 4, 2)
demos = generate_demos(EnvConfig(), 20, 0)
b = init_bundle(*configs_for(m), m)
train_stage1(demos, b, TrainConfig(steps=2, batch_size=64))  # warm-up (jit compile)
t = time.perf_counter()
train_stage1(demos, b, TrainConfig(steps={steps}, batch_size=64))
print(_kernels.BACKEND, (time.perf_counter() - t) / {steps})
"""


def kernel_cases(gen):
    # shapes as seen in a batch-64 training step (tokens x width rows)
    x = gen.normal(size=(64 * 40, 64))
    y, rstd = K.NUMPY_KERNELS["layer_norm_fwd"](x, 1e-5)
    att = gen.normal(size=(64 * 4 * 40, 40))
    p = K.NUMPY_KERNELS["softmax_fwd"](att)
    g = gen.normal(size=x.shape)
    ga = gen.normal(size=att.shape)
    cx, cy = gen.uniform(size=3), gen.uniform(size=3)
    sx = gen.uniform(size=(4, 7))
    return {
        "layer_norm_fwd": (x, 1e-5),
        "layer_norm_bwd": (g, y, rstd),
        "softmax_fwd": (att,),
        "softmax_bwd": (ga, p),
        "gelu_fwd": (x,),
        "gelu_bwd": (g, x),
        "draw_discs": (np.zeros((16, 16)), cx, cy, 0.08, 0.6, False),
        "draw_segments": (np.zeros((16, 16)), sx[0], sx[1], sx[2], sx[3], 0.03, 0.3),
    }


def time_kernels(repeat):
    if K.NUMBA_KERNELS is None:
        print("numba unavailable; only the numpy path exists")
        return
    cases = kernel_cases(np.random.default_rng(0))
    print(f"{'kernel':16s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for name, args in cases.items():
        K.NUMBA_KERNELS[name](*args)  # compile
        t_np = min(timeit.repeat(lambda: K.NUMPY_KERNELS[name](*args), number=1, repeat=repeat))
        t_nb = min(timeit.repeat(lambda: K.NUMBA_KERNELS[name](*args), number=1, repeat=repeat))
        print(f"{name:16s} {t_np * 1e6:10.1f} {t_nb * 1e6:10.1f} {t_np / t_nb:8.2f}")


def time_training_step(steps):
    for flag in ("0", "1"):
        env = dict(os.environ, GOALFLOW_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env,
                             capture_output=True, text=True, check=True)
        backend, sec = out.stdout.split()
        print(f"training step ({backend}): {float(sec) * 1e3:.1f} ms")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--steps", type=int, default=20)
    args = ap.parse_args()
    time_kernels(args.repeat)
    time_training_step(args.steps)


if __name__ == "__main__":
    main()
