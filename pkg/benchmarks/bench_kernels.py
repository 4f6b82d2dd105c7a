"""Compiled vs numpy kernel timings on the shapes a default training step uses.

    python3 benchmarks/bench_kernels.py [--repeat 50]

Prints one row per kernel and shape with the median time of each backend
and the speedup, then the same for a full forward/backward/optimizer step.
"""

import argparse
import statistics
import time

import numpy as np

from rgbt_decouple import kernels
from rgbt_decouple.data import CorpusSpec, generate, stack
from rgbt_decouple.model import Network, NetworkConfig
from rgbt_decouple.train import TrainConfig, make_optimizer, total_loss

# (N, C, H, W, stride) for every 3x3 conv input in the default network at batch 4
CONV_SHAPES = [
    (4, 3, 32, 32, 2), (4, 8, 16, 16, 2), (4, 16, 8, 8, 2),
    (4, 32, 4, 4, 1), (4, 48, 8, 8, 1), (4, 24, 16, 16, 1), (4, 8, 16, 16, 1),
]


def median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_kernel(name, make_call, repeat):
    rows = []
    for backend in ("python", "compiled"):
        kernels.use_backend(backend)
        rows.append(median_time(make_call(), repeat))
    return rows


def run(repeat):
    if not kernels.compiled_available():
        print("compiled backend not built; only the numpy fallback is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16} {'shape':<22} {'numpy':>10} {'compiled':>10} {'speedup':>8}")

    def row(name, shape, t):
        print(f"{name:<16} {shape:<22} {t[0] * 1e6:>8.0f}us {t[1] * 1e6:>8.0f}us {t[0] / t[1]:>7.2f}x")

    for n, c, h, w, s in CONV_SHAPES:
        x = rng.normal(size=(n, c, h, w))
        ho, wo = (h - 1) // s + 1, (w - 1) // s + 1
        cols = rng.normal(size=(c * 9, n * ho * wo))
        label = f"{n}x{c}x{h}x{w}/s{s}"
        row("im2col", label, bench_kernel("im2col", lambda: lambda: kernels.im2col(x, s), repeat))
        row("col2im", label, bench_kernel("col2im", lambda: lambda: kernels.col2im(cols, (n, c, h, w), s), repeat))
    a = rng.integers(0, 4, size=50 * 32 * 32)
    b = rng.integers(0, 4, size=50 * 32 * 32)
    row("confusion", "51200 px, 4 classes", bench_kernel("cm", lambda: lambda: kernels.confusion_matrix(a, b, 4), repeat))
    blob = rng.bytes(200_000)
    row("fnv1a64", "200 kB", bench_kernel("fnv", lambda: lambda: kernels.fnv1a64(blob), max(3, repeat // 10)))

    corpus = generate(CorpusSpec(n_train=4 * 12, n_test=1))
    step_times = []
    for backend in ("python", "compiled"):
        kernels.use_backend(backend)
        net = Network(NetworkConfig())
        opt = make_optimizer(net, TrainConfig())
        batches = [stack(corpus.train[i:i + 4]) for i in range(0, len(corpus.train), 4)]

        def step(i=[0]):
            rgb, th, label = batches[i[0] % len(batches)]
            i[0] += 1
            loss, _ = total_loss(net.forward_full(rgb, th), label)
            opt.zero_grad()
            loss.backward()
            opt.step()

        step()
        step_times.append(median_time(step, max(5, repeat // 5)))
    row("train step", "batch 4, 32x32", step_times)
    kernels.use_backend("compiled")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    run(ap.parse_args().repeat)


if __name__ == "__main__":
    main()
