"""Benchmark the compiled conv kernels against the pure-numpy fallback.

Times the raw im2col/col2im kernels, the conv2d op (forward and backward),
and a full ResNet-branch training step under each backend. The engine binds
the kernel functions at import, so the op-level rows swap them in place.

Run from the repository root:

    python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from fadct import engine
from fadct._kernels import BACKEND, fallback
from fadct.config import RunConfig
from fadct.engine import Tensor
from fadct.model import build_model
from fadct.rng import Rng
from fadct.training import batch_loss

try:
    from fadct._kernels import _conv_cy as compiled
except ImportError:
    compiled = None

CONV_CASES = [
    ("stem 8x3x32x32 k3", (8, 3, 32, 32), (16, 3, 3, 3), 1, 1),
    ("stage1 8x16x32x32 k3", (8, 16, 32, 32), (16, 16, 3, 3), 1, 1),
    ("stage2 8x32x16x16 k3", (8, 32, 16, 16), (32, 32, 3, 3), 1, 1),
    ("downsample 8x16x32x32 s2", (8, 16, 32, 32), (32, 16, 3, 3), 2, 1),
]


def timeit(fn, repeats: int) -> float:
    fn()  # warm up
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def bench_kernels(backend, repeats: int):
    rng = np.random.default_rng(0)
    rows = []
    for name, xs, ws, stride, pad in CONV_CASES:
        x = rng.normal(size=(xs[0], xs[1], xs[2] + 2 * pad, xs[3] + 2 * pad))
        kh, kw = ws[2], ws[3]
        cols = backend.im2col(x, kh, kw, stride)
        rows.append((f"im2col   {name}", timeit(
            lambda: backend.im2col(x, kh, kw, stride), repeats)))
        rows.append((f"col2im   {name}", timeit(
            lambda: backend.col2im(cols, x.shape, kh, kw, stride), repeats)))
    return rows


def bench_conv_op(backend, repeats: int):
    engine.im2col = backend.im2col
    engine.col2im = backend.col2im
    rng = np.random.default_rng(1)
    rows = []
    for name, xs, ws, stride, pad in CONV_CASES:
        x = Tensor(rng.normal(size=xs), requires_grad=True)
        w = Tensor(rng.normal(size=ws) * 0.1, requires_grad=True)
        b = Tensor(np.zeros(ws[0]), requires_grad=True)

        def fwd():
            return engine.conv2d(x, w, b, stride=stride, padding=pad)

        def fwd_bwd():
            x.grad = w.grad = b.grad = None
            engine.tsum(fwd()).backward()

        rows.append((f"conv fwd {name}", timeit(lambda: fwd(), repeats)))
        rows.append((f"conv f+b {name}", timeit(fwd_bwd, repeats)))
    return rows


def bench_train_step(backend, repeats: int):
    engine.im2col = backend.im2col
    engine.col2im = backend.col2im
    cfg = RunConfig(variant="dctvitres", num_classes=3, seed=0)
    model = build_model(cfg)
    rng = Rng(3)
    images = Tensor(np.clip(0.5 + 0.25 * rng.normals((8, 3, 32, 32)), 0, 1))
    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    noise = model.draw_head_noise(rng)
    params = [p for _, p in model.named_parameters()]

    def step():
        for p in params:
            p.grad = None
        batch_loss(model, images, labels, 0.1, 120.0, noise).backward()

    return [("full dctvitres step (batch 8)", timeit(step, max(1, repeats // 4)))]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    backends = {"fallback": fallback}
    if compiled is not None:
        backends["compiled"] = compiled
    print(f"active package backend: {BACKEND}; "
          f"benchmarking: {', '.join(backends)}\n")

    results = {name: dict(bench_kernels(mod, args.repeats)
                          + bench_conv_op(mod, args.repeats)
                          + bench_train_step(mod, args.repeats))
               for name, mod in backends.items()}

    labels = list(next(iter(results.values())))
    width = max(len(label) for label in labels)
    header = f"{'benchmark':<{width}}  " + "".join(f"{n:>12}" for n in results)
    if len(results) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for label in labels:
        line = f"{label:<{width}}  "
        times = [results[n][label] for n in results]
        line += "".join(f"{t * 1e3:>10.3f}ms" for t in times)
        if len(times) == 2:
            line += f"{times[0] / times[1]:>9.2f}x"
        print(line)

    # restore the import-time selection
    from fadct import _kernels
    engine.im2col = _kernels.im2col
    engine.col2im = _kernels.col2im


if __name__ == "__main__":
    main()
