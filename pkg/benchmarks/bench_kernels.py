"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on the sizes it sees in a default 64x64 training step or a
mean-shift pass; the end-to-end rows time one training step and one
mean-shift segmentation under each backend. window_scatter is timed on
random features (few pixels per window) and on clustered ones (most pixels
inside); the dispatcher in ``pseg.kernels`` sends dense windows to the BLAS
formulation in both backends.
"""

import argparse
import time

import numpy as np

from pseg import clustering, kernels, losses, network, shapes


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    x = rng.standard_normal((32, 34, 34)).astype(np.float32)
    cols = rng.standard_normal((32 * 9, 32 * 32)).astype(np.float32)
    lab = np.zeros((64, 64), np.int64)
    lab[10:40, 12:50] = 1
    lab[30:60, 5:25] = 2
    f = rng.standard_normal((4096, 16))
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    c = f[::16 * 4][:256]
    clustered = np.repeat(np.eye(16)[:4], 1024, axis=0) + 0.2 * rng.standard_normal((4096, 16))
    clustered /= np.linalg.norm(clustered, axis=1, keepdims=True)
    scene = shapes.generate(shapes.SceneConfig(), 0)
    labels = losses.erode_labels(scene.raw_labels)
    cfg = network.ModelConfig()
    feats = None

    def train_step():
        state = network.new_state(cfg)
        network.train_step(state, scene.image, labels)

    def segment():
        nonlocal feats
        if feats is None:
            feats = network.features_numpy(network.init(cfg), scene.image)
        clustering.mean_shift(feats)

    return [
        ("im2col 32x34x34 k3", lambda: kernels.im2col(x, 3, 1, 32, 32)),
        ("col2im 32x34x34 k3", lambda: kernels.col2im(cols, 32, 34, 34, 3, 1, 32, 32)),
        ("erode_valid 64x64 r2", lambda: kernels.erode_valid(lab, 2)),
        ("window_scatter sparse windows", lambda: kernels.window_scatter(f, c, 0.7071)),
        ("window_scatter dense windows", lambda: kernels.window_scatter(clustered, clustered[::64], 0.7071)),
        ("train step (64x64, d=16)", train_step),
        ("mean_shift (64x64, d=16)", segment),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5, help="runs per case; the best time is reported")
    args = ap.parse_args(argv)
    backends = ["python"]
    try:
        from pseg import _kernels  # noqa: F401

        backends.append("cython")
    except ImportError:
        print("compiled extension not built; timing the numpy fallback only")
    original = kernels.BACKEND
    rows = {}
    try:
        for b in backends:
            kernels.use_backend(b)
            for name, fn in cases(np.random.default_rng(0)):
                fn()  # warm up
                rows.setdefault(name, {})[b] = best_of(fn, args.repeat)
    finally:
        kernels.use_backend(original)
    width = max(len(n) for n in rows)
    print(f"{'case':<{width}}  " + "  ".join(f"{b:>10}" for b in backends) + ("  speedup" if len(backends) > 1 else ""))
    for name, t in rows.items():
        line = f"{name:<{width}}  " + "  ".join(f"{t[b] * 1e3:>8.2f}ms" for b in backends)
        if len(backends) > 1:
            line += f"  {t['python'] / t['cython']:>6.2f}x"
        print(line)


if __name__ == "__main__":
    main()
