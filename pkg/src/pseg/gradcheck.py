"""Finite-difference oracle for every differentiable op and every loss.

Checks run in float64 with central differences (step 1e-3). The error of a
check is normwise: ``max|g_analytic - g_numeric| / max(max|g_analytic|,
max|g_numeric|, 1e-8)``. Ops are probed through a fixed random projection
of their output so one backward pass covers the whole Jacobian.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import losses
from . import tensor as T

EPS = 1e-3
OP_TOL = 1e-4
LOSS_TOL = 1e-3
MAX_LOSS_COORDS = 64  # loss inputs are larger; a random subset of coordinates is differenced


@dataclass
class CheckResult:
    name: str
    kind: str  # "op" or "loss"
    worst: float
    tol: float

    @property
    def passed(self):
        return self.worst < self.tol


def rel_error(analytic, numeric):
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-8)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def check(fn, inputs, coords=None):
    """Worst error of d fn(*inputs)/d inputs; ``fn`` maps float64 Tensors to a scalar Tensor.

    ``coords`` optionally maps input index to the flat coordinates to difference.
    """
    leaves = [T.Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    T.backward(out)
    worst = 0.0
    for i, x in enumerate(inputs):
        x = np.array(x, dtype=np.float64)
        idx = range(x.size) if coords is None or i not in coords else coords[i]
        analytic, numeric = [], []
        g = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(x)
        for j in idx:
            vals = []
            for sign in (1.0, -1.0):
                xs = [np.array(v, dtype=np.float64) for v in inputs]
                xs[i].flat[j] += sign * EPS
                with T.no_grad():
                    vals.append(float(fn(*[T.Tensor(v) for v in xs]).data))
            numeric.append((vals[0] - vals[1]) / (2 * EPS))
            analytic.append(g.flat[j])
        worst = max(worst, rel_error(np.array(analytic), np.array(numeric)))
    return worst


def _probe(op):
    """Wrap a tensor-valued op as a scalar via a fixed random projection of its output."""
    cache = {}

    def fn(*xs):
        y = op(*xs)
        if "w" not in cache:
            cache["w"] = np.random.default_rng(12345).standard_normal(y.shape)
        return T.reduce_sum(y * T.Tensor(cache["w"]))

    return fn


def _away_from_zero(rng, shape, lo=0.2, hi=2.0):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _op_cases(rng):
    """(name, fn, inputs) for every registered op; every tensor has at most 64 elements."""
    a = rng.standard_normal((4, 5))
    b = rng.standard_normal((4, 5))
    v = rng.standard_normal(5)
    pos = rng.uniform(0.5, 2.0, (4, 5))
    nz = _away_from_zero(rng, (4, 5))
    img = rng.standard_normal((2, 5, 5))
    ker = rng.standard_normal((3, 2, 3, 3))
    bias = rng.standard_normal(3)
    small = rng.standard_normal((2, 4, 4))
    return [
        ("add", _probe(T.add), [a, b]),
        ("add(broadcast)", _probe(T.add), [a, v]),
        ("sub", _probe(T.sub), [a, b]),
        ("mul", _probe(T.mul), [a, b]),
        ("mul(broadcast)", _probe(T.mul), [a, v]),
        ("div", _probe(T.div), [a, nz]),
        ("scalar_mul", _probe(lambda x: T.scalar_mul(x, -1.7)), [a]),
        ("abs", _probe(T.abs), [nz]),
        ("tanh", _probe(T.tanh), [a]),
        ("square", _probe(T.square), [a]),
        ("sqrt", _probe(T.sqrt), [pos]),
        ("exp", _probe(T.exp), [a]),
        ("log", _probe(T.log), [pos]),
        ("leaky_relu", _probe(lambda x: T.leaky_relu(x, 0.01)), [nz]),
        ("reduce_sum", _probe(lambda x: T.reduce_sum(x, axis=1)), [a]),
        ("reduce_mean", _probe(lambda x: T.reduce_mean(x, axis=0)), [a]),
        ("reduce_max", _probe(lambda x: T.reduce_max(x, axis=1)), [a]),
        ("matmul", _probe(T.matmul), [a, rng.standard_normal((5, 3))]),
        ("reshape", _probe(lambda x: T.reshape(x, (2, 10))), [a]),
        ("transpose", _probe(T.transpose), [a]),
        ("getitem", _probe(lambda x: x[1:3, ::2]), [a]),
        ("take", _probe(lambda x: T.take(x, np.array([4, 0, 4, 2]), axis=1)), [a]),
        ("concat", _probe(lambda x, y: T.concat([x, y], axis=0)), [a, b]),
        ("conv2d", _probe(lambda x, k, c: T.conv2d(x, k, c, padding=1)), [img, ker, bias]),
        ("conv2d(stride2)", _probe(lambda x, k: T.conv2d(x, k, stride=2)), [img, ker]),
        ("resample_nearest", _probe(lambda x: T.resample(x, (6, 3), "nearest")), [small]),
        ("resample_bilinear", _probe(lambda x: T.resample(x, (7, 3), "bilinear")), [small]),
        ("resample_average-pool", _probe(lambda x: T.resample(x, (2, 2), "average-pool")), [small]),
    ]


def loss_fixture(rng, size=6, d=8, margin=0.05):
    """Two entities plus background on a size x size grid; every pixel valid.

    Pixels are redrawn until every |mu_r . f_i| exceeds ``margin``, and raw
    norms avoid 1, so no finite-difference step straddles an |.| kink.
    """
    lab = np.zeros((size, size), dtype=np.int64)
    lab[:, : size // 3] = 1
    lab[:, size // 3 : 2 * size // 3] = 2
    labels = losses.EntityLabels(labels=lab, valid=np.ones_like(lab, dtype=bool), K=2, original_ids=(1, 2))
    basis = np.linalg.qr(rng.standard_normal((d, d)))[0]
    centers = basis[:, lab.ravel()]
    n = size * size
    dirs = centers + 0.3 * rng.standard_normal((d, n))
    for _ in range(100):
        unit = dirs / np.linalg.norm(dirs, axis=0)
        means, bg = losses.compute_means(unit.reshape(d, size, size), labels)
        mu = np.array([m.mu for m in means] + [bg.mu])
        bad = (np.abs(mu @ unit) < margin).any(axis=0)
        if not bad.any():
            break
        dirs[:, bad] = centers[:, bad] + 0.3 * rng.standard_normal((d, int(bad.sum())))
    else:
        raise RuntimeError("could not build a kink-free loss fixture")
    norms = rng.uniform(0.5, 0.9, n) + rng.choice([0.0, 0.6], n)  # [0.5, 0.9] or [1.1, 1.5]
    raw = (unit * norms).reshape(d, size, size)
    feats = unit.reshape(d, size, size)
    return raw, feats, labels, means, bg


def _loss_cases(rng):
    raw, feats, labels, means, bg = loss_fixture(rng)
    proj = losses.projection_matrix(means)
    S = losses.segment_space(proj, T.Tensor(feats)).data
    cfg = losses.LossConfig()
    n = feats.size
    sub = {0: np.sort(rng.choice(n, MAX_LOSS_COORDS, replace=False))}

    def total(r):
        f, _ = _normalize(r)
        return losses.total_loss(r, f, labels, cfg, rng=np.random.default_rng(7), means=means, bg_mean=bg).total

    return [
        ("attraction", lambda f: losses.attraction_loss(f, labels, means), [feats], sub),
        ("repulsion", lambda f: losses.repulsion_loss(f, labels, means, bg), [feats], sub),
        ("regional_contrast", lambda f: losses.regional_contrast_loss(f, labels, means, bg, rng=np.random.default_rng(7)), [feats], sub),
        ("unit", lambda r: losses.unit_loss(r, labels), [raw], sub),
        ("segmentation", lambda s: losses.segmentation_loss(s, labels), [S], None),
        ("multiscale_gradient", lambda s: losses.multiscale_gradient_loss(s, labels), [S], None),
        ("total(end-to-end)", total, [raw], sub),
    ]


def _normalize(raw):
    from . import network

    return network.normalize_features(raw)


def run(seeds=20, base_seed=0, corrupt=None):
    """All checks over ``seeds`` seeds; returns (results keyed by name, seconds)."""
    t0 = time.perf_counter()
    T.clear_corruption()
    for op in corrupt or ():
        T.corrupt_backward(op)
    worst = {}
    try:
        for s in range(base_seed, base_seed + seeds):
            rng = np.random.default_rng([s, 31])
            for name, fn, inputs in _op_cases(rng):
                e = check(fn, inputs)
                r = worst.setdefault(name, CheckResult(name, "op", 0.0, OP_TOL))
                r.worst = max(r.worst, e)
            for name, fn, inputs, coords in _loss_cases(rng):
                e = check(fn, inputs, coords)
                r = worst.setdefault(name, CheckResult(name, "loss", 0.0, LOSS_TOL))
                r.worst = max(r.worst, e)
    finally:
        T.clear_corruption()
    return worst, time.perf_counter() - t0


def report(results):
    lines = [f"{'check':<24} {'kind':<5} {'worst rel err':>14} {'tol':>8}  status"]
    for r in results.values():
        lines.append(f"{r.name:<24} {r.kind:<5} {r.worst:>14.3e} {r.tol:>8.0e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
