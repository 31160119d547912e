"""Small convolutional encoder-decoder producing per-pixel line features, and its trainer."""

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses
from . import tensor as T

log = logging.getLogger(__name__)

FALLBACK_AXIS = 0  # unit vector e_1 used for pixels whose raw output is ~0


@dataclass
class ModelConfig:
    d: int = 16
    widths: tuple = (16, 32, 64)
    input_size: tuple = (64, 64)
    seed: int = 0
    slope: float = 0.01

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.d < 2:
            raise ValueError("d must be at least 2")
        if not self.widths:
            raise ValueError("widths must be non-empty")
        if any(s % self.stride for s in self.input_size):
            raise ValueError(f"input size {self.input_size} not divisible by {self.stride}")

    @property
    def stride(self):
        return 2 ** len(self.widths)


def _layer_shapes(cfg):
    w = cfg.widths
    shapes = {"stem": (w[0], 3, 3, 3)}
    prev = w[0]
    for i, wi in enumerate(w):
        shapes[f"enc{i}.c1"] = (wi, prev, 3, 3)
        shapes[f"enc{i}.c2"] = (wi, wi, 3, 3)
        prev = wi
    up = w[-1]
    for i in reversed(range(len(w))):
        shapes[f"dec{i}"] = (w[i], up + w[i], 3, 3)
        up = w[i]
    shapes["head.c1"] = (w[0], w[0], 3, 3)
    shapes["head.c2"] = (cfg.d, w[0], 1, 1)
    return shapes


class Model:
    def __init__(self, config, params):
        self.config = config
        self.params = params

    @property
    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def __getitem__(self, name):
        return self.params[name]


def init(config):
    """He-normal kernels (std sqrt(2 / fan_in)) and zero biases, deterministic per seed."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in _layer_shapes(config).items():
        fan_in = shape[1] * shape[2] * shape[3]
        w = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        params[f"{name}.w"] = T.Tensor(w.astype(np.float32), requires_grad=True)
        params[f"{name}.b"] = T.Tensor(np.zeros(shape[0], dtype=np.float32), requires_grad=True)
    model = Model(config, params)
    log.info("model built: %d parameters", model.parameter_count)
    return model


def _conv(model, name, x, act=True):
    k = model.params[f"{name}.w"]
    y = T.conv2d(x, k, model.params[f"{name}.b"], padding=k.shape[-1] // 2)
    return T.leaky_relu(y, model.config.slope) if act else y


@dataclass
class ForwardResult:
    raw: T.Tensor
    features: T.Tensor
    degenerate: np.ndarray


def forward_raw(model, image):
    x = image if isinstance(image, T.Tensor) else T.Tensor(np.asarray(image, dtype=np.float32))
    stride = model.config.stride
    if x.shape[0] != 3 or x.shape[1] % stride or x.shape[2] % stride:
        raise T.ShapeError(f"image shape {x.shape} incompatible with stride {stride}")
    x = _conv(model, "stem", x)
    skips = []
    for i in range(len(model.config.widths)):
        x = _conv(model, f"enc{i}.c1", x)
        x = _conv(model, f"enc{i}.c2", x)
        skips.append(x)
        x = T.avg_pool2(x)
    for i in reversed(range(len(model.config.widths))):
        h, w = skips[i].shape[1:]
        x = T.resample(x, (h, w), "bilinear")
        x = _conv(model, f"dec{i}", T.concat([x, skips[i]], axis=0))
    x = _conv(model, "head.c1", x)
    x = _conv(model, "head.c2", x, act=False)
    return T.tanh(x)


def normalize_features(raw, eps=1e-12):
    """Per-pixel unit normalization; ~zero pixels get the fallback axis and are flagged."""
    norm = T.sqrt(T.reduce_sum(T.square(raw), axis=0))
    degenerate = norm.data <= eps
    if degenerate.any():
        fix = T.Tensor(degenerate.astype(raw.dtype))
        fallback = np.zeros(raw.shape, dtype=raw.dtype)
        fallback[FALLBACK_AXIS] = degenerate
        feats = raw / (norm + fix) + T.Tensor(fallback)
    else:
        feats = raw / norm
    return feats, degenerate


def forward(model, image):
    raw = forward_raw(model, image)
    feats, degenerate = normalize_features(raw)
    return ForwardResult(raw=raw, features=feats, degenerate=degenerate)


def features_numpy(model, image):
    """Inference-only forward returning a float64 (d, h, w) feature array."""
    with T.no_grad():
        out = forward(model, image)
    return out.features.data.astype(np.float64)


# -- training ---------------------------------------------------------------


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainState:
    model: Model
    opt: T.AdamState
    step: int = 0
    epoch: int = 0
    seed: int = 0
    lr: float = 1e-4
    history: list = field(default_factory=list)
    running: dict = field(default_factory=dict)


def new_state(config, lr=1e-4, seed=None):
    model = init(config)
    return TrainState(
        model=model,
        opt=T.AdamState(model.params),
        seed=config.seed if seed is None else seed,
        lr=lr,
    )


def epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, 7919, epoch]).permutation(n)


def step_rng(seed, step):
    return np.random.default_rng([seed, 104729, step])


def train_step(state, image, labels, loss_config=None):
    """One forward/backward/Adam update; returns the :class:`LossReport`."""
    model = state.model
    out = forward(model, image)
    report = losses.total_loss(out.raw, out.features, labels, loss_config, rng=step_rng(state.seed, state.step))
    for name in losses.COMPONENTS:
        value = getattr(report, name)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss component {name} at step {state.step}")
    if not math.isfinite(report.total_value):
        raise TrainingDiverged(f"non-finite total loss at step {state.step}")
    model.zero_grad()
    if report.total.requires_grad:
        T.backward(report.total)
    grads = {name: p.grad for name, p in model.params.items()}
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name} at step {state.step}")
    T.adam_step(model.params, grads, state.opt, state.lr)
    model.zero_grad()
    state.step += 1
    return report


class LabelCache:
    """Eroded labels per dataset index (erosion is deterministic)."""

    def __init__(self, dataset):
        self.dataset = dataset
        self._cache = {}

    def __call__(self, i):
        if i not in self._cache:
            self._cache[i] = losses.erode_labels(self.dataset[i].raw_labels)
        return self._cache[i]


def train(state, dataset, epochs, loss_config=None, lr=None, on_epoch=None, progress=False):
    """Train for ``epochs`` more epochs; appends one averaged row per epoch to ``state.history``.

    Sample order per epoch and the contrastive query sampling per step are
    derived from ``(seed, epoch)`` and ``(seed, step)``, so a run resumed from a
    checkpoint continues exactly as an uninterrupted one.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if lr is not None:
        state.lr = lr
    labels_for = LabelCache(dataset)
    for _ in range(epochs):
        t0 = time.perf_counter()
        sums = dict.fromkeys(losses.COMPONENTS + ("total",), 0.0)
        degenerate = 0
        order = epoch_order(state.seed, state.epoch, len(dataset))
        for n, i in enumerate(order):
            scene = dataset[int(i)]
            report = train_step(state, scene.image, labels_for(int(i)), loss_config)
            for name in losses.COMPONENTS:
                sums[name] += getattr(report, name)
            sums["total"] += report.total_value
            degenerate += report.degenerate_projection
            if progress and n % 50 == 0:
                log.info("epoch %d sample %d/%d total %.4f", state.epoch, n, len(dataset), report.total_value)
        row = {k: v / len(dataset) for k, v in sums.items()}
        row["epoch"] = state.epoch
        row["degenerate"] = degenerate
        row["seconds"] = time.perf_counter() - t0
        state.history.append(row)
        state.running = {k: row[k] for k in losses.COMPONENTS + ("total",)}
        state.epoch += 1
        log.info("epoch %d done: total %.4f (%.1fs)", row["epoch"], row["total"], row["seconds"])
        if on_epoch is not None:
            on_epoch(state, row)
    return state
