"""Training objective on line features.

Features arrive as a ``(d, h, w)`` tensor of unit vectors; ground truth as an
:class:`EntityLabels` map after 5x5 erosion. Every loss only looks at valid
(non-eroded) pixels. Target lines are computed from the detached features and
enter the graph as constants unless ``straight_through`` is requested.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry, kernels
from . import tensor as T

COMPONENTS = ("la", "lr", "lrc", "lu", "ls", "lg")


@dataclass
class EntityLabels:
    labels: np.ndarray  # (h, w) int64, 0 = background, 1..K entities
    valid: np.ndarray  # (h, w) bool
    K: int
    original_ids: tuple = ()

    @property
    def shape(self):
        return self.labels.shape

    def entity_mask(self, k):
        return (self.labels == k) & self.valid

    def background_mask(self):
        return (self.labels == 0) & self.valid


def erode_labels(raw_labels, radius=2):
    """Mark pixels whose clamped (2r+1)^2 window holds one label; drop vanished entities."""
    raw = np.asarray(raw_labels, dtype=np.int64)
    valid = kernels.erode_valid(raw, radius)
    ids = [int(i) for i in np.unique(raw[valid]) if i != 0]
    lut = np.zeros(int(raw.max()) + 1 if raw.size else 1, dtype=np.int64)
    for new, old in enumerate(ids, start=1):
        lut[old] = new
    labels = lut[raw]
    # pixels of dropped entities are all invalid already; keep them out of the background too
    dropped = (raw != 0) & (labels == 0)
    valid = valid & ~dropped
    return EntityLabels(labels=labels, valid=valid, K=len(ids), original_ids=tuple(ids))


def compute_means(features, labels):
    """Target line per entity (1..K) and for the valid background, from detached features."""
    f = np.asarray(features.data if isinstance(features, T.Tensor) else features, dtype=np.float64)
    d = f.shape[0]
    flat = f.reshape(d, -1).T
    lab = labels.labels.ravel()
    val = labels.valid.ravel()
    means = []
    for k in range(1, labels.K + 1):
        sel = val & (lab == k)
        means.append(geometry.orientation_average(flat[sel], entity_id=k))
    bg = val & (lab == 0)
    bg_mean = geometry.orientation_average(flat[bg], entity_id=0) if bg.any() else None
    return means, bg_mean


def _zero(like):
    return T.Tensor(np.zeros((), dtype=like.dtype))


class _Aligned:
    """|f_i . mu_r| for valid pixels i and rows r = entities 1..K then background."""

    def __init__(self, features, labels, means, bg_mean, straight_through=False):
        d = features.shape[0]
        self.dtype = features.dtype
        self.K = labels.K
        flat_valid = np.flatnonzero(labels.valid.ravel())
        self.lab = labels.labels.ravel()[flat_valid]
        self.has_bg = bg_mean is not None and bool(np.any(self.lab == 0))
        self.F = T.take(T.reshape(features, (d, -1)), flat_valid, axis=1)
        rows = [m.mu for m in means] + ([bg_mean.mu] if self.has_bg else [])
        self.n_rows = len(rows)
        if not rows:
            self.A = None
            return
        mu = np.asarray(rows, dtype=self.dtype)
        if straight_through:
            mu_t = self._straight_through(mu)
        else:
            mu_t = T.Tensor(mu)
        self.A = T.abs(T.matmul(mu_t, self.F))
        self.counts = np.array([np.count_nonzero(self.lab == k) for k in range(1, self.K + 1)])
        self.n_bg = int(np.count_nonzero(self.lab == 0))

    def _straight_through(self, mu):
        # value of mu, gradient of the sign-aligned normalized mean
        rows = []
        for r in range(mu.shape[0]):
            k = r + 1 if r < self.K else 0
            cols = np.flatnonzero(self.lab == k)
            fk = T.take(self.F, cols, axis=1)
            signs = np.sign(mu[r] @ fk.data).astype(self.dtype)
            signs[signs == 0] = 1
            s = T.matmul(fk, T.Tensor(signs[:, None]))
            n = T.sqrt(T.reduce_sum(T.square(s)))
            m = T.reshape(s / n, (1, -1))
            rows.append(T.Tensor(mu[r : r + 1]) + (m - m.detach()))
        return T.concat(rows, axis=0)


def _weights(al, fill):
    return T.Tensor(fill.astype(al.dtype))


def _attraction(al):
    if al.K == 0:
        return _zero(al.F)
    w = np.zeros((al.n_rows, al.lab.size))
    for k in range(1, al.K + 1):
        w[k - 1, al.lab == k] = 1.0 / (al.K * al.counts[k - 1])
    # (1/K) sum_k (1/|E_k|) sum_i (1 - a) == 1 - sum(w * a)
    return T.sub(1.0, T.reduce_sum(al.A * _weights(al, w)))


def _repulsion(al):
    if al.K == 0:
        return _zero(al.F)
    w = np.zeros((al.n_rows, al.lab.size))
    for k in range(1, al.K + 1):
        cols = al.lab == k
        inv = 1.0 / al.counts[k - 1]
        for other in range(al.K):
            if other != k - 1:
                w[other, cols] = inv
        if al.has_bg:
            w[al.K, cols] = inv
    if al.has_bg:
        w[: al.K, al.lab == 0] = 1.0 / al.n_bg
    return T.scalar_mul(T.reduce_sum(al.A * _weights(al, w)), 1.0 / math.sqrt(al.K + 1))


def sample_queries(labels_flat, K, per_entity, rng):
    """Indices (into the valid-pixel list) and entity ids of contrastive queries."""
    idx, owner = [], []
    for k in range(1, K + 1):
        cols = np.flatnonzero(labels_flat == k)
        n = min(per_entity, cols.size)
        pick = rng.choice(cols, size=n, replace=False)
        idx.append(np.sort(pick))
        owner.append(np.full(n, k))
    return np.concatenate(idx), np.concatenate(owner)


def _regional_contrast(al, tau, queries, rng):
    if al.K < 2:
        return _zero(al.F)
    q, owner = sample_queries(al.lab, al.K, queries, rng)
    z = T.scalar_mul(T.take(al.A, q, axis=1), 1.0 / tau)
    shift = T.Tensor(z.data.max(axis=0))
    lse = T.log(T.reduce_sum(T.exp(z - shift), axis=0)) + shift
    onehot = np.zeros(z.shape, dtype=al.dtype)
    onehot[owner - 1, np.arange(q.size)] = 1.0
    pos = T.reduce_sum(z * T.Tensor(onehot), axis=0)
    return T.reduce_mean(lse - pos)


def attraction_loss(features, labels, means, straight_through=False):
    return _attraction(_Aligned(features, labels, means, None, straight_through))


def repulsion_loss(features, labels, means, bg_mean, straight_through=False):
    return _repulsion(_Aligned(features, labels, means, bg_mean, straight_through))


def regional_contrast_loss(features, labels, means, bg_mean=None, tau=0.5, queries_per_entity=256, rng=None):
    rng = np.random.default_rng(0) if rng is None else rng
    return _regional_contrast(_Aligned(features, labels, means, bg_mean), tau, queries_per_entity, rng)


def unit_loss(raw, labels):
    """Mean |1 - ||raw_i|| | over valid pixels of the pre-normalization output."""
    n_valid = int(labels.valid.sum())
    if n_valid == 0:
        return _zero(raw)
    norm = T.sqrt(T.reduce_sum(T.square(raw), axis=0))
    dev = T.abs(T.sub(1.0, norm))
    return T.scalar_mul(T.reduce_sum(dev * T.Tensor(labels.valid.astype(raw.dtype))), 1.0 / n_valid)


# -- segment space ----------------------------------------------------------


@dataclass
class ProjectionMatrix:
    P: np.ndarray | None
    means: list
    condition: float
    degenerate: bool = False

    @property
    def K(self):
        return len(self.means)


def gauss_jordan_inverse(a):
    """Inverse of a square matrix by Gauss-Jordan elimination with partial pivoting."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    aug = np.hstack([a, np.eye(n)])
    for col in range(n):
        piv = col + int(np.argmax(np.abs(aug[col:, col])))
        if aug[piv, col] == 0:
            raise np.linalg.LinAlgError("singular matrix")
        if piv != col:
            aug[[col, piv]] = aug[[piv, col]]
        aug[col] /= aug[col, col]
        for row in range(n):
            if row != col and aug[row, col] != 0:
                aug[row] -= aug[row, col] * aug[col]
    return aug[:, n:]


def projection_matrix(means, sigma_min=1e-3):
    """Left inverse P = (A^T A)^-1 A^T of A = [mu_1 ... mu_K]."""
    if not means:
        raise ValueError("projection_matrix needs at least one mean")
    A = np.stack([np.asarray(m.mu if isinstance(m, geometry.TargetLine) else m, dtype=np.float64) for m in means], axis=1)
    G = A.T @ A
    lam_min = float(np.linalg.eigvalsh(G)[0])
    cond = math.sqrt(max(lam_min, 0.0))
    if lam_min < sigma_min**2:
        return ProjectionMatrix(P=None, means=list(means), condition=cond, degenerate=True)
    P = gauss_jordan_inverse(G) @ A.T
    return ProjectionMatrix(P=P, means=list(means), condition=cond)


def segment_space(proj, features, signed=False):
    """S_k(i) = |(P f_i)_k| as a (K, h, w) tensor; P is a constant."""
    if proj.degenerate:
        raise ValueError("segment_space needs a well-conditioned projection")
    d, h, w = features.shape
    s = T.matmul(T.Tensor(proj.P.astype(features.dtype)), T.reshape(features, (d, h * w)))
    if not signed:
        s = T.abs(s)
    return T.reshape(s, (proj.K, h, w))


def entity_targets(labels, dtype=np.float32):
    ks = np.arange(1, labels.K + 1)[:, None, None]
    return (labels.labels[None] == ks).astype(dtype)


def segmentation_loss(S, labels):
    n_valid = int(labels.valid.sum())
    if labels.K == 0 or n_valid == 0:
        return _zero(S)
    diff = S - T.Tensor(entity_targets(labels, S.dtype))
    masked = T.square(diff) * T.Tensor(labels.valid.astype(S.dtype))
    return T.scalar_mul(T.reduce_sum(masked), 1.0 / (labels.K * n_valid))


def _and_pool(v):
    h, w = v.shape
    return v.reshape(h // 2, 2, w // 2, 2).all(axis=(1, 3))


def usable_scales(h, w, scales):
    n = 1
    while n < scales and h % 2 == 0 and w % 2 == 0 and min(h, w) >= 4:
        h, w = h // 2, w // 2
        n += 1
    return n


def multiscale_gradient_loss(S, labels, scales=4):
    """(1/K) sum_k sum_m MSE of forward differences of S_k vs the soft target."""
    if labels.K == 0:
        return _zero(S)
    K, h, w = S.shape
    n_scales = usable_scales(h, w, scales)
    target = entity_targets(labels, S.dtype)
    valid = labels.valid
    s = S
    total = None
    for m in range(n_scales):
        if m > 0:
            s = T.avg_pool2(s)
            target = T.avg_pool2(T.Tensor(target)).data
            valid = _and_pool(valid)
        hh, ww = valid.shape
        mx = (valid[:, 1:] & valid[:, :-1]).astype(S.dtype)
        my = (valid[1:, :] & valid[:-1, :]).astype(S.dtype)
        gx = s[:, :, 1:] - s[:, :, :-1]
        gy = s[:, 1:, :] - s[:, :-1, :]
        tx = target[:, :, 1:] - target[:, :, :-1]
        ty = target[:, 1:, :] - target[:, :-1, :]
        ex = T.reduce_sum(T.square(gx - T.Tensor(tx)) * T.Tensor(mx))
        ey = T.reduce_sum(T.square(gy - T.Tensor(ty)) * T.Tensor(my))
        entries = hh * (ww - 1) + (hh - 1) * ww
        term = T.scalar_mul(ex + ey, 1.0 / (K * max(entries, 1)))
        total = term if total is None else total + term
    return total


# -- total ------------------------------------------------------------------


@dataclass
class LossConfig:
    lambda_rc: float = 0.125
    lambda_g: float = 0.025
    lambda_u: float = 0.05
    tau: float = 0.5
    queries: int = 256
    scales: int = 4
    sigma_min: float = 1e-3
    disabled: frozenset = frozenset()
    signed: bool = False
    straight_through: bool = False


@dataclass
class LossReport:
    la: float = 0.0
    lr: float = 0.0
    lrc: float = 0.0
    lu: float = 0.0
    ls: float = 0.0
    lg: float = 0.0
    total: object = None
    degenerate_projection: bool = False
    parts: dict = field(default_factory=dict, repr=False)

    @property
    def total_value(self):
        return float(self.total.data) if isinstance(self.total, T.Tensor) else float(self.total)

    def row(self):
        return [self.la, self.lr, self.lrc, self.lu, self.ls, self.lg, self.total_value]


def weighted_total(values, config=None, degenerate=False):
    """L = la + lr + ls + l_rc*lrc + l_g*lg + l_u*lu on plain numbers."""
    c = config or LossConfig()
    ls = 0.0 if degenerate else values["ls"]
    lg = 0.0 if degenerate else values["lg"]
    return values["la"] + values["lr"] + ls + c.lambda_rc * values["lrc"] + c.lambda_g * lg + c.lambda_u * values["lu"]


def total_loss(raw, features, labels, config=None, rng=None, means=None, bg_mean=None):
    """Full objective; returns a :class:`LossReport` whose ``total`` is differentiable."""
    c = config or LossConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    if means is None:
        means, bg_mean = compute_means(features, labels)
    al = _Aligned(features, labels, means, bg_mean, c.straight_through)
    weights = {"la": 1.0, "lr": 1.0, "ls": 1.0, "lrc": c.lambda_rc, "lg": c.lambda_g, "lu": c.lambda_u}
    parts = {}
    if "la" not in c.disabled:
        parts["la"] = _attraction(al)
    if "lr" not in c.disabled:
        parts["lr"] = _repulsion(al)
    if "lrc" not in c.disabled:
        parts["lrc"] = _regional_contrast(al, c.tau, c.queries, rng)
    if "lu" not in c.disabled:
        parts["lu"] = unit_loss(raw, labels)
    degenerate = False
    if labels.K > 0 and not {"ls", "lg"} <= set(c.disabled):
        proj = projection_matrix(means, c.sigma_min)
        degenerate = proj.degenerate
        if not degenerate:
            S = segment_space(proj, features, c.signed)
            if "ls" not in c.disabled:
                parts["ls"] = segmentation_loss(S, labels)
            if "lg" not in c.disabled:
                parts["lg"] = multiscale_gradient_loss(S, labels, c.scales)
    total = None
    for name in COMPONENTS:
        if name in parts:
            term = parts[name] if weights[name] == 1.0 else T.scalar_mul(parts[name], weights[name])
            total = term if total is None else total + term
    if total is None:
        total = _zero(features)
    values = {name: float(parts[name].data) if name in parts else 0.0 for name in COMPONENTS}
    return LossReport(total=total, degenerate_projection=degenerate, parts=parts, **values)
