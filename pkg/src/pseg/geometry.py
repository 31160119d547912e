"""Lines through the origin: normalization, distance, and orientation averaging.

A feature ``f`` and its antipode ``-f`` denote the same element, so every
function here depends on features only through ``|f . g|`` or ``f f^T``.
All accumulation is done in float64.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels

MAX_ITER = 200
CONVERGED = 1e-10
TIE_TOL = 1e-9
# The iteration runs on (M / tr M)^(2^SQUARINGS): same eigenvectors, gap ratio raised to 2^SQUARINGS.
SQUARINGS = 8


class DegenerateFeature(ValueError):
    """Raised when a vector is too short to define a line."""


@dataclass
class TargetLine:
    mu: np.ndarray
    entity_id: int = 0
    support: int = 1
    eigenvalue: float = 0.0
    tie: bool = False
    meta: dict = field(default_factory=dict)


def normalize(v, eps=1e-12):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n <= eps:
        raise DegenerateFeature(f"vector norm {n:.3g} too small to normalize")
    return v / n


def line_distance(f1, f2):
    """1 - |f1 . f2|, clipped to [0, 1]."""
    return float(min(1.0, max(0.0, 1.0 - abs(float(np.dot(f1, f2))))))


def _line_dist_rows(a, b):
    return 1.0 - np.abs(np.einsum("ij,ij->i", a, b))


def _powered(m):
    scale = np.trace(m, axis1=-2, axis2=-1)
    scale = np.where(scale > 0, scale, 1.0)
    b = m / scale[..., None, None]
    for _ in range(SQUARINGS):
        b = b @ b
        # renormalize so repeated squaring cannot underflow
        s = np.abs(b).max(axis=(-2, -1), keepdims=True)
        b = b / np.where(s > 0, s, 1.0)
    return b


def dominant_eigvecs(m, init, max_iter=MAX_ITER, tol=CONVERGED):
    """Batched power iteration for the top eigenvector of symmetric PSD matrices.

    ``m`` is (b, d, d), ``init`` is (b, d). Returns (vectors, converged mask).
    """
    b = _powered(np.asarray(m, dtype=np.float64))
    v = np.array(init, dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    converged = np.zeros(len(v), dtype=bool)
    for _ in range(max_iter):
        active = ~converged
        if not active.any():
            break
        w = np.einsum("bij,bj->bi", b[active], v[active])
        n = np.linalg.norm(w, axis=1)
        ok = n > 0
        w[ok] /= n[ok, None]
        w[~ok] = v[active][~ok]
        done = _line_dist_rows(w, v[active]) < tol
        v[active] = w
        idx = np.flatnonzero(active)
        converged[idx[done]] = True
    return canonical_sign(v), converged


def canonical_sign(v):
    """Pick the representative of each row's line whose largest-magnitude entry is positive."""
    v = np.array(v, dtype=np.float64)
    pivot = np.abs(v).argmax(axis=1)
    sign = np.sign(v[np.arange(len(v)), pivot])
    v *= np.where(sign == 0, 1.0, sign)[:, None]
    return v


def scatter_matrix(features, weights=None):
    f = np.asarray(features, dtype=np.float64)
    if weights is None:
        return f.T @ f
    return (f * np.asarray(weights, dtype=np.float64)[:, None]).T @ f


def orientation_average(features, weights=None, entity_id=0):
    """Dominant eigenvector of sum_i w_i f_i f_i^T as a :class:`TargetLine`.

    Initialized at the input feature with the largest ``|M f|``. The result is
    flagged ``tie`` when the top two eigenvalues are within ``TIE_TOL`` (relative
    to the trace) or the iteration fails to converge.
    """
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if f.shape[0] == 0:
        raise ValueError("orientation_average needs at least one feature")
    m = scatter_matrix(f, weights)
    mf = f @ m
    init = f[np.argmax(np.einsum("ij,ij->i", mf, mf))]
    if not np.any(init):
        raise DegenerateFeature("all features are zero")
    v, conv = dominant_eigvecs(m[None], init[None])
    mu = v[0]
    lam1 = float(mu @ m @ mu)
    tie = not bool(conv[0])
    scale = max(float(np.trace(m)), 1e-300)
    deflated = m - lam1 * np.outer(mu, mu)
    if f.shape[1] > 1 and lam1 > 0:
        # second eigenvalue by the same iteration on the deflated matrix
        start = np.eye(f.shape[1])[np.argmin(np.abs(mu))]
        start = start - (start @ mu) * mu
        if np.linalg.norm(start) > 0:
            v2, _ = dominant_eigvecs(deflated[None], start[None])
            lam2 = float(v2[0] @ m @ v2[0])
            if (lam1 - lam2) / scale < TIE_TOL:
                tie = True
    n = f.shape[0] if weights is None else int(np.count_nonzero(weights))
    return TargetLine(mu=mu, entity_id=entity_id, support=max(n, 1), eigenvalue=lam1, tie=tie)


def orientation_average_batch(scatters, init):
    """Dominant eigenvectors for a stack of scatter matrices, warm-started at ``init``."""
    v, _ = dominant_eigvecs(scatters, init)
    return v


def scatter_stats(features, target):
    """(mean |f . mu|, min |f . mu|) over a non-empty feature set."""
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if f.shape[0] == 0:
        raise ValueError("scatter_stats needs at least one feature")
    mu = target.mu if isinstance(target, TargetLine) else np.asarray(target, dtype=np.float64)
    sims = np.clip(np.abs(f @ mu), 0.0, 1.0)
    return float(sims.mean()), float(sims.min())


def window_scatter(features, centers, threshold):
    """Scatter matrices over features within ``threshold`` cosine of each center."""
    return kernels.window_scatter(features, centers, threshold)
