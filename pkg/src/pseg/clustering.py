"""Mean-shift on the projective sphere and coarse-to-fine segmentation merging.

The kernel is flat: a feature is inside a center's window when
``|f . c| >= bandwidth`` (cosine of 45 degrees by default). One mean-shift
update replaces the center by the orientation average of its window.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry

log = logging.getLogger(__name__)

BANDWIDTH = math.sqrt(2.0) / 2.0


class ObjectiveDecreased(AssertionError):
    pass


@dataclass
class Mode:
    center: np.ndarray
    support: int
    mean_similarity: float


@dataclass
class Segmentation:
    labels: np.ndarray  # (h, w) int64, 1..M
    modes: list = field(default_factory=list)  # modes[m - 1] describes label m

    @property
    def resolution(self):
        return self.labels.shape

    @property
    def n_segments(self):
        return len(self.modes)

    def confidences(self):
        return {i + 1: m.mean_similarity for i, m in enumerate(self.modes)}


def canonical_relabel(labels, keep_zero=True):
    """Renumber ids 1..M in order of first appearance in raster order.

    Returns (new_labels, old_ids) where ``old_ids[m - 1]`` is the id now called ``m``.
    """
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    if keep_zero:
        keep = ids != 0
        ids, first = ids[keep], first[keep]
    order = ids[np.argsort(first, kind="stable")]
    lut = np.zeros(int(flat.max()) + 1 if flat.size else 1, dtype=np.int64)
    lut[order] = np.arange(1, order.size + 1)
    return lut[labels], order


def _union_find_groups(adj):
    n = adj.shape[0]
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    ii, jj = np.nonzero(np.triu(adj, 1))
    for i, j in zip(ii, jj):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def merge_modes(centers, weights, bandwidth=BANDWIDTH):
    """Union-find merge of centers closer than the bandwidth, repeated until stable."""
    centers = np.asarray(centers, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    while len(centers) > 1:
        adj = np.abs(centers @ centers.T) >= bandwidth
        groups = _union_find_groups(adj)
        if len(groups) == len(centers):
            break
        new_c, new_w = [], []
        for g in groups:
            if len(g) == 1:
                new_c.append(centers[g[0]])
            else:
                heaviest = g[int(np.argmax(weights[g]))]
                new_c.append(geometry.orientation_average(centers[g], weights[g]).mu if weights[g].any() else centers[heaviest])
            new_w.append(weights[g].sum())
        centers, weights = np.asarray(new_c), np.asarray(new_w)
    return centers, weights


def assign(features, centers):
    """Index of the center maximizing |f . c| per pixel, and that similarity."""
    sims = np.abs(features @ centers.T)
    best = np.argmax(sims, axis=1)
    return best, sims[np.arange(len(best)), best]


def mean_shift(features, bandwidth=BANDWIDTH, seed_stride=4, max_iter=100, tol=1e-6, debug=False):
    """Segment a (d, h, w) map of unit line features.

    Seeds sit on a regular grid every ``seed_stride`` pixels. Seeds with an
    empty window are discarded; seeds whose centers coincide exactly follow
    the same trajectory and are iterated once.
    """
    f = np.asarray(features, dtype=np.float64)
    d, h, w = f.shape
    flat = np.ascontiguousarray(f.reshape(d, -1).T)
    ys, xs = np.meshgrid(np.arange(0, h, seed_stride), np.arange(0, w, seed_stride), indexing="ij")
    centers = flat[(ys * w + xs).ravel()]
    centers = centers[np.linalg.norm(centers, axis=1) > 0]
    centers = geometry.canonical_sign(centers / np.linalg.norm(centers, axis=1, keepdims=True))
    centers, multiplicity = np.unique(centers, axis=0, return_counts=True)
    support = np.zeros(len(centers), dtype=np.int64)
    active = np.ones(len(centers), dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        scat, counts = geometry.window_scatter(flat, centers[idx], bandwidth)
        empty = counts == 0
        if empty.any():
            keep = np.ones(len(centers), dtype=bool)
            keep[idx[empty]] = False
            centers, multiplicity, support, active = centers[keep], multiplicity[keep], support[keep], active[keep]
            idx, scat, counts = np.flatnonzero(active), scat[~empty], counts[~empty]
            if idx.size == 0:
                break
        new, _ = geometry.dominant_eigvecs(scat, centers[idx])
        if debug:
            old_obj = np.einsum("bi,bij,bj->b", centers[idx], scat, centers[idx])
            new_obj = np.einsum("bi,bij,bj->b", new, scat, new)
            if np.any(new_obj < old_obj * (1 - 1e-12) - 1e-12):
                raise ObjectiveDecreased("mean-shift step decreased the window objective")
        moved = 1.0 - np.abs(np.einsum("ij,ij->i", new, centers[idx]))
        centers[idx] = new
        support[idx] = counts
        active[idx[moved < tol]] = False
        # collapse coincident centers
        uniq, first, inverse = np.unique(centers, axis=0, return_index=True, return_inverse=True)
        if len(uniq) < len(centers):
            inverse = inverse.ravel()
            multiplicity = np.bincount(inverse, weights=multiplicity).astype(np.int64)
            support, active, centers = support[first], active[first], uniq
    if len(centers) == 0:
        raise ValueError("mean-shift found no modes")
    weights = support.astype(np.float64) * multiplicity
    centers, _ = merge_modes(centers, weights, bandwidth)
    return _finalize(flat, centers, (h, w))


def _finalize(flat, centers, shape):
    best, sim = assign(flat, centers)
    labels, order = canonical_relabel(best.reshape(shape) + 1)
    modes = []
    sim = sim.reshape(shape)
    for m, old in enumerate(order, start=1):
        members = labels == m
        modes.append(Mode(center=centers[old - 1], support=int(members.sum()), mean_similarity=float(np.clip(sim[members].mean(), 0, 1))))
    return Segmentation(labels=labels, modes=modes)


def segment_stats(features, labels):
    """Modes (orientation average, support, mean |f.c|) for an arbitrary label map."""
    f = np.asarray(features, dtype=np.float64)
    d = f.shape[0]
    flat = f.reshape(d, -1).T
    lab = labels.ravel()
    modes = []
    for m in range(1, int(lab.max()) + 1):
        sel = lab == m
        if not sel.any():
            continue
        t = geometry.orientation_average(flat[sel])
        mean_sim, _ = geometry.scatter_stats(flat[sel], t)
        modes.append(Mode(center=t.mu, support=int(sel.sum()), mean_similarity=mean_sim))
    return modes


# -- multi-resolution -------------------------------------------------------


def resize_labels(labels, size):
    """Nearest-neighbour resize of an integer map."""
    h, w = labels.shape
    th, tw = size
    ry = np.minimum((np.arange(th) * h) // th, h - 1)
    rx = np.minimum((np.arange(tw) * w) // tw, w - 1)
    return labels[ry][:, rx]


def merge_segmentations(label_maps, theta_refine=0.7, theta_contain=0.8, min_pixels=16):
    """Fold label maps (coarse to fine, all on the finest grid) into one map.

    A finer cluster whose IoU with an existing segment reaches ``theta_refine``
    repaints that segment; otherwise one lying at least ``theta_contain``
    inside an existing segment is carved out as a new segment. Other clusters
    are ignored. Returns (labels, provenance) where provenance maps each final
    id to (level, source id).
    """
    cur = np.asarray(label_maps[0], dtype=np.int64).copy()
    source = {int(s): (0, int(s)) for s in np.unique(cur)}
    next_id = int(cur.max()) + 1
    for level, fine in enumerate(label_maps[1:], start=1):
        fine = np.asarray(fine, dtype=np.int64)
        snap = cur.copy()
        n_old = int(snap.max()) + 1
        old_area = np.bincount(snap.ravel(), minlength=n_old)
        refine, carve = [], []
        for c in np.unique(fine):
            cm = fine == c
            area = int(cm.sum())
            if area < min_pixels:
                continue
            inter = np.bincount(snap[cm], minlength=n_old)
            union = area + old_area - inter
            iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
            s = int(np.argmax(iou))
            if iou[s] >= theta_refine:
                refine.append((cm, s, int(c)))
                continue
            s = int(np.argmax(inter))
            if inter[s] / area >= theta_contain:
                carve.append((cm, int(c)))
        for cm, s, c in refine:
            cur[cm] = s
            source[s] = (level, c)
        for cm, c in carve:
            cur[cm] = next_id
            source[next_id] = (level, c)
            next_id += 1
    labels, order = canonical_relabel(cur, keep_zero=False)
    provenance = {m: source[int(old)] for m, old in enumerate(order, start=1)}
    return labels, provenance


def scaled_size(size, factor, stride):
    h, w = size
    th = max(stride, int(round(h * factor / stride)) * stride)
    tw = max(stride, int(round(w * factor / stride)) * stride)
    return th, tw


def resize_image(image, size):
    from . import tensor as T

    if image.shape[1:] == tuple(size):
        return np.asarray(image, dtype=np.float32)
    with T.no_grad():
        return T.resample(T.Tensor(np.asarray(image, dtype=np.float32)), size, "bilinear").data


def multires_segment(model, image, resolutions=(1.0, 2.0), theta_refine=0.7, theta_contain=0.8, min_pixels=16, **shift_kwargs):
    """Mean-shift at every resolution, merged coarse to fine on the finest grid."""
    from . import network

    resolutions = sorted(float(r) for r in resolutions)
    stride = model.config.stride
    h, w = image.shape[1:]
    segs, feats = [], []
    for r in resolutions:
        size = scaled_size((h, w), r, stride)
        if size != (round(h * r), round(w * r)):
            log.info("resolution %.3g: resized to %dx%d to fit model stride %d", r, size[0], size[1], stride)
        f = network.features_numpy(model, resize_image(image, size))
        segs.append(mean_shift(f, **shift_kwargs))
        feats.append(f)
    if len(segs) == 1:
        return segs[0]
    fine_size = segs[-1].labels.shape
    maps = [resize_labels(s.labels, fine_size) for s in segs]
    labels, provenance = merge_segmentations(maps, theta_refine, theta_contain, min_pixels)
    fine_flat = feats[-1].reshape(feats[-1].shape[0], -1).T
    modes = []
    for m in range(1, int(labels.max()) + 1):
        level, src = provenance[m]
        center = segs[level].modes[src - 1].center
        members = (labels == m).ravel()
        sim = np.abs(fine_flat[members] @ center)
        modes.append(Mode(center=center, support=int(members.sum()), mean_similarity=float(np.clip(sim.mean(), 0, 1))))
    return Segmentation(labels=labels, modes=modes)
