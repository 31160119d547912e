"""Class-agnostic segmentation metrics.

Ground truth is an integer map with 0 for unannotated background; every
non-zero id is one entity. Predictions are integer maps whose non-zero ids
are segments. Background is never an entity to be recalled.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from . import geometry

AP_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))


def mask_iou(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def boundary_radius(shape, dilation_frac=0.02):
    h, w = shape
    return max(1, int(round(dilation_frac * math.hypot(h, w))))


def boundary_band(mask, radius):
    """Mask pixels within L-inf distance ``radius`` of the outside of the hole-filled mask.

    The image border counts as outside.
    """
    m = np.asarray(mask, dtype=bool)
    filled = ndimage.binary_fill_holes(m)
    size = 2 * radius + 1
    padded = np.pad(filled, radius, constant_values=False)
    interior = sliding_window_view(padded, (size, size)).all(axis=(2, 3))
    return m & ~interior


def boundary_iou(a, b, dilation_frac=0.02, radius=None):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    r = boundary_radius(a.shape, dilation_frac) if radius is None else int(radius)
    return mask_iou(boundary_band(a, r), boundary_band(b, r))


def _as_map(x):
    if hasattr(x, "labels"):
        x = x.labels
    return np.asarray(x, dtype=np.int64)


def iou_matrix(pred, gt):
    """IoU between every GT entity (rows) and prediction segment (columns).

    Returns (ious, gt_ids, pred_ids).
    """
    pred, gt = _as_map(pred), _as_map(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"label map shapes differ: {pred.shape} vs {gt.shape}")
    gt_ids = np.unique(gt[gt != 0])
    pred_ids = np.unique(pred[pred != 0])
    if gt_ids.size == 0 or pred_ids.size == 0:
        return np.zeros((gt_ids.size, pred_ids.size)), gt_ids, pred_ids
    gi = np.searchsorted(gt_ids, gt.ravel())
    pi = np.searchsorted(pred_ids, pred.ravel())
    in_g = gt.ravel() != 0
    in_p = pred.ravel() != 0
    both = in_g & in_p
    inter = np.zeros((gt_ids.size, pred_ids.size))
    np.add.at(inter, (gi[both], pi[both]), 1)
    g_area = np.bincount(gi[in_g], minlength=gt_ids.size)
    p_area = np.bincount(pi[in_p], minlength=pred_ids.size)
    union = g_area[:, None] + p_area[None, :] - inter
    return inter / np.maximum(union, 1), gt_ids, pred_ids


@dataclass
class EntityMatch:
    gt_id: int
    matched: bool
    best_iou: float
    pred_id: int


@dataclass
class MatchReport:
    entities: list = field(default_factory=list)
    recall: float = 0.0

    @property
    def n_matched(self):
        return sum(e.matched for e in self.entities)


def recall_at(pred, gt, thr=0.5):
    """A GT entity counts as recalled when some segment has IoU > ``thr`` with it."""
    ious, gt_ids, pred_ids = iou_matrix(pred, gt)
    entities = []
    for r, g in enumerate(gt_ids):
        if pred_ids.size:
            c = int(np.argmax(ious[r]))
            best, pid = float(ious[r, c]), int(pred_ids[c])
        else:
            best, pid = 0.0, 0
        entities.append(EntityMatch(int(g), best > thr, best, pid))
    recall = sum(e.matched for e in entities) / len(entities) if entities else 0.0
    return MatchReport(entities=entities, recall=recall)


def _all_point_ap(tp, n_gt):
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    rec = ctp / n_gt
    prec = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(pred, confidences, gt, thresholds=AP_THRESHOLDS):
    """(AP50, AP75, mean AP over ``thresholds``) with greedy confidence-ordered matching.

    ``confidences`` maps segment id to score. A prediction matches the
    unmatched GT entity with the highest IoU, if that IoU is >= the threshold.
    Returns None when the GT has no entities.
    """
    ious, gt_ids, pred_ids = iou_matrix(pred, gt)
    if gt_ids.size == 0:
        return None
    conf = np.array([float(confidences.get(int(p), 0.0)) for p in pred_ids])
    order = np.argsort(-conf, kind="stable")
    per_thr = {}
    for thr in thresholds:
        taken = np.zeros(gt_ids.size, dtype=bool)
        tp = np.zeros(order.size)
        for n, c in enumerate(order):
            cand = np.where(taken, -1.0, ious[:, c])
            g = int(np.argmax(cand)) if cand.size else -1
            if g >= 0 and cand[g] >= thr:
                taken[g] = True
                tp[n] = 1.0
        per_thr[round(float(thr), 2)] = _all_point_ap(tp, gt_ids.size)
    return per_thr.get(0.5, float("nan")), per_thr.get(0.75, float("nan")), float(np.mean(list(per_thr.values())))


def ablation_similarities(features, gt):
    """(inter_mean, intra_entity) for a (d, h, w) feature map and eroded GT labels.

    inter_mean is None when fewer than two entities are present.
    """
    f = np.asarray(features, dtype=np.float64)
    d = f.shape[0]
    flat = f.reshape(d, -1).T
    lab = gt.labels.ravel()
    val = gt.valid.ravel()
    mus, sims = [], []
    for k in range(1, gt.K + 1):
        sel = val & (lab == k)
        if not sel.any():
            continue
        mu = geometry.orientation_average(flat[sel]).mu
        mus.append(mu)
        sims.append(np.abs(flat[sel] @ mu))
    if not mus:
        return None, None
    intra = float(np.clip(np.concatenate(sims).mean(), 0, 1))
    if len(mus) < 2:
        return None, intra
    m = np.asarray(mus)
    g = np.abs(m @ m.T)
    iu = np.triu_indices(len(mus), 1)
    return float(np.clip(g[iu].mean(), 0, 1)), intra


# -- summaries --------------------------------------------------------------

SUMMARY_KEYS = ("recall", "mean_iou", "mean_boundary_iou", "ap50", "ap75", "map", "inter_mean", "intra_entity")


@dataclass
class EvalSummary:
    recall: float | None = None
    mean_iou: float | None = None
    mean_boundary_iou: float | None = None
    ap50: float | None = None
    ap75: float | None = None
    map: float | None = None
    inter_mean: float | None = None
    intra_entity: float | None = None

    def as_dict(self):
        return asdict(self)


def evaluate(pred, gt, confidences=None, features=None, eroded=None, thr=0.5):
    """Per-image :class:`EvalSummary`; similarity metrics need ``features`` and ``eroded`` labels."""
    pred, gt = _as_map(pred), _as_map(gt)
    report = recall_at(pred, gt, thr)
    s = EvalSummary()
    if report.entities:
        s.recall = report.recall
        matched = [e for e in report.entities if e.matched]
        if matched:
            s.mean_iou = float(np.mean([e.best_iou for e in matched]))
            s.mean_boundary_iou = float(np.mean([boundary_iou(gt == e.gt_id, pred == e.pred_id) for e in matched]))
        if confidences is None:
            confidences = {int(p): 1.0 for p in np.unique(pred[pred != 0])}
        ap = average_precision(pred, confidences, gt)
        if ap is not None:
            s.ap50, s.ap75, s.map = ap
    if features is not None and eroded is not None:
        s.inter_mean, s.intra_entity = ablation_similarities(features, eroded)
    return s


def aggregate(summaries):
    """Mean of each field over the images where it is defined."""
    out = EvalSummary()
    for key in SUMMARY_KEYS:
        vals = [getattr(s, key) for s in summaries if getattr(s, key) is not None]
        setattr(out, key, float(np.mean(vals)) if vals else None)
    return out


def _fmt(v):
    return "-" if v is None else f"{v:.4f}"


def format_records(named_summaries, total):
    """key=value lines: one per image, then one aggregate line."""
    lines = []
    for name, s in named_summaries:
        lines.append(" ".join([f"image={name}"] + [f"{k}={_fmt(getattr(s, k))}" for k in SUMMARY_KEYS]))
    lines.append(" ".join(["image=ALL"] + [f"{k}={_fmt(getattr(total, k))}" for k in SUMMARY_KEYS]))
    return "\n".join(lines) + "\n"


def format_table(named_summaries, total):
    header = ["image"] + list(SUMMARY_KEYS)
    rows = [[str(name)] + [_fmt(getattr(s, k)) for k in SUMMARY_KEYS] for name, s in named_summaries]
    rows.append(["ALL"] + [_fmt(getattr(total, k)) for k in SUMMARY_KEYS])
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    fmt = "  ".join("{:<%d}" % w for w in widths)
    out = [fmt.format(*header), fmt.format(*["-" * w for w in widths])]
    out += [fmt.format(*r) for r in rows]
    return "\n".join(out) + "\n"
