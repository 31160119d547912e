"""Training/evaluation drivers shared by the CLI and the acceptance suite."""

from dataclasses import dataclass

import numpy as np

from . import clustering, losses, metrics, network

# (name, disabled loss components), in report order
ABLATION_VARIANTS = (
    ("contrastive", frozenset({"ls", "lg"})),
    ("+Ls", frozenset({"lg"})),
    ("+Ls+Lg", frozenset()),
)


@dataclass
class SceneResult:
    segmentation: clustering.Segmentation
    summary: metrics.EvalSummary


def evaluate_scene(model, scene, resolutions=(1.0,), bandwidth=clustering.BANDWIDTH, **kwargs):
    feats = network.features_numpy(model, scene.image)
    if len(resolutions) == 1 and float(resolutions[0]) == 1.0:
        seg = clustering.mean_shift(feats, bandwidth)
    else:
        seg = clustering.multires_segment(model, scene.image, resolutions, bandwidth=bandwidth, **kwargs)
    pred = seg.labels
    if pred.shape != scene.raw_labels.shape:
        pred = clustering.resize_labels(pred, scene.raw_labels.shape)
    eroded = losses.erode_labels(scene.raw_labels)
    summary = metrics.evaluate(pred, scene.raw_labels, seg.confidences(), feats, eroded)
    return SceneResult(segmentation=seg, summary=summary)


def evaluate_model(model, scenes, **kwargs):
    """Aggregate :class:`EvalSummary` over ``scenes`` and the per-scene list."""
    per = [evaluate_scene(model, s, **kwargs).summary for s in scenes]
    return metrics.aggregate(per), per


def similarity_summary(model, scenes):
    """(inter_mean, intra_entity) averaged over the scenes where each is defined."""
    inter, intra = [], []
    for s in scenes:
        a, b = metrics.ablation_similarities(network.features_numpy(model, s.image), losses.erode_labels(s.raw_labels))
        if a is not None:
            inter.append(a)
        if b is not None:
            intra.append(b)
    return (float(np.mean(inter)) if inter else None, float(np.mean(intra)) if intra else None)


def train_model(run_config, train_scenes, epochs=None, disabled=None, on_epoch=None):
    state = network.new_state(run_config.model_config(), lr=run_config.lr, seed=run_config.seed)
    network.train(state, train_scenes, run_config.epochs if epochs is None else epochs, run_config.loss_config(disabled), on_epoch=on_epoch)
    return state


def ablation_study(run_config, train_scenes, heldout_scenes, epochs=None, on_variant=None):
    """Train each variant from the same seed; rows of (name, inter_mean, intra_entity)."""
    rows = []
    for name, disabled in ABLATION_VARIANTS:
        state = train_model(run_config, train_scenes, epochs, disabled)
        inter, intra = similarity_summary(state.model, heldout_scenes)
        rows.append((name, inter, intra))
        if on_variant is not None:
            on_variant(name, state, inter, intra)
    return rows


def format_ablation(rows):
    out = [f"{'variant':<14} {'inter_mean':>10} {'intra_entity':>12}"]
    for name, inter, intra in rows:
        f = lambda v: "-" if v is None else f"{v:.4f}"  # noqa: E731
        out.append(f"{name:<14} {f(inter):>10} {f(intra):>12}")
    return "\n".join(out) + "\n"
