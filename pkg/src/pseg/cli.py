"""Command-line entry point: gen, train, infer, eval, ablate, gradcheck.

Exit codes: 0 success, 1 check failure, 2 usage error, 3 I/O error.
"""

import argparse
import logging
import os
import re
import sys
from dataclasses import dataclass

import numpy as np

from . import clustering, experiment, losses, network, persistence, shapes

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
_INDEX = re.compile(r"^(\d+)\.(ppm|pgm)$")


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


def _palette():
    # fixed multiplicative hash of the index; id 0 (unassigned) is black
    pal = np.zeros((256, 3), dtype=np.uint8)
    for i in range(1, 256):
        h = (i * 2654435761) & 0xFFFFFFFF
        pal[i] = [(h >> 24) & 0xFF, (h >> 16) & 0xFF, (h >> 8) & 0xFF]
    return pal


PALETTE = _palette()


def colorize(labels):
    return PALETTE[np.asarray(labels) % 256]


# -- data directories -------------------------------------------------------


@dataclass
class DiskScene:
    image: np.ndarray
    raw_labels: np.ndarray


def index_files(directory, ext):
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"{directory}: not a directory")
    out = {}
    for name in os.listdir(directory):
        m = _INDEX.match(name)
        if m and m.group(2) == ext:
            out[int(m.group(1))] = os.path.join(directory, name)
    return dict(sorted(out.items()))


class DiskDataset:
    """Scenes stored as NNNNN.ppm / NNNNN.pgm pairs."""

    def __init__(self, directory, indices=None):
        images = index_files(directory, "ppm")
        labels = index_files(directory, "pgm")
        if set(images) != set(labels):
            raise persistence.FormatError(f"{directory}: unpaired images/labels {sorted(set(images) ^ set(labels))}")
        keys = list(images) if indices is None else list(indices)
        if not keys:
            raise persistence.FormatError(f"{directory}: no scenes found")
        self.paths = [(images[k], labels[k]) for k in keys]
        self.indices = keys
        self._cache = {}

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i):
        if i not in self._cache:
            img, lab = self.paths[i]
            self._cache[i] = DiskScene(persistence.read_image(img), persistence.read_labels(lab))
        return self._cache[i]

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, positions):
        directory = os.path.dirname(self.paths[0][0])
        return DiskDataset(directory, [self.indices[p] for p in positions])


# -- commands ---------------------------------------------------------------


def _load_config(args):
    try:
        cfg = persistence.RunConfig.load(args.config) if args.config else persistence.RunConfig()
    except persistence.FormatError as exc:
        raise UsageError(f"{args.config}: {exc}") from None
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _print_config(cfg, args):
    print("# resolved configuration")
    sys.stdout.write(cfg.to_text())
    for key, value in sorted(vars(args).items()):
        if key not in ("func", "config"):
            print(f"arg.{key}={value}")
    print("#", flush=True)


def _parse_list(text, name, allowed=None):
    items = [x.strip() for x in text.split(",") if x.strip()]
    if allowed is not None:
        bad = [x for x in items if x not in allowed]
        if bad:
            raise UsageError(f"{name}: unknown entries {bad} (choose from {', '.join(allowed)})")
    return items


def cmd_gen(args):
    cfg = _load_config(args)
    _print_config(cfg, args)
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    os.makedirs(args.out, exist_ok=True)
    scene_cfg = cfg.scene_config()
    manifest = ["# index seed K"]
    for i in range(args.count):
        scene = shapes.generate(scene_cfg, i)
        persistence.write_image(os.path.join(args.out, f"{i:05d}.ppm"), scene.image)
        persistence.write_labels(os.path.join(args.out, f"{i:05d}.pgm"), scene.raw_labels)
        manifest.append(f"{i} {scene_cfg.seed} {scene.K}")
    persistence.atomic_write(os.path.join(args.out, "manifest.txt"), ("\n".join(manifest) + "\n").encode())
    print(f"wrote {args.count} scenes to {args.out}")


LOG_HEADER = "# epoch " + " ".join(losses.COMPONENTS) + " total"


def cmd_train(args):
    cfg = _load_config(args)
    if args.ablate_losses is not None:
        cfg = cfg.replace(ablate=tuple(_parse_list(args.ablate_losses, "--ablate-losses", losses.COMPONENTS)))
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    _print_config(cfg, args)
    data = DiskDataset(args.data)
    first = data[0].image.shape[1:]
    if tuple(first) != tuple(cfg.size):
        raise UsageError(f"scene size {first} does not match config size {cfg.size}")
    if args.resume:
        state = persistence.load_checkpoint(args.resume)
    else:
        state = network.new_state(cfg.model_config(), lr=cfg.lr, seed=cfg.seed)
    log_path = args.log or args.out + ".log"
    lines = [] if args.resume and os.path.exists(log_path) else [LOG_HEADER]

    def on_epoch(st, row):
        cols = [row[c] for c in losses.COMPONENTS] + [row["total"]]
        lines.append(f"{row['epoch']} " + " ".join(f"{v:.6g}" for v in cols))
        print(lines[-1], flush=True)

    network.train(state, data, cfg.epochs, cfg.loss_config(), on_epoch=on_epoch)
    persistence.save_checkpoint(state, args.out)
    mode = "a" if args.resume and os.path.exists(log_path) else "w"
    with open(log_path, mode, encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"checkpoint {args.out} (step {state.step}); loss log {log_path}")


def _infer_one(model, cfg, image_path, out_path, resolutions, bandwidth, vis):
    image = persistence.read_image(image_path)
    h, w = image.shape[1:]
    stride = model.config.stride
    if h % stride or w % stride:
        print(f"notice: {image_path} is {h}x{w}, not a multiple of the model stride {stride}; resizing", file=sys.stderr)
    if len(resolutions) == 1:
        size = clustering.scaled_size((h, w), resolutions[0], stride)
        feats = network.features_numpy(model, clustering.resize_image(image, size))
        seg = clustering.mean_shift(feats, bandwidth, cfg.seed_stride, cfg.max_iter, cfg.tol)
    else:
        seg = clustering.multires_segment(
            model, image, resolutions, cfg.theta_refine, cfg.theta_contain, cfg.min_pixels,
            bandwidth=bandwidth, seed_stride=cfg.seed_stride, max_iter=cfg.max_iter, tol=cfg.tol,
        )
    labels = seg.labels
    if labels.shape != (h, w):
        labels = clustering.resize_labels(labels, (h, w))
    stem = os.path.splitext(out_path)[0]
    persistence.write_labels(out_path, labels)
    rows = ["# segment support mean_similarity"]
    for m, mode in enumerate(seg.modes, start=1):
        rows.append(f"{m} {mode.support} {mode.mean_similarity:.6f}")
    persistence.atomic_write(stem + ".modes.txt", ("\n".join(rows) + "\n").encode())
    if vis:
        persistence.write_pnm(stem + ".vis.ppm", colorize(labels))
    return seg


def cmd_infer(args):
    cfg = _load_config(args)
    if args.bandwidth is not None:
        cfg = cfg.replace(bandwidth=args.bandwidth)
    if args.multires is not None:
        try:
            cfg = cfg.replace(resolutions=tuple(float(x) for x in _parse_list(args.multires, "--multires")))
        except ValueError:
            raise UsageError(f"--multires: expected comma-separated numbers, got {args.multires!r}") from None
    if not cfg.resolutions or any(r <= 0 for r in cfg.resolutions):
        raise UsageError("--multires needs positive resolutions")
    _print_config(cfg, args)
    state = persistence.load_checkpoint(args.ckpt)
    if os.path.isdir(args.image):
        os.makedirs(args.out, exist_ok=True)
        jobs = [(p, os.path.join(args.out, f"{k:05d}.pgm")) for k, p in index_files(args.image, "ppm").items()]
        if not jobs:
            raise persistence.FormatError(f"{args.image}: no images found")
    else:
        jobs = [(args.image, args.out)]
    for image_path, out_path in jobs:
        seg = _infer_one(state.model, cfg, image_path, out_path, cfg.resolutions, cfg.bandwidth, not args.no_vis)
        print(f"{image_path}: {seg.n_segments} segments -> {out_path}")


def read_modes(path):
    conf = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            parts = line.split()
            conf[int(parts[0])] = float(parts[2])
    return conf


def cmd_eval(args):
    from . import metrics

    cfg = _load_config(args)
    _print_config(cfg, args)
    preds = index_files(args.pred, "pgm")
    gts = index_files(args.gt, "pgm")
    if not preds:
        raise persistence.FormatError(f"{args.pred}: no predictions found")
    unpaired = sorted(set(preds) ^ set(gts))
    if unpaired:
        raise persistence.FormatError(f"unpaired files for indices {unpaired}")
    named = []
    for k in preds:
        pred = persistence.read_labels(preds[k])
        gt = persistence.read_labels(gts[k])
        if pred.shape != gt.shape:
            raise persistence.FormatError(f"index {k}: prediction {pred.shape} vs ground truth {gt.shape}")
        modes = os.path.splitext(preds[k])[0] + ".modes.txt"
        conf = read_modes(modes) if os.path.exists(modes) else None
        named.append((f"{k:05d}", metrics.evaluate(pred, gt, conf)))
    total = metrics.aggregate([s for _, s in named])
    text = metrics.format_table(named, total) + "\n" + metrics.format_records(named, total)
    persistence.atomic_write(args.out, text.encode())
    sys.stdout.write(text)


def cmd_ablate(args):
    cfg = _load_config(args)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    _print_config(cfg, args)
    data = DiskDataset(args.data)
    n_hold = args.holdout if args.holdout is not None else max(1, len(data) // 5)
    if not 0 < n_hold < len(data):
        raise UsageError(f"--holdout must be between 1 and {len(data) - 1}")
    train = data.subset(range(len(data) - n_hold))
    held = data.subset(range(len(data) - n_hold, len(data)))

    def progress(name, state, inter, intra):
        print(f"variant {name}: inter_mean={inter} intra_entity={intra}", flush=True)

    rows = experiment.ablation_study(cfg, train, held, on_variant=progress)
    text = experiment.format_ablation(rows)
    persistence.atomic_write(args.out, text.encode())
    sys.stdout.write(text)


def cmd_gradcheck(args):
    from . import gradcheck

    cfg = _load_config(args)
    _print_config(cfg, args)
    corrupt = _parse_list(args.corrupt_op, "--corrupt-op") if args.corrupt_op else None
    results, seconds = gradcheck.run(args.seeds, base_seed=cfg.seed, corrupt=corrupt)
    print(gradcheck.report(results))
    failed = [r.name for r in results.values() if not r.passed]
    print(f"{len(results)} checks over {args.seeds} seeds in {seconds:.1f}s")
    if failed:
        raise CheckFailed(f"gradient check failed: {', '.join(failed)}")


# -- parser -----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def __init__(self, *a, **kw):
        kw.setdefault("formatter_class", argparse.ArgumentDefaultsHelpFormatter)
        super().__init__(*a, **kw)


def build_parser():
    p = _Parser(prog="pseg", description="Instance segmentation with line features on the projective sphere.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", default=None, help="run configuration file (key=value lines); built-in defaults if omitted")
        sp.add_argument("--seed", type=int, default=None, help="override the configured seed")

    g = sub.add_parser("gen", help="generate procedural scenes")
    common(g)
    g.add_argument("--count", type=int, required=True, help="number of scenes")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a scene directory")
    common(t)
    t.add_argument("--data", required=True, help="directory written by 'gen'")
    t.add_argument("--epochs", type=int, default=None, help="epochs to train (default: config 'epochs')")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--ablate-losses", default=None, help="comma-separated loss components to disable, e.g. ls,lg")
    t.add_argument("--log", default=None, help="loss log path (default: OUT.log)")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="segment an image (or a directory of NNNNN.ppm images)")
    common(i)
    i.add_argument("--ckpt", required=True, help="checkpoint path")
    i.add_argument("--image", required=True, help="P6 image or directory of images")
    i.add_argument("--out", required=True, help="output label map (P5), or directory when --image is a directory")
    i.add_argument("--multires", default=None, help="comma-separated resolutions, e.g. 1.0,2.0 (default: config 'resolutions')")
    i.add_argument("--bandwidth", type=float, default=None, help="mean-shift window |cos| (default: config 'bandwidth', sqrt(2)/2)")
    i.add_argument("--no-vis", action="store_true", help="skip the color-coded visualization")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="evaluate predicted label maps against ground truth")
    common(e)
    e.add_argument("--pred", required=True, help="directory of predicted NNNNN.pgm maps")
    e.add_argument("--gt", required=True, help="directory of ground-truth NNNNN.pgm maps")
    e.add_argument("--out", required=True, help="report path")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train contrastive / +Ls / +Ls+Lg variants and compare similarities")
    common(a)
    a.add_argument("--data", required=True, help="directory written by 'gen'")
    a.add_argument("--epochs", type=int, default=None, help="epochs per variant (default: config 'epochs')")
    a.add_argument("--out", required=True, help="report path")
    a.add_argument("--holdout", type=int, default=None, help="number of trailing scenes held out (default: 20%%)")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    common(c)
    c.add_argument("--seeds", type=int, default=20, help="number of random seeds")
    c.add_argument("--corrupt-op", default=None, help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CheckFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (UsageError, shapes.UnsatisfiableConfig) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (persistence.FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
