"""Command-line entry point.

Every subcommand accepts ``--seed`` and ``--config FILE``; the config is a JSON
object whose keys mirror the long flags (``n_train`` or ``n-train``). Explicit
flags override config values. Exit codes: 0 ok, 1 usage, 2 data, 3 numeric.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .ablation import run_ablation
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DataError,
    SynthConfig,
    load_image,
    load_labels,
    load_manifest,
    load_prob,
    manifest_stats,
    save_image,
    save_labels,
    save_mask,
    save_prob,
    synth_dataset,
)
from .masks import FLIP_MODES, Sample, erode_instances, flip_augment, instance_boundaries, tile
from .metrics import AlignmentError, MetricsReport, pixel_counts, score_image
from .predict import extract_instances, predict
from .model import build_model, joint_loss, multitask_forward, toy_config
from .tensor import NumericError, Tensor, grad_check
from .train import TrainConfig, train_from_manifest
from .viz import save_colorized, save_loss_curve

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("vinseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# commands


def cmd_synth(a) -> int:
    cfg = SynthConfig(a.size, a.size, a.count, a.touching_pairs, a.close_pairs, a.close_gap, not a.no_shadow)
    path = synth_dataset(a.out, a.n_train, a.n_test, cfg, seed=a.seed, n_val=a.n_val)
    print(path)
    return EXIT_OK


def cmd_stats(a) -> int:
    print(json.dumps(manifest_stats(load_manifest(a.manifest))["splits"], indent=2, sort_keys=True))
    return EXIT_OK


def _load_sample(a) -> Sample:
    return Sample(load_image(a.image), load_labels(a.labels))


def cmd_tile(a) -> int:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(a.image).stem
    tiles = tile(_load_sample(a), a.size, a.stride or a.size)
    for (y, x), t in tiles:
        save_image(out / f"{stem}_{y}_{x}.png", t.image)
        save_labels(out / f"{stem}_{y}_{x}_labels.png", t.labels)
    print(f"{len(tiles)} tiles")
    return EXIT_OK


def cmd_augment(a) -> int:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(a.image).stem
    sample = _load_sample(a)
    for mode in (FLIP_MODES if a.mode == "all" else (a.mode,)):
        f = flip_augment(sample, mode)
        save_image(out / f"{stem}_{mode}.png", f.image)
        save_labels(out / f"{stem}_{mode}_labels.png", f.labels)
    return EXIT_OK


def cmd_boundaries(a) -> int:
    save_mask(a.out, instance_boundaries(load_labels(a.labels), a.dilate))
    return EXIT_OK


def cmd_erode(a) -> int:
    eroded, ignore = erode_instances(load_labels(a.labels), a.radius)
    save_labels(a.out, eroded)
    if a.ignore_out:
        save_mask(a.ignore_out, ignore)
    return EXIT_OK


def cmd_train(a) -> int:
    manifest = load_manifest(a.manifest)
    cfg = TrainConfig(a.batch_size, a.epochs, a.patience, a.lam, a.optimizer, a.lr, seed=a.seed,
                      augment=not a.no_augment, boundary_dilate=a.boundary_dilate)
    mcfg = toy_config(a.branches, a.seed, a.lam)
    result = train_from_manifest(manifest, mcfg, cfg, log_path=a.log,
                                 on_epoch=lambda e: print(json.dumps(e), flush=True) if a.verbose else None)
    save_checkpoint(a.out, result.checkpoint)
    if a.plot:
        save_loss_curve(a.plot, result.log)
    return EXIT_OK


def cmd_predict(a) -> int:
    ckpt = load_checkpoint(a.checkpoint)
    seg, bnd = predict(ckpt.model, load_image(a.image), a.patch, a.overlap)
    save_prob(a.out, seg)
    if a.boundary_out:
        if bnd is None:
            raise UsageError("--boundary-out needs a 2-branch checkpoint")
        save_prob(a.boundary_out, bnd)
    return EXIT_OK


def cmd_instances(a) -> int:
    bnd = load_prob(a.boundary) if a.boundary else None
    labels = extract_instances(load_prob(a.prob), a.threshold, a.connectivity, bnd, a.subtract_boundary)
    save_labels(a.out, labels)
    if a.color_out:
        save_colorized(a.color_out, labels)
    print(f"{int(labels.max())} instances")
    return EXIT_OK


def _write_report(doc: dict, out) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_eval_pixel(a) -> int:
    pred, gt = load_labels(a.pred, relabel=False), load_labels(a.gt, relabel=False)
    counts = pixel_counts(pred, gt)
    doc = {"pixel_oa": counts.oa, "pixel_f1": counts.f1}
    if a.erode > 0:
        _, ignore = erode_instances(load_labels(a.gt), a.erode)
        eroded = pixel_counts(pred, gt, ignore)
        doc.update(pixel_oa_eroded=eroded.oa, pixel_f1_eroded=eroded.f1)
    _write_report(doc, a.out)
    return EXIT_OK


def cmd_eval_instance(a) -> int:
    preds, gts = a.pred.split(","), a.gt.split(",")
    if len(preds) != len(gts):
        raise UsageError("--pred and --gt need the same number of comma-separated files")
    report = MetricsReport()
    for p, g in zip(preds, gts):
        report.add(score_image(Path(p).stem, load_labels(p), load_labels(g), a.erode if a.erode > 0 else None))
    _write_report(report.to_dict(), a.out)
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    if a.model != "toy":
        raise UsageError(f"unknown model {a.model!r}; only 'toy' is available")
    model = build_model(toy_config(2, a.seed, a.lam))
    rng = np.random.default_rng(a.seed)
    x = Tensor(rng.standard_normal((1, 3, a.size, a.size)))
    y = (rng.random((1, 1, a.size, a.size)) > 0.5).astype(np.float64)
    b = (rng.random((1, 1, a.size, a.size)) > 0.8).astype(np.float64)

    def loss():
        seg, bnd = multitask_forward(model, x)
        return joint_loss(seg, bnd, y, b, a.lam)

    err = max(grad_check(loss, [p], eps=a.eps, max_coords=a.coords, seed=a.seed + i)
              for i, p in enumerate(model.params.values()))
    print(f"max relative error {err:.3e} over {len(model.params)} parameter tensors")
    return EXIT_OK if err < 1e-3 else EXIT_NUMERIC


def cmd_ablate(a) -> int:
    cfg = TrainConfig(a.batch_size, a.epochs, a.patience, None, a.optimizer, a.lr, seed=a.seed,
                      augment=not a.no_augment, boundary_dilate=a.boundary_dilate)
    report = run_ablation(load_manifest(a.manifest), a.out, cfg, lam=a.lam,
                          threshold=a.threshold, connectivity=a.connectivity)
    for name, m in report["models"].items():
        agg = m["aggregate"]
        print(f"{name:9s} pixel F1 {agg['pixel_f1']:.4f}  instance F1 {agg['instance_f1']:.4f}  "
              f"instance Dice {agg['instance_dice']:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _train_flags(p) -> None:
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--lam", type=float, default=0.1, help="boundary loss weight (default 0.1)")
    p.add_argument("--epochs", type=int, default=50, help="maximum epochs (default 50)")
    p.add_argument("--patience", type=int, default=5, help="early-stopping patience in epochs (default 5)")
    p.add_argument("--batch-size", type=int, default=8, help="mini-batch size (default 8)")
    p.add_argument("--optimizer", choices=["nadam", "adam", "sgd"], default="nadam", help="optimizer (default nadam)")
    p.add_argument("--lr", type=float, default=2e-4, help="learning rate (default 2e-4)")
    p.add_argument("--no-augment", action="store_true", help="disable random flips")
    p.add_argument("--boundary-dilate", type=int, default=0, help="Chebyshev dilation of boundary targets")


def _extract_flags(p) -> None:
    p.add_argument("--threshold", type=float, default=0.5, help="foreground threshold, >= is foreground (default 0.5)")
    p.add_argument("--connectivity", type=int, choices=[4, 8], default=4, help="component connectivity (default 4)")


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="vinseg", description=__doc__.splitlines()[0])
    root.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = root.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        p.add_argument("--config", help="JSON file whose keys mirror the long flags")
        p.set_defaults(func=fn)
        return p

    p = command("synth", cmd_synth, "generate a synthetic parking-lot dataset and its manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-train", type=int, default=200, help="training images (default 200)")
    p.add_argument("--n-val", type=int, default=0, help="validation images (default 0: carve from train)")
    p.add_argument("--n-test", type=int, default=50, help="test images (default 50)")
    p.add_argument("--size", type=int, default=128, help="image side in pixels (default 128)")
    p.add_argument("--count", type=int, default=12, help="objects per image (default 12)")
    p.add_argument("--touching-pairs", type=int, default=4, help="edge-sharing pairs per image (default 4)")
    p.add_argument("--close-pairs", type=int, default=0, help="pairs separated by a narrow gap (default 0)")
    p.add_argument("--close-gap", type=int, default=2, help="gap width for close pairs (default 2)")
    p.add_argument("--no-shadow", action="store_true", help="omit shadow bands")

    p = command("stats", cmd_stats, "per-split instance and pixel counts of a manifest")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")

    for name, fn, text in (("tile", cmd_tile, "cut an image and its instance map into patches"),
                           ("augment", cmd_augment, "flip an image and its instance map")):
        p = command(name, fn, text)
        p.add_argument("--image", required=True, help="RGB image")
        p.add_argument("--labels", required=True, help="16-bit instance map")
        p.add_argument("--out", required=True, help="output directory")
        if name == "tile":
            p.add_argument("--size", type=int, default=256, help="patch side (default 256)")
            p.add_argument("--stride", type=int, default=None, help="grid stride (default: patch side)")
        else:
            p.add_argument("--mode", choices=list(FLIP_MODES) + ["all"], default="all", help="flip mode (default all)")

    p = command("boundaries", cmd_boundaries, "derive the semantic boundary mask of an instance map")
    p.add_argument("--labels", required=True, help="16-bit instance map")
    p.add_argument("--out", required=True, help="output 0/255 mask PNG")
    p.add_argument("--dilate", type=int, default=0, help="Chebyshev dilation radius (default 0)")

    p = command("erode", cmd_erode, "erode instances by a disk and emit the ignore band")
    p.add_argument("--labels", required=True, help="16-bit instance map")
    p.add_argument("--out", required=True, help="output eroded instance map")
    p.add_argument("--ignore-out", help="optional output ignore mask")
    p.add_argument("--radius", type=int, default=3, help="disk radius (default 3)")

    p = command("train", cmd_train, "train a ResFCN (1 branch) or B-ResFCN (2 branches)")
    _train_flags(p)
    p.add_argument("--branches", type=int, choices=[1, 2], default=2, help="1 = ResFCN, 2 = B-ResFCN (default 2)")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--log", help="JSON-lines training log")
    p.add_argument("--plot", help="SVG loss curve")
    p.add_argument("--verbose", action="store_true", help="print each epoch's log entry")

    p = command("predict", cmd_predict, "sliding-window probability maps for one image")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--image", required=True, help="RGB image")
    p.add_argument("--out", required=True, help="output segmentation probabilities (.npy)")
    p.add_argument("--boundary-out", help="output boundary probabilities (.npy, 2-branch only)")
    p.add_argument("--patch", type=int, default=256, help="window side, multiple of 32 (default 256)")
    p.add_argument("--overlap", type=int, default=32, help="window overlap in pixels (default 32)")

    p = command("instances", cmd_instances, "threshold a probability map into labelled instances")
    p.add_argument("--prob", required=True, help="segmentation probabilities (.npy)")
    p.add_argument("--out", required=True, help="output 16-bit instance map")
    p.add_argument("--color-out", help="output colorized PNG")
    p.add_argument("--boundary", help="boundary probabilities (.npy), used with --subtract-boundary")
    p.add_argument("--subtract-boundary", action="store_true", help="remove predicted boundary pixels first (off by default)")
    _extract_flags(p)

    p = command("eval-pixel", cmd_eval_pixel, "pixel OA and F1, plain and on eroded ground truth")
    p.add_argument("--pred", required=True, help="predicted mask or instance map")
    p.add_argument("--gt", required=True, help="ground-truth instance map")
    p.add_argument("--erode", type=int, default=3, help="erosion radius for the eroded scores, 0 disables (default 3)")
    p.add_argument("--out", help="report JSON (default stdout)")

    p = command("eval-instance", cmd_eval_instance, "instance P/R/F1 and instance-level Dice")
    p.add_argument("--pred", required=True, help="predicted instance map(s), comma-separated")
    p.add_argument("--gt", required=True, help="ground-truth instance map(s), comma-separated")
    p.add_argument("--erode", type=int, default=3, help="erosion radius for eroded pixel scores, 0 disables (default 3)")
    p.add_argument("--out", help="report JSON (default stdout)")

    p = command("gradcheck", cmd_gradcheck, "finite-difference check of the full toy model")
    p.add_argument("--model", default="toy", help="model preset (default toy)")
    p.add_argument("--size", type=int, default=64, help="input side (default 64)")
    p.add_argument("--lam", type=float, default=0.1, help="boundary loss weight (default 0.1)")
    p.add_argument("--eps", type=float, default=1e-6, help="finite-difference step (default 1e-6)")
    p.add_argument("--coords", type=int, default=2, help="coordinates probed per parameter tensor (default 2)")

    p = command("ablate", cmd_ablate, "train ResFCN and B-ResFCN identically and compare them")
    _train_flags(p)
    _extract_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    return root


def _config_path(argv: list):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, argv: list) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` become defaults, so explicit flags win."""
    path = _config_path(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((tok for tok in argv if tok in subparsers), None)
    if path is None or command is None:
        return parser.parse_args(argv)
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    sub = subparsers[command]
    known = {a.dest for a in sub._actions} - {"config", "help", "func"}
    defaults = {}
    for key, value in cfg.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in known:
            raise UsageError(f"config key {key!r} is not a flag of {command}")
        defaults[dest] = value
    for action in sub._actions:
        if action.dest in defaults:
            action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, AlignmentError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
