"""Command-line driver: generate, train, eval, infer, ablate.

Exit codes: 0 success; 2 configuration or usage error (including unknown
config keys and shape mismatches); 3 file IO error (unreadable inputs,
corrupt checkpoints); 4 numeric divergence during training.

Log verbosity is controlled by the SEGRL_LOG environment variable
(quiet | info | debug, default info). Progress goes to stderr; result
tables go to stdout. All file outputs land under --out (or output.dir from
the config file) with the layout documented in the README.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import dataset as ds
from . import trainer, viz
from .config import build_run_config, config_reference, parse_config_file
from .errors import ConfigError, ShapeError, TrainingDiverged

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

log = logging.getLogger("segrl")


def _setup_logging():
    name = os.environ.get("SEGRL_LOG", "info").strip().lower()
    level = {"quiet": logging.WARNING, "info": logging.INFO,
             "debug": logging.DEBUG}.get(name, logging.INFO)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(level)


def _resolve_config(args):
    values = parse_config_file(args.config) if args.config else {}
    if getattr(args, "seed", None) is not None:
        values["train.seed"] = args.seed
        values["dataset.seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        values["train.epochs"] = args.epochs
    if getattr(args, "mode", None) is not None:
        values["train.ablation_mode"] = args.mode
    if getattr(args, "out", None) is not None:
        values["output.dir"] = args.out
    return build_run_config(values)


def _ensure_out(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


def _load_model_from_checkpoint(run_config, checkpoint_path):
    bundle = trainer.load_checkpoint(checkpoint_path)
    model = trainer.build_model(run_config.train, run_config.image_side,
                                run_config.num_classes)
    trainer.apply_weights(model, bundle.weights)
    return model, bundle


def _regenerate_dataset(run_config):
    log.info("generating %d synthetic samples (seed %d)...",
             run_config.dataset.num_samples, run_config.dataset.seed)
    return ds.generate_dataset(run_config.dataset)


# ---- commands -------------------------------------------------------------


def cmd_generate(args) -> int:
    rc = _resolve_config(args)
    out = rc.out_dir
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise ConfigError(
            f"output directory {out!r} exists and is not empty; "
            "pass --force to write into it anyway")
    images_dir = os.path.join(out, "images")
    masks_dir = os.path.join(out, "masks")
    os.makedirs(images_dir, exist_ok=True)
    os.makedirs(masks_dir, exist_ok=True)

    samples = _regenerate_dataset(rc)
    entries = []
    pixel_counts = np.zeros(rc.num_classes, dtype=np.int64)
    for sample in samples:
        image_rel = os.path.join("images", f"{sample.id}.png")
        mask_rel = os.path.join("masks", f"{sample.id}.png")
        ds.save_image(sample.image, os.path.join(out, image_rel))
        ds.save_mask(sample.mask, os.path.join(out, mask_rel))
        entries.append((image_rel, mask_rel, sample.id))
        pixel_counts += np.bincount(sample.mask.ravel(), minlength=rc.num_classes)
    manifest = os.path.join(out, "manifest.tsv")
    ds.write_manifest(manifest, entries)

    total = pixel_counts.sum()
    print(f"wrote {len(samples)} samples to {out} (manifest: {manifest})")
    print(f"{'class':>6}  {'pixels':>12}  {'fraction':>9}")
    for c in range(rc.num_classes):
        print(f"{c:>6}  {pixel_counts[c]:>12d}  {pixel_counts[c] / total:>9.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = _resolve_config(args)
    out = _ensure_out(rc.out_dir)
    samples = _regenerate_dataset(rc)
    checkpoint_path = os.path.join(out, "checkpoint.segrl")
    bundle, history = trainer.train(rc.train, samples,
                                    checkpoint_path=checkpoint_path, log=log.info)
    history_path = os.path.join(out, "history.txt")
    history.save(history_path)
    curve_paths = viz.save_training_curves(history, os.path.join(out, "curves"))
    print(f"best val mIoU {bundle.best_val_miou:.4f} "
          f"(Dice {bundle.best_val_dice:.4f}) at epoch {bundle.epoch}")
    print(f"checkpoint: {checkpoint_path}")
    print(f"history:    {history_path}")
    for p in curve_paths:
        print(f"curve:      {p}")
    return EXIT_OK


def cmd_eval(args) -> int:
    rc = _resolve_config(args)
    out = _ensure_out(rc.out_dir)
    model, bundle = _load_model_from_checkpoint(rc, args.checkpoint)
    samples = _regenerate_dataset(rc)
    train_set, val_set = ds.split_dataset(samples, rc.train.val_fraction,
                                          rc.train.seed)
    subset = {"val": val_set, "train": train_set, "all": samples}[args.split]
    report = trainer.validate(model, subset, mode=bundle.ablation_mode or
                              rc.train.ablation_mode)
    table = report.to_text_table()
    print(table, end="")
    print(f"(checkpoint records best val mIoU {bundle.best_val_miou:.4f} "
          f"at epoch {bundle.epoch}, mode {bundle.ablation_mode})")
    report_path = os.path.join(out, "report.json")
    report.save(report_path)
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(table)
    print(f"report: {report_path}")
    return EXIT_OK


def cmd_infer(args) -> int:
    rc = _resolve_config(args)
    out = _ensure_out(rc.out_dir)
    model, bundle = _load_model_from_checkpoint(rc, args.checkpoint)
    side = rc.image_side
    image = ds.load_image(args.image)
    if image.shape[:2] != (side, side):
        log.warning("resizing input %dx%d to model size %dx%d",
                    image.shape[0], image.shape[1], side, side)
        image = ds.load_image(args.image, size=(side, side))
    apply_refinement = (bundle.ablation_mode or rc.train.ablation_mode) == "curriculum_rl"
    labels, _, alphas = model.predict_images(image[None], apply_refinement)
    pred = labels[0].astype(np.uint8)
    if alphas is not None:
        log.info("greedy action alpha = %+.3f", float(alphas[0]))

    mask_path = os.path.join(out, "pred_mask.png")
    overlay_path = os.path.join(out, "overlay.png")
    ds.save_mask(pred, mask_path)
    ds.save_image(viz.overlay_mask(image, pred), overlay_path)
    print(f"mask:    {mask_path}")
    print(f"overlay: {overlay_path}")
    if args.gt:
        gt = ds.load_mask(args.gt)
        if gt.shape != pred.shape:
            raise ShapeError(
                f"ground-truth mask is {gt.shape}, prediction is {pred.shape}; "
                "sizes must match for the error map")
        error_path = os.path.join(out, "error_map.png")
        ds.save_image(viz.error_map(pred, gt, image), error_path)
        counts = viz.error_counts(pred, gt)
        print(f"errors:  {error_path} "
              f"(FP {counts['false_positive']}, FN {counts['false_negative']}, "
              f"confused {counts['class_confused']})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    rc = _resolve_config(args)
    out = _ensure_out(rc.out_dir)
    runs_dir = os.path.join(out, "runs")
    os.makedirs(runs_dir, exist_ok=True)
    samples = _regenerate_dataset(rc)
    raw = []

    def on_run(mode, seed, bundle, history):
        history.save(os.path.join(runs_dir, f"{mode}_seed{seed}_history.txt"))
        raw.append({"mode": mode, "seed": seed,
                    "best_val_miou": bundle.best_val_miou,
                    "best_val_dice": bundle.best_val_dice,
                    "best_epoch": bundle.epoch})

    table = trainer.run_ablation(rc.train, samples, num_seeds=args.seeds,
                                 log=log.info, on_run=on_run)
    text = table.to_text()
    print(text, end="")
    with open(os.path.join(out, "ablation.txt"), "w") as fh:
        fh.write(text)
    with open(os.path.join(out, "ablation.json"), "w") as fh:
        json.dump({"num_seeds": args.seeds, "runs": raw}, fh, indent=2)
        fh.write("\n")
    print(f"table: {os.path.join(out, 'ablation.txt')}")
    print(f"raw:   {os.path.join(out, 'ablation.json')} and {runs_dir}/")
    return EXIT_OK


# ---- parser ----------------------------------------------------------------


def _add_common(parser, *, epochs_mode: bool = False):
    parser.add_argument("--config", metavar="PATH",
                        help="config file of key = value lines")
    parser.add_argument("--seed", type=int, metavar="N",
                        help="override train.seed and dataset.seed")
    parser.add_argument("--out", metavar="DIR", help="override output.dir")
    if epochs_mode:
        parser.add_argument("--epochs", type=int, metavar="N",
                            help="override train.epochs")
        parser.add_argument("--mode",
                            choices=("baseline", "curriculum", "curriculum_rl"),
                            help="override train.ablation_mode")


def build_parser() -> argparse.ArgumentParser:
    epilog = (config_reference()
              + "\n\nexit codes: 0 ok, 2 config error, 3 io error, "
                "4 training divergence"
              + "\nlog verbosity: SEGRL_LOG=quiet|info|debug (default info)")
    parser = argparse.ArgumentParser(
        prog="segrl",
        description="Segmentation with a frozen encoder, an upsampling decoder, "
                    "and reinforcement-learned residual refinement.",
        epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset to disk",
                       description="Writes images/, masks/ and manifest.tsv "
                                   "under --out, then prints a class histogram.")
    _add_common(p)
    p.add_argument("--force", action="store_true",
                   help="write into an existing non-empty output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model and keep the best checkpoint",
                       description="Trains on the synthetic dataset from the "
                                   "config; emits checkpoint.segrl, history.txt "
                                   "and curve plots under --out.")
    _add_common(p, epochs_mode=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write reports",
                       description="Rebuilds the dataset, evaluates the given "
                                   "checkpoint on the chosen split and writes "
                                   "report.json / report.txt under --out.")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--split", choices=("val", "train", "all"), default="val",
                   help="which deterministic split to evaluate (default val)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one image and export visualizations",
                       description="Writes the predicted class-id mask, a color "
                                   "overlay and, with --gt, a false-positive/"
                                   "false-negative map under --out.")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--image", required=True, metavar="PATH",
                   help="input RGB image (resized to the model size if needed)")
    p.add_argument("--gt", metavar="PATH",
                   help="optional ground-truth mask for the error map")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="run the 3-configuration ablation table",
                       description="Trains baseline / curriculum / curriculum_rl "
                                   "over the seed set and writes the summary "
                                   "table plus per-seed histories under --out.")
    _add_common(p, epochs_mode=True)
    p.add_argument("--seeds", type=int, default=3, metavar="N",
                   help="number of seeds per configuration (default 3)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED
    except OSError as exc:  # DataIOError and plain filesystem failures
        log.error("io error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
