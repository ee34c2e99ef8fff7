"""Command-line interface: train, predict, eval, gradcheck and ablate.

Exit codes partition the failure classes: 0 success, 1 configuration
error, 2 data error, 3 numeric failure (non-finite loss or a gradient
check outside tolerance).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .backbone import validate_images
from .config import RunConfig, load_run_config
from .data import PairDataset, load_manifest, load_pairs, synth_generate
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    MinetLabError,
    NonFiniteLossError,
    ShapeError,
)
from .gradcheck import run_gradient_check
from .imgio import list_stems, load_rgb, save_gray_png
from .metrics import evaluate_dataset
from .net import MINet, load_checkpoint
from .train import evaluate_checkpoint, train

ABLATION_ROWS = {
    "baseline": (False, False, 0.0),
    "+aim": (True, False, 0.0),
    "+sim": (False, True, 0.0),
    "+aim+sim": (True, True, 0.0),
    "+aim+sim+cel": (True, True, 1.0),
}

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _apply_thread_cap():
    raw = os.environ.get("MINETLAB_THREADS")
    if raw:
        try:
            torch.set_num_threads(max(1, int(raw)))
        except ValueError:
            pass


def _load_config(path) -> RunConfig:
    return load_run_config(path) if path else RunConfig()


def _training_dataset(args, run_config) -> PairDataset:
    if args.synthetic:
        size = (args.image_size, args.image_size)
        return synth_generate(args.synthetic, image_size=size, seed=args.seed)
    resize = run_config.augmentation.resize_to
    if getattr(args, "manifest", None):
        dataset = load_manifest(args.manifest, resize_to=resize)
        if len(dataset) == 0:
            raise DataError(f"no usable samples in manifest {args.manifest}")
        return dataset
    if not args.data_dir:
        raise ConfigError("one of --data-dir, --manifest or --synthetic is required")
    root = Path(args.data_dir)
    dataset = load_pairs(root / "images", root / "masks", resize_to=resize)
    if len(dataset) == 0:
        raise DataError(f"no usable image/mask pairs under {root}")
    return dataset


def cmd_train(args) -> int:
    run_config = _load_config(args.config)
    if args.seed is not None:
        run_config = dataclasses.replace(
            run_config, train=dataclasses.replace(run_config.train, seed=args.seed)
        )
    if args.iterations is not None:
        run_config = dataclasses.replace(
            run_config, train=dataclasses.replace(run_config.train, iterations=args.iterations)
        )
    args.seed = run_config.train.seed
    dataset = _training_dataset(args, run_config)

    torch.manual_seed(run_config.train.seed)
    model = MINet(run_config.model_config())
    result = train(
        model,
        dataset,
        run_config.train,
        out_dir=args.out_dir,
        augmentation=run_config.augmentation if run_config.use_augmentation else None,
        metric_cfg=run_config.metrics,
    )
    print(
        f"trained {result.state.global_iteration} iterations; "
        f"best validation f_avg {result.state.best_validation_f_avg:.4f}; "
        f"outputs in {args.out_dir}"
    )
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    stems = list_stems(args.images)
    if not stems:
        print(f"no images found under {args.images}", file=sys.stderr)
        return EXIT_DATA
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = []
    for stem, path in stems.items():
        try:
            image = load_rgb(path)
            tensor = torch.from_numpy(image).permute(2, 0, 1).unsqueeze(0)
            validate_images(tensor)
            with torch.no_grad():
                pred = model(tensor)[0, 0].numpy()
            save_gray_png(out_dir / f"{stem}.png", pred)
        except Exception as exc:
            failures.append(f"{stem}: {exc}")
    for line in failures:
        print(f"failed: {line}", file=sys.stderr)
    return EXIT_DATA if failures else EXIT_OK


def cmd_eval(args) -> int:
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    base = report_path.with_suffix("")
    evaluate_dataset(
        args.pred_dir,
        args.gt_dir,
        report_path=report_path,
        per_image_path=f"{base}_per_image.csv",
        curve_path=f"{base}_curves.csv",
    )
    print(report_path.read_text().strip())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_gradient_check(
        size=args.size,
        seed=args.seed,
        tolerance=args.tolerance,
        cases=args.cases,
        corrupt=args.corrupt,
    )
    print(f"bcel max relative error: {report.bcel_max_rel_err:.3e}")
    print(f"cel  max relative error: {report.cel_max_rel_err:.3e}")
    print(f"intra-class constancy: foreground spread {report.fg_spread:.3e}, "
          f"background spread {report.bg_spread:.3e}")
    print(f"class gap deviation from 2/sum(p+g): {report.class_gap_err:.3e}")
    if not report.passed:
        worst = max(
            (report.bcel_worst, report.cel_worst),
            key=lambda w: abs(w.get("analytic", 0) - w.get("numeric", 0)),
        )
        print(
            f"tolerance {report.tolerance} exceeded; worst pixel {worst.get('pixel')} "
            f"in case {worst.get('case')}: analytic {worst.get('analytic')}, "
            f"numeric {worst.get('numeric')}",
            file=sys.stderr,
        )
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_ablate(args) -> int:
    rows = [row.strip() for row in args.rows.split(",") if row.strip()]
    unknown = [row for row in rows if row not in ABLATION_ROWS]
    if unknown:
        raise ConfigError(f"unknown ablation rows {unknown}; valid: {sorted(ABLATION_ROWS)}")
    run_config = _load_config(args.config)
    if args.seed is not None:
        run_config = dataclasses.replace(
            run_config, train=dataclasses.replace(run_config.train, seed=args.seed)
        )
    if args.iterations is not None:
        run_config = dataclasses.replace(
            run_config, train=dataclasses.replace(run_config.train, iterations=args.iterations)
        )
    size = (args.image_size, args.image_size)
    dataset = synth_generate(args.synthetic, image_size=size, seed=run_config.train.seed)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for row in rows:
        use_aim, use_sim, lam = ABLATION_ROWS[row]
        model_cfg = dataclasses.replace(
            run_config.model_config(), use_aim=use_aim, use_sim=use_sim
        )
        train_cfg = dataclasses.replace(
            run_config.train, lambda_cel=lam, checkpoint_every=0
        )
        torch.manual_seed(train_cfg.seed)
        model = MINet(model_cfg)
        row_dir = out_dir / row.replace("+", "plus_")
        result = train(
            model,
            dataset,
            train_cfg,
            out_dir=row_dir,
            augmentation=run_config.augmentation if run_config.use_augmentation else None,
            metric_cfg=run_config.metrics,
            validate=False,
        )
        report = evaluate_checkpoint(result.model, dataset, run_config.metrics)
        results.append((row, report))
        print(f"{row}: f_avg {report.f_avg:.4f} mae {report.mae:.4f}")

    table = out_dir / "ablation.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "f_max", "f_avg", "f_w", "e_m", "s_m", "mae"])
        for row, report in results:
            summary = report.summary()
            writer.writerow(
                [row] + [repr(summary[k]) for k in ("f_max", "f_avg", "f_w", "e_m", "s_m", "mae")]
            )
    print(f"wrote {table}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="minetlab", description="Multi-scale interactive saliency lab"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model on a directory or synthetic data")
    p_train.add_argument("--config", help="JSON run configuration")
    p_train.add_argument("--data-dir", help="directory with images/ and masks/ subfolders")
    p_train.add_argument("--manifest", help="two-column CSV manifest (image path, mask path)")
    p_train.add_argument("--synthetic", type=int, default=0, help="train on N synthetic samples")
    p_train.add_argument("--image-size", type=int, default=64, help="synthetic image size")
    p_train.add_argument("--out-dir", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--iterations", type=int, default=None)
    p_train.set_defaults(func=cmd_train)

    p_pred = sub.add_parser("predict", help="write grayscale saliency maps for a folder")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--images", required=True)
    p_pred.add_argument("--out-dir", required=True)
    p_pred.set_defaults(func=cmd_predict)

    p_eval = sub.add_parser("eval", help="six-metric report for prediction/mask folders")
    p_eval.add_argument("--pred-dir", required=True)
    p_eval.add_argument("--gt-dir", required=True)
    p_eval.add_argument("--report", required=True, help="output JSON path")
    p_eval.set_defaults(func=cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="verify analytic loss gradients numerically")
    p_grad.add_argument("--size", type=int, default=8)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--tolerance", type=float, default=1e-4)
    p_grad.add_argument("--cases", type=int, default=20)
    p_grad.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_abl = sub.add_parser("ablate", help="train and compare ablation rows on one split")
    p_abl.add_argument("--config", help="JSON run configuration")
    p_abl.add_argument(
        "--rows", default="baseline,+aim,+sim,+aim+sim,+aim+sim+cel",
        help="comma-separated subset of: " + ",".join(ABLATION_ROWS),
    )
    p_abl.add_argument("--synthetic", type=int, default=16)
    p_abl.add_argument("--image-size", type=int, default=64)
    p_abl.add_argument("--out-dir", required=True)
    p_abl.add_argument("--seed", type=int, default=None)
    p_abl.add_argument("--iterations", type=int, default=None)
    p_abl.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}; diagnostics: {json.dumps(exc.diagnostics)}", file=sys.stderr)
        return EXIT_NUMERIC
    except MinetLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
