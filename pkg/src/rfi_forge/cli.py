"""Command-line entry points: simulate, train, evaluate, suppress, plot.

Exit codes: 0 success, 1 validation error (bad config/arguments/files),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import datasets, difnet, io_formats, metrics, suppression
from .config import ConfigError, RunConfig, load_run_config
from .io_formats import FormatError
from .suppression import PipelineConfig


def _dataset_meta_text(metas) -> str:
    lines = ["index sensor kind sir_db"]
    for m in metas:
        lines.append(f"{m['index']} {m['sensor']} {m['kind']} {m['sir_db']:.6f}")
    return "\n".join(lines) + "\n"


def cmd_simulate(cfg: RunConfig, out_path: str) -> None:
    images, masks, metas = datasets.make_dataset(cfg.dataset, cfg.seed)
    io_formats.write_dataset(out_path, images, masks)
    with open(out_path + ".meta.txt", "w", encoding="utf-8") as f:
        f.write(_dataset_meta_text(metas))


def cmd_train(cfg: RunConfig, dataset_path: str, out_checkpoint: str,
              log=None) -> list:
    images, masks = io_formats.read_dataset(dataset_path)
    if len(images) == 0:
        raise ConfigError("training on an empty dataset")
    pairs = list(zip(images, masks))
    try:
        weights, history = difnet.train(pairs, cfg.net, seed=cfg.seed,
                                        epochs=cfg.epochs, lr=cfg.lr,
                                        batch_size=cfg.batch_size,
                                        val_fraction=cfg.val_fraction,
                                        loss_mode=cfg.loss_mode, log=log)
    except difnet.TrainDivergedError as e:
        raise RuntimeError(f"training diverged: {e}") from e
    io_formats.write_checkpoint(out_checkpoint, cfg.net, weights)
    with open(out_checkpoint + ".losses.txt", "w", encoding="utf-8") as f:
        for rec in history:
            parts = [f"epoch={rec['epoch']}", f"train_loss={rec['train_loss']:.6f}"]
            if "val_loss" in rec:
                parts += [f"val_loss={rec['val_loss']:.6f}",
                          f"val_iou={rec['val_iou']:.6f}"]
            f.write(" ".join(parts) + "\n")
    return history


def _recovered(image, pred):
    return image * (1.0 - pred)


def _method_report(images, truths, preds) -> metrics.EvalReport:
    """Average metrics of one masking method over a dataset.

    The recovered TF image is the input with predicted cells zeroed; the
    reference is the input with the true RFI cells zeroed.
    """
    pas, ious, psnrs, mes = [], [], [], []
    for img, truth, pred in zip(images, truths, preds):
        pas.append(metrics.pixel_accuracy(pred, truth))
        ious.append(metrics.iou(pred, truth))
        psnrs.append(metrics.psnr(_recovered(img, pred), _recovered(img, truth)))
        mes.append(metrics.me(np.abs(_recovered(img, pred)) + 1e-12))
    psnr = math.inf if any(math.isinf(p) for p in psnrs) else float(np.mean(psnrs))
    return metrics.EvalReport(pa=float(np.mean(pas)), iou=float(np.mean(ious)),
                              psnr_db=psnr, me=float(np.mean(mes)))


def evaluate_dataset(cfg: RunConfig, images, masks, weights=None,
                     net_cfg=None) -> dict:
    """Table-shaped comparison: no-op, notch mask, network, oracle."""
    truths = [m for m in masks]
    reports = {}
    zero = [np.zeros_like(m) for m in masks]
    reports["interfered"] = _method_report(images, truths, zero)
    notch = [suppression.notch_mask_tf(im, cfg.notch_k_sigma) for im in images]
    reports["notch"] = _method_report(images, truths, notch)
    if weights is not None:
        preds = []
        for s in range(0, len(images), 8):
            batch = np.asarray(images[s:s + 8])
            preds.extend(difnet.predict_mask(weights, batch, net_cfg))
        reports["difnet"] = _method_report(images, truths, preds)
    reports["oracle"] = _method_report(images, truths, truths)
    return reports


def cmd_evaluate(cfg: RunConfig, dataset_path: str, checkpoint_path: str | None,
                 out_dir: str) -> dict:
    images, masks = io_formats.read_dataset(dataset_path)
    weights = net_cfg = None
    if checkpoint_path is not None:
        net_cfg, weights = io_formats.read_checkpoint(checkpoint_path)
    reports = evaluate_dataset(cfg, images, masks, weights, net_cfg)
    os.makedirs(out_dir, exist_ok=True)
    for method, rep in reports.items():
        with open(os.path.join(out_dir, f"report_{method}.txt"), "w",
                  encoding="utf-8") as f:
            f.write(rep.to_text())
    return reports


def cmd_suppress(cfg: RunConfig, echo_path: str | None,
                 checkpoint_path: str | None, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    rfi_truth = None
    if echo_path is not None:
        interfered = io_formats.read_echo(echo_path)
    else:
        _, interfered, rfi_truth, _, _ = datasets.make_scenario(cfg.scenario, cfg.seed)
    model = None
    if not cfg.use_oracle_mask:
        if checkpoint_path is None:
            raise ConfigError("suppress: model masking requested but no checkpoint given")
        net_cfg, weights = io_formats.read_checkpoint(checkpoint_path)
        model = (weights, net_cfg)
    pipe = PipelineConfig(stft=cfg.pipeline_stft,
                          detector_threshold=cfg.detector_threshold,
                          notch_k_sigma=cfg.notch_k_sigma,
                          use_oracle_mask=cfg.use_oracle_mask,
                          oracle_margin=cfg.oracle_margin,
                          dyn_range_db=cfg.dyn_range_db, model=model)
    if pipe.use_oracle_mask and rfi_truth is None:
        raise ConfigError("suppress: oracle masking needs a simulated scenario "
                          "(omit --echo) so the RFI ground truth is known")
    clean, _, flags = suppression.suppress_pipeline(interfered, pipe, rfi_truth)
    before = suppression.range_doppler_image(interfered)
    after = suppression.range_doppler_image(clean)
    io_formats.write_echo(os.path.join(out_dir, "clean_echo.dife"), clean)
    io_formats.write_image(os.path.join(out_dir, "image_before.difi"), before.pixels)
    io_formats.write_image(os.path.join(out_dir, "image_after.difi"), after.pixels)
    me_before = metrics.me(np.abs(before.pixels))
    me_after = metrics.me(np.abs(after.pixels))
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as f:
        f.write(f"flagged_pulses={int(flags.sum())}\n")
        f.write(f"me_before={me_before:.6f}\nme_after={me_after:.6f}\n")
    return {"me_before": me_before, "me_after": me_after, "flags": flags}


def _to_gray(x: np.ndarray) -> np.ndarray:
    peak = np.max(x)
    if peak <= 0:
        return np.zeros(x.shape)
    return 255.0 * x / peak


def cmd_plot(paths, out_dir: str) -> list:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for path in paths:
        magic = io_formats.magic_of(path)
        stem = os.path.splitext(os.path.basename(path))[0]
        if magic == io_formats.DATASET_MAGIC:
            images, masks = io_formats.read_dataset(path)
            for i in range(len(images)):
                p1 = os.path.join(out_dir, f"{stem}_tf_{i:04d}.pgm")
                io_formats.write_pgm(p1, 255.0 * images[i])
                p2 = os.path.join(out_dir, f"{stem}_mask_{i:04d}.pgm")
                io_formats.write_pgm(p2, 255.0 * masks[i])
                written += [p1, p2]
        elif magic == io_formats.IMAGE_MAGIC:
            pixels = io_formats.read_image(path)
            out = os.path.join(out_dir, f"{stem}.pgm")
            io_formats.write_pgm(out, _to_gray(np.abs(pixels)))
            written.append(out)
        else:
            raise FormatError(f"plot: unknown artifact type {magic!r} in {path}")
    return written


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rfi-forge",
                                 description="Simulated SAR RFI suppression toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, need_out=True):
        p.add_argument("--config", required=True, help="run config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        if need_out:
            p.add_argument("--out", required=True, help="output path")

    p = sub.add_parser("simulate", help="generate a labeled TF-image dataset")
    common(p)
    p = sub.add_parser("train", help="train the mask network on a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p = sub.add_parser("evaluate", help="compare masking methods on a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", default=None)
    p = sub.add_parser("suppress", help="run the suppression pipeline on an echo")
    common(p)
    p.add_argument("--echo", default=None, help="echo file; default: simulate [scenario]")
    p.add_argument("--checkpoint", default=None)
    p = sub.add_parser("plot", help="render artifacts as 8-bit PGM images")
    common(p)
    p.add_argument("artifacts", nargs="+")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        if args.seed is not None:
            from dataclasses import replace
            cfg = replace(cfg, seed=args.seed)
        if args.command == "simulate":
            cmd_simulate(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.dataset, args.out,
                      log=lambda rec: print(rec, file=sys.stderr))
        elif args.command == "evaluate":
            reports = cmd_evaluate(cfg, args.dataset, args.checkpoint, args.out)
            for method, rep in reports.items():
                print(f"[{method}] pa={rep.pa:.4f} iou={rep.iou:.4f} me={rep.me:.4f}")
        elif args.command == "suppress":
            res = cmd_suppress(cfg, args.echo, args.checkpoint, args.out)
            print(f"me_before={res['me_before']:.4f} me_after={res['me_after']:.4f}")
        elif args.command == "plot":
            for path in cmd_plot(args.artifacts, args.out):
                print(path)
    except (ConfigError, FormatError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
