"""Command-line entry point: ``gldmnet {train,predict,eval,dump-features}``.

Failures exit non-zero and print one line ``error: <ErrorClass>: <message>``
to stderr.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config as config_mod
from . import data, metrics
from .model import GLDMNet, count_parameters
from .train import (evaluate_checkpoint, load_checkpoint, model_from_checkpoint,
                    predict_record, save_map, train)

RUN_ROOT_ENV = "GLDMNET_RUN_ROOT"

log = logging.getLogger("gldmnet")


def resolve_config(config_path, overrides) -> dict:
    return config_mod.load(config_path, config_mod.parse_overrides(overrides or []))


def parameter_report(model: GLDMNet) -> str:
    parts = {
        "total": model,
        "rgb_encoder": model.rgb_encoder,
        "depth_encoder": model.depth_encoder,
        "fusion": model.fusion,
        "decoder": model.decoder,
    }
    return "".join(f"{k}: {count_parameters(m)}\n" for k, m in parts.items())


def default_run_dir(cfg, config_path) -> Path:
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    stem = Path(config_path).stem if config_path else "default"
    return root / f"{stem}-{config_mod.config_hash(cfg)}"


def cmd_train(config_path, overrides=(), run_dir=None, resume=None, allow_mismatch=False,
              manifest_path=None, max_steps=None) -> Path:
    cfg = resolve_config(config_path, overrides)
    run_dir = Path(run_dir) if run_dir else default_run_dir(cfg, config_path)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(config_mod.dump(cfg))
    if manifest_path:
        records = data.read_manifest(manifest_path)
    else:
        if not cfg["data.root"]:
            raise config_mod.ConfigError(["data.root is required for training (or pass --manifest)"])
        records = data.build_manifest(cfg["data.root"], "train", cfg["data.datasets"])
    data.write_manifest(records, run_dir / "manifest.jsonl")
    result = train(cfg, records, run_dir, resume=resume, allow_config_mismatch=allow_mismatch,
                   max_steps=max_steps)
    (run_dir / "parameters.txt").write_text(parameter_report(result.model))
    log.info("run directory: %s", run_dir)
    return run_dir


def _input_records(input_dir: Path) -> list[data.SampleRecord]:
    rgb_dir, depth_dir = input_dir / "RGB", input_dir / "depth"
    for d in (rgb_dir, depth_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"missing directory {d}")
    rgbs, depths = data._index(rgb_dir), data._index(depth_dir)
    if not rgbs:
        raise FileNotFoundError(f"no images in {rgb_dir}")
    missing = [str(rgbs[s]) for s in sorted(rgbs) if s not in depths]
    if missing:
        raise FileNotFoundError("no depth map for: " + ", ".join(missing))
    # gt is unused at inference; point it at the RGB file so the record stays complete
    return [data.SampleRecord(str(rgbs[s]), str(depths[s]), str(rgbs[s]), input_dir.name)
            for s in sorted(rgbs)]


def cmd_predict(checkpoint, input_dir, output_dir) -> list[Path]:
    ckpt = load_checkpoint(checkpoint)
    cfg = ckpt["config"]
    model = model_from_checkpoint(ckpt)
    out = Path(output_dir)
    written = []
    for rec in _input_records(Path(input_dir)):
        with Image.open(rec.rgb_path) as im:
            w, h = im.size
        prob = predict_record(model, rec, cfg["data.size"], cfg["data.mean"], cfg["data.std"],
                              out_size=(h, w))
        path = out / f"{rec.stem}.png"
        save_map(prob, path)
        written.append(path)
    return written


def plot_pr(report: metrics.MetricReport, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(report.recall, report.precision, "r-")
    ax.set(xlabel="Recall", ylabel="Precision", xlim=(0, 1), ylim=(0, 1.02))
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_eval(pred_dir, gt_dir, report_path, table=False, plot=None) -> metrics.MetricReport:
    report = metrics.evaluate_dataset(pred_dir, gt_dir)
    metrics.write_report(report, report_path)
    if table:
        print("E_xi\tS_alpha\tF_beta\tMAE")
        print(report.table_row())
    if plot:
        plot_pr(report, plot)
    return report


def channel_images(features: torch.Tensor, out_dir, prefix="ch") -> list[Path]:
    """Min-max normalize each channel of a C×H×W tensor and save it as 8-bit PNG."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for c, fmap in enumerate(features.detach().cpu().numpy()):
        lo, hi = fmap.min(), fmap.max()
        img = (fmap - lo) / (hi - lo) if hi > lo else np.full_like(fmap, 0.5)
        path = out_dir / f"{prefix}{c:03d}.png"
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)
        paths.append(path)
    return paths


@torch.no_grad()
def cmd_dump_features(checkpoint, rgb_path, depth_path, stage: int, out_dir,
                      branch: str = "pmf") -> list[Path]:
    if stage not in (1, 2, 3, 4):
        raise ValueError(f"stage must be in 1..4, got {stage}")
    ckpt = load_checkpoint(checkpoint)
    cfg = ckpt["config"]
    model = model_from_checkpoint(ckpt)
    rec = data.SampleRecord(str(rgb_path), str(depth_path), str(rgb_path), "dump")
    rgb, depth, _ = data.load_sample(rec, cfg["data.size"])
    rgb, depth = data.normalize(rgb, depth, cfg["data.mean"], cfg["data.std"])
    F_rgb = model.rgb_encoder(rgb[None])
    F_d = model.depth_encoder(depth[None])
    parts = model.fusion[stage - 1].branches(F_rgb[stage - 1], F_d[stage - 1])
    key = f"f_{branch}"
    if key not in parts:
        raise ValueError(f"fusion mode {cfg['fusion.mode']!r} has no {branch} branch; "
                         f"available: {[k[2:] for k in parts]}")
    return channel_images(parts[key][0], out_dir)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gldmnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--run-dir", help=f"output directory (default ${RUN_ROOT_ENV}/<config>-<hash>)")
    p.add_argument("--manifest", help="line-delimited manifest instead of scanning data.root")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--allow-config-mismatch", action="store_true")
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("predict", help="write final saliency maps")
    p.add_argument("checkpoint")
    p.add_argument("input_dir", help="directory with RGB/ and depth/")
    p.add_argument("output_dir")

    p = sub.add_parser("eval", help="score saliency maps against ground truth")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("report", help="key-value report path; the PR CSV is written beside it")
    p.add_argument("--table", action="store_true", help="print E_xi, S_alpha, F_beta, MAE")
    p.add_argument("--plot", help="render the PR curve to this image file")

    p = sub.add_parser("dump-features", help="save fusion feature channels as images")
    p.add_argument("checkpoint")
    p.add_argument("rgb")
    p.add_argument("depth")
    p.add_argument("--stage", type=int, default=1)
    p.add_argument("--branch", default="pmf", choices=("pmf", "cmf", "concat"))
    p.add_argument("out_dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            print(cmd_train(args.config, args.overrides, args.run_dir, args.resume,
                            args.allow_config_mismatch, args.manifest, args.max_steps))
        elif args.command == "predict":
            paths = cmd_predict(args.checkpoint, args.input_dir, args.output_dir)
            print(f"wrote {len(paths)} maps to {args.output_dir}")
        elif args.command == "eval":
            report = cmd_eval(args.pred_dir, args.gt_dir, args.report, args.table, args.plot)
            if not args.table:
                for k, v in report.summary().items():
                    print(f"{k}: {v}")
        elif args.command == "dump-features":
            paths = cmd_dump_features(args.checkpoint, args.rgb, args.depth, args.stage,
                                      args.out_dir, args.branch)
            print(f"wrote {len(paths)} channel images to {args.out_dir}")
    except Exception as err:
        message = " ".join(str(err).split())
        print(f"error: {type(err).__name__}: {message}", file=sys.stderr)
        return 2 if isinstance(err, config_mod.ConfigError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
