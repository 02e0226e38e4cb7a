"""Training loop with staged freezing, checkpoints and evaluation."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import config as config_mod
from . import metrics
from .data import (MEAN, STD, AugmentConfig, RGBDDataset, SampleRecord, batches, collate,
                   load_sample, normalize, steps_per_epoch)
from .losses import LossBreakdown, total_loss
from .model import GLDMNet

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


class CheckpointError(RuntimeError):
    pass


def lr_at(epoch: int, lr0: float = 1e-4, decay: float = 0.97) -> float:
    """Learning rate for 0-based ``epoch``."""
    return lr0 * decay ** epoch


def frozen_groups(epoch: int, cnn_epochs: int = 30, transformer_epochs: int = 30) -> set[str]:
    """Parameter groups held fixed during 0-based ``epoch``.

    The encoders are frozen for the first ``cnn_epochs`` epochs, then the
    decoder transformer for the next ``transformer_epochs``; afterwards
    everything trains.
    """
    if epoch < cnn_epochs:
        return {"cnn"}
    if epoch < cnn_epochs + transformer_epochs:
        return {"transformer"}
    return set()


def apply_freeze(model: GLDMNet, frozen: set[str]) -> None:
    for p in model.parameters():
        p.requires_grad_(True)
    if "cnn" in frozen:
        for p in model.cnn_parameters():
            p.requires_grad_(False)
    if "transformer" in frozen:
        for p in model.transformer_parameters():
            p.requires_grad_(False)


def save_checkpoint(path, model, optimizer, epoch: int, step: int, cfg: Mapping[str, Any],
                    batch: int = 0) -> Path:
    """``epoch`` is the epoch to continue with and ``batch`` the batches of it already done."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()  # in-memory archive name, so bytes do not depend on the file name
    torch.save({
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "step": step,
        "batch": batch,
        "rng": torch.get_rng_state(),
        "config_hash": config_mod.config_hash(cfg),
        "config": dict(cfg),
    }, buf)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from None
    if not isinstance(ckpt, dict) or "model" not in ckpt or "config" not in ckpt:
        raise CheckpointError(f"{path} is not a training checkpoint")
    return ckpt


def model_from_checkpoint(ckpt: Mapping[str, Any]) -> GLDMNet:
    cfg = dict(ckpt["config"])
    cfg["backbone.weights"] = ""
    model = GLDMNet.from_config(cfg)
    try:
        model.load_state_dict(ckpt["model"])
    except RuntimeError as err:
        raise CheckpointError(f"checkpoint does not match its config: {err}") from None
    return model.eval()


def _row(step, epoch, lr, lb: LossBreakdown) -> dict:
    row = {"step": step, "epoch": epoch, "lr": lr}
    for i, (b, _) in enumerate(lb.per_level, 1):
        row[f"bce{i}"] = float(b.detach())
    for i, (_, a) in enumerate(lb.per_level, 1):
        row[f"{lb.second_term}{i}"] = float(a.detach())
    row["total"] = float(lb.total.detach())
    return row


def read_history(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k, v in row.items():
            row[k] = int(v) if k in ("step", "epoch") else float(v)
    return rows


def write_history(rows: Sequence[dict], path) -> None:
    if not rows:
        return
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


@dataclass
class TrainResult:
    checkpoint: Path | None
    history: list[dict] = field(default_factory=list)
    model: GLDMNet | None = None


def _loss(model, batch, cfg):
    out = model(batch["rgb"], batch["depth"])
    return total_loss(out, batch["gt"], cfg["loss.lambdas"], cfg["loss.variant"],
                      cfg["loss.reduction"])


def train(cfg: Mapping[str, Any], manifest: Sequence[SampleRecord], run_dir=None,
          resume=None, allow_config_mismatch: bool = False,
          eval_manifest: Sequence[SampleRecord] | None = None,
          max_steps: int | None = None) -> TrainResult:
    """Train from scratch or resume from a checkpoint path.

    ``max_steps`` stops early (for tests); the returned checkpoint is then
    the state at that step.
    """
    if not manifest:
        raise ValueError("training manifest is empty")
    cfg = dict(cfg)
    run_dir = Path(run_dir) if run_dir else None
    torch.manual_seed(cfg["train.seed"])
    model = GLDMNet.from_config(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg["train.lr"], betas=(0.9, 0.999),
                           weight_decay=0.0)
    start_epoch, step, skip = 0, 0, 0
    history: list[dict] = []
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt["config_hash"] != config_mod.config_hash(cfg) and not allow_config_mismatch:
            raise CheckpointError(
                f"config hash {config_mod.config_hash(cfg)} does not match checkpoint "
                f"{ckpt['config_hash']}; pass the override to resume anyway")
        model.load_state_dict(ckpt["model"])
        opt.load_state_dict(ckpt["optimizer"])
        torch.set_rng_state(ckpt["rng"])
        start_epoch, step, skip = ckpt["epoch"], ckpt["step"], ckpt.get("batch", 0)
        previous = run_dir / "loss_history.csv" if run_dir else None
        if previous is not None and previous.is_file():
            history = [r for r in read_history(previous) if r["step"] < step]

    aug = AugmentConfig(cfg["data.flip_p"], cfg["data.rotation_deg"], cfg["data.crop_min"],
                        cfg["data.jitter"])
    dataset = RGBDDataset(manifest, cfg["data.size"], train=cfg["data.augment"],
                          seed=cfg["train.seed"], aug=aug, mean=cfg["data.mean"],
                          std=cfg["data.std"])
    ckpt_path = None
    epoch = start_epoch
    for epoch in range(start_epoch, cfg["train.epochs"]):
        lr = lr_at(epoch, cfg["train.lr"], cfg["train.lr_decay"])
        for group in opt.param_groups:
            group["lr"] = lr
        apply_freeze(model, frozen_groups(epoch, cfg["train.freeze_cnn_epochs"],
                                          cfg["train.freeze_transformer_epochs"]))
        model.train()
        n_batches = steps_per_epoch(len(dataset), cfg["train.batch_size"])
        k = skip if epoch == start_epoch else 0
        for batch in batches(dataset, cfg["train.batch_size"], epoch, cfg["train.shuffle"],
                             start=k):
            k += 1
            lb = _loss(model, batch, cfg)
            if not torch.isfinite(lb.total):
                stems = [dataset.records[i].stem for i in batch["index"]]
                raise NonFiniteLossError(f"non-finite loss at step {step} (epoch {epoch}); "
                                         f"batch stems: {stems}")
            opt.zero_grad(set_to_none=True)
            lb.total.backward()
            if cfg["train.grad_clip"] > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg["train.grad_clip"])
            opt.step()
            history.append(_row(step, epoch, lr, lb))
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        # a max_steps stop inside an epoch records how far into it we got
        done, offset = (epoch + 1, 0) if k == n_batches else (epoch, k)
        stop = max_steps is not None and step >= max_steps
        if run_dir and (stop or done == cfg["train.epochs"]
                        or (cfg["train.checkpoint_every"] and done % cfg["train.checkpoint_every"] == 0)):
            name = f"epoch_{done:03d}.pt" if not offset else f"epoch_{done:03d}_step_{step}.pt"
            ckpt_path = save_checkpoint(run_dir / name, model, opt, done, step, cfg, offset)
            save_checkpoint(run_dir / "last.pt", model, opt, done, step, cfg, offset)
        if run_dir and eval_manifest and cfg["train.eval_every"] and done % cfg["train.eval_every"] == 0:
            report = evaluate_model(model, eval_manifest, run_dir / f"eval_{done:03d}",
                                    cfg["data.size"], cfg["data.mean"], cfg["data.std"])
            metrics.write_report(report, run_dir / f"eval_{done:03d}" / "report.txt")
            model.train()
        if stop:
            break
    if run_dir:
        write_history(history, run_dir / "loss_history.csv")
    return TrainResult(ckpt_path, history, model)


def overfit_smoke(cfg: Mapping[str, Any], records: Sequence[SampleRecord], steps: int = 200,
                  lr: float = 1e-4, freeze_all: bool = False, model: GLDMNet | None = None):
    """Fit one fixed batch and return ``(loss trajectory, model)``.

    A healthy build drops the total loss by an order of magnitude.
    """
    cfg = dict(cfg)
    torch.manual_seed(cfg["train.seed"])
    model = model or GLDMNet.from_config(cfg)
    model.train()
    for p in model.parameters():
        p.requires_grad_(not freeze_all)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=lr) if params else None
    dataset = RGBDDataset(records, cfg["data.size"], train=False,
                          mean=cfg["data.mean"], std=cfg["data.std"])
    batch = collate([dataset[i] for i in range(len(dataset))])
    trajectory = []
    for step in range(steps):
        lb = _loss(model, batch, cfg)
        if not torch.isfinite(lb.total):
            raise NonFiniteLossError(f"loss diverged at step {step}")
        trajectory.append(float(lb.total.detach()))
        if opt is not None:
            opt.zero_grad(set_to_none=True)
            lb.total.backward()
            opt.step()
    return trajectory, model


def to_uint8(prob: torch.Tensor) -> np.ndarray:
    return np.round(prob.detach().cpu().numpy() * 255).astype(np.uint8)


def save_map(prob: torch.Tensor, path) -> None:
    """1×H×W or H×W probability map -> 8-bit grayscale PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(prob.squeeze())).save(path)


@torch.no_grad()
def predict_record(model: GLDMNet, record: SampleRecord, size=256, mean=None, std=None,
                   out_size=None) -> torch.Tensor:
    """Final saliency map for one sample, resized to ``out_size`` (H, W) if given."""
    rgb, depth, _ = load_sample(record, size)
    rgb, depth = normalize(rgb, depth, mean or MEAN, std or STD)
    prob = model.predict(rgb[None], depth[None])
    if out_size is not None and tuple(prob.shape[-2:]) != tuple(out_size):
        logits = torch.logit(prob.clamp(1e-7, 1 - 1e-7))
        prob = torch.sigmoid(F.interpolate(logits, size=tuple(out_size), mode="bilinear",
                                           align_corners=False))
    return prob[0]


def evaluate_model(model: GLDMNet, manifest: Sequence[SampleRecord], out_dir, size=256,
                   mean=None, std=None) -> metrics.MetricReport:
    """Write final maps under ``out_dir/<dataset>/`` at GT resolution and score them."""
    out_dir = Path(out_dir)
    model.eval()
    pairs = []
    for rec in manifest:
        gt = metrics.read_gray(rec.gt_path)
        prob = predict_record(model, rec, size, mean, std, out_size=gt.shape)
        pred = to_uint8(prob[0])
        path = out_dir / rec.dataset_name / f"{rec.stem}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pred).save(path)
        pairs.append((pred, gt))
    return metrics.aggregate(pairs)


def evaluate_checkpoint(ckpt_path, manifest: Sequence[SampleRecord], out_dir):
    """Score a saved checkpoint; returns ``(MetricReport, map directory)``."""
    ckpt = load_checkpoint(ckpt_path)
    cfg = ckpt["config"]
    model = model_from_checkpoint(ckpt)
    report = evaluate_model(model, manifest, out_dir, cfg["data.size"], cfg["data.mean"],
                            cfg["data.std"])
    metrics.write_report(report, Path(out_dir) / "report.txt")
    return report, Path(out_dir)
