"""Flat dotted-key configuration.

A config file is plain text, one ``key = value`` per line, ``#`` starts a
comment.  Values are parsed as Python literals when possible (numbers,
booleans, lists, quoted strings) and fall back to bare strings.  Resolution
order is defaults <- file <- command-line ``--set key=value`` overrides.
"""
from __future__ import annotations

import ast
import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Mapping

FUSION_MODES = ("parallel", "serial", "pmf-only", "cmf-only", "concat-only")
TRANSFORMER_MODES = ("pvtv2", "pvtv1", "off")
LOSS_VARIANTS = ("bce+iou", "bce", "bce+dice", "bce+ssim")

DEFAULTS: dict[str, Any] = {
    "backbone.family": "resnet50",
    "backbone.weights": "",
    "fusion.mode": "parallel",
    "fusion.widths": [64, 128, 320, 512],
    "fusion.max_attention_pixels": 4096,
    "fusion.moment_exponent": -0.5,
    "fusion.l2_power": 2,
    "decoder.transformer": "pvtv2",
    "decoder.reconstruction": "on",
    "loss.variant": "bce+iou",
    "loss.lambdas": [0.8, 0.6, 0.4, 0.2],
    "loss.reduction": "sum",
    "data.root": "",
    "data.datasets": [],
    "data.size": 256,
    "data.augment": True,
    "data.flip_p": 0.5,
    "data.rotation_deg": 15.0,
    "data.crop_min": 0.9,
    "data.jitter": 0.1,
    "data.mean": [0.485, 0.456, 0.406],
    "data.std": [0.229, 0.224, 0.225],
    "train.epochs": 200,
    "train.batch_size": 4,
    "train.lr": 1e-4,
    "train.lr_decay": 0.97,
    "train.freeze_cnn_epochs": 30,
    "train.freeze_transformer_epochs": 30,
    "train.grad_clip": 0.0,
    "train.seed": 0,
    "train.checkpoint_every": 10,
    "train.eval_every": 0,
    "train.shuffle": True,
}


class ConfigError(ValueError):
    """Raised with every validation problem found, not just the first."""

    def __init__(self, problems: Iterable[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def parse_value(text: str) -> Any:
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _strip_comment(line: str) -> str:
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def parse_text(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"line {lineno}: expected 'key = value', got {raw!r}"])
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def parse_overrides(items: Iterable[str]) -> dict[str, Any]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not key=value"])
        key, value = item.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def _check(cfg: Mapping[str, Any]) -> list[str]:
    problems = []

    def choice(key, options):
        if cfg[key] not in options:
            problems.append(f"{key}={cfg[key]!r} not in {list(options)}")

    choice("fusion.mode", FUSION_MODES)
    choice("decoder.transformer", TRANSFORMER_MODES)
    choice("decoder.reconstruction", ("on", "off"))
    choice("loss.variant", LOSS_VARIANTS)
    choice("loss.reduction", ("sum", "mean"))
    choice("fusion.moment_exponent", (-0.5, 0.5))
    choice("fusion.l2_power", (1, 2))
    widths = cfg["fusion.widths"]
    if not (isinstance(widths, (list, tuple)) and len(widths) == 4
            and all(isinstance(w, int) and w > 0 for w in widths)):
        problems.append(f"fusion.widths must be four positive ints, got {widths!r}")
    lambdas = cfg["loss.lambdas"]
    if not (isinstance(lambdas, (list, tuple)) and len(lambdas) == 4):
        problems.append(f"loss.lambdas must have four entries, got {lambdas!r}")
    if not cfg["train.lr"] > 0:
        problems.append("train.lr must be > 0")
    if not 0 < cfg["train.lr_decay"] <= 1:
        problems.append("train.lr_decay must be in (0, 1]")
    for key in ("train.freeze_cnn_epochs", "train.freeze_transformer_epochs"):
        if not (isinstance(cfg[key], int) and cfg[key] >= 0):
            problems.append(f"{key} must be a non-negative int")
    if cfg["data.size"] % 32:
        problems.append(f"data.size={cfg['data.size']} is not a multiple of 32")
    if not 0 < cfg["data.crop_min"] <= 1:
        problems.append("data.crop_min must be in (0, 1]")
    return problems


def resolve(file_values: Mapping[str, Any] | None = None,
            overrides: Mapping[str, Any] | None = None) -> dict[str, Any]:
    """Merge defaults, file values and overrides; reject unknown keys."""
    cfg = dict(DEFAULTS)
    problems = []
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key not in DEFAULTS:
                problems.append(f"unknown config key {key!r}")
                continue
            if isinstance(DEFAULTS[key], float) and isinstance(value, int) \
                    and not isinstance(value, bool):
                value = float(value)
            cfg[key] = value
    if not problems:
        problems = _check(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def load(path: str | Path | None = None,
         overrides: Mapping[str, Any] | None = None) -> dict[str, Any]:
    values = parse_text(Path(path).read_text()) if path else {}
    return resolve(values, overrides)


def _literal(v: Any) -> str:
    return json.dumps(v) if isinstance(v, str) else repr(v)


def dump(cfg: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {_literal(v)}\n" for k, v in sorted(cfg.items()))


def config_hash(cfg: Mapping[str, Any], ignore: Iterable[str] = ("train.epochs",)) -> str:
    """Hash of the settings that change what a checkpoint means.

    ``train.epochs`` is excluded so a finished run can be resumed and
    extended.
    """
    payload = {k: v for k, v in sorted(cfg.items()) if k not in set(ignore)}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def section(cfg: Mapping[str, Any], prefix: str) -> dict[str, Any]:
    prefix = prefix.rstrip(".") + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}
