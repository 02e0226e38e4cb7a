"""RGB-D saliency datasets.

Layout: ``<root>/<dataset>/{RGB,depth,GT}/<stem>.<ext>``.  A split
directory (``<root>/train``, ``<root>/test``) is used as the root when it
exists.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch.utils.data import Dataset
from torchvision.transforms.v2 import functional as TF
from torchvision.transforms import InterpolationMode

log = logging.getLogger(__name__)

EXTS = (".jpg", ".jpeg", ".png", ".bmp")
MEAN = (0.485, 0.456, 0.406)
STD = (0.229, 0.224, 0.225)
SUBDIRS = ("RGB", "depth", "GT")

# commonly used training subsets
EXPECTED_TRAIN = {"NLPR": 700, "DUT-RGBD": 800, "NJUD": 1485}


@dataclass(frozen=True)
class SampleRecord:
    rgb_path: str
    depth_path: str
    gt_path: str
    dataset_name: str

    @property
    def stem(self) -> str:
        return Path(self.rgb_path).stem


def _index(directory: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.iterdir())
            if p.is_file() and p.suffix.lower() in EXTS}


def dataset_records(dataset_dir: Path) -> list[SampleRecord]:
    dirs = [dataset_dir / s for s in SUBDIRS]
    for d in dirs:
        if not d.is_dir():
            raise FileNotFoundError(f"missing directory {d}")
    rgb, depth, gt = (_index(d) for d in dirs)
    problems = []
    for stem in sorted(set(rgb) | set(depth) | set(gt)):
        absent = [name for name, idx in zip(SUBDIRS, (rgb, depth, gt)) if stem not in idx]
        if absent:
            present = next(idx[stem] for idx in (rgb, depth, gt) if stem in idx)
            problems.append(f"{present} has no counterpart in {', '.join(absent)}")
    if problems:
        raise FileNotFoundError("orphan files:\n  " + "\n  ".join(problems))
    return [SampleRecord(str(rgb[s]), str(depth[s]), str(gt[s]), dataset_dir.name)
            for s in sorted(rgb)]


def build_manifest(root, split: str = "train", datasets: Sequence[str] = ()) -> list[SampleRecord]:
    """Sorted records for every dataset under ``root`` (or only ``datasets``)."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    base = root / split if (root / split).is_dir() else root
    names = list(datasets) or sorted(p.name for p in base.iterdir()
                                     if p.is_dir() and (p / "RGB").is_dir())
    if not names:
        raise FileNotFoundError(f"no datasets with an RGB/ directory under {base}")
    records = []
    for name in names:
        recs = dataset_records(base / name)
        expected = EXPECTED_TRAIN.get(name)
        if split == "train" and expected is not None and len(recs) != expected:
            log.warning("%s: %d training samples, the standard split has %d",
                        name, len(recs), expected)
        records.extend(recs)
    if not records:
        raise FileNotFoundError(f"no samples found under {base}")
    return records


def write_manifest(records: Sequence[SampleRecord], path) -> None:
    Path(path).write_text("".join(json.dumps(asdict(r)) + "\n" for r in records))


def read_manifest(path) -> list[SampleRecord]:
    return [SampleRecord(**json.loads(line))
            for line in Path(path).read_text().splitlines() if line.strip()]


def _open(path, mode: str) -> Image.Image:
    try:
        with Image.open(path) as im:
            return im.convert(mode)
    except (OSError, ValueError) as err:
        raise OSError(f"cannot read image {path}: {err}") from None


def load_sample(record: SampleRecord, size: int = 256):
    """Resized, unnormalized tensors: rgb 3×S×S, depth 1×S×S in [0, 1], gt 1×S×S in {0, 1}."""
    rgb = _open(record.rgb_path, "RGB").resize((size, size), Image.BILINEAR)
    depth_im = _open(record.depth_path, "F")
    gt = _open(record.gt_path, "L").resize((size, size), Image.NEAREST)
    rgb = torch.from_numpy(np.asarray(rgb, dtype=np.float32) / 255.0).permute(2, 0, 1)
    depth = torch.from_numpy(np.array(depth_im, dtype=np.float32))[None, None]
    depth = F.interpolate(depth, size=(size, size), mode="bilinear", align_corners=False)[0]
    lo, hi = depth.min(), depth.max()
    depth = (depth - lo) / (hi - lo) if hi > lo else torch.zeros_like(depth)
    gt = torch.from_numpy((np.asarray(gt) >= 128).astype(np.float32))[None]
    return rgb.contiguous(), depth, gt


def normalize(rgb, depth, mean=MEAN, std=STD):
    """Standardize RGB and the three-channel replica of depth with the same statistics."""
    m = torch.tensor(mean, dtype=rgb.dtype).view(3, 1, 1)
    s = torch.tensor(std, dtype=rgb.dtype).view(3, 1, 1)
    return (rgb - m) / s, (depth.expand(3, -1, -1) - m) / s


def preprocess(record: SampleRecord, size: int = 256, mean=MEAN, std=STD):
    rgb, depth, gt = load_sample(record, size)
    rgb, depth = normalize(rgb, depth, mean, std)
    return rgb, depth, gt


@dataclass(frozen=True)
class AugmentConfig:
    flip_p: float = 0.5
    rotation_deg: float = 15.0
    crop_min: float = 0.9
    jitter: float = 0.1


def augment(rgb, depth, gt, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()):
    """One shared geometric transform for all three maps, color jitter on RGB only.

    Inputs are the unnormalized tensors from :func:`load_sample`.
    """
    _, h, w = rgb.shape
    flip = rng.random() < cfg.flip_p
    angle = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    scale = float(rng.uniform(cfg.crop_min, 1.0))
    ch, cw = max(1, round(h * scale)), max(1, round(w * scale))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    factors = rng.uniform(1 - cfg.jitter, 1 + cfg.jitter, size=3)

    def geometric(x, interp):
        if flip:
            x = TF.horizontal_flip(x)
        x = TF.rotate(x, angle, interpolation=interp)
        return TF.resized_crop(x, top, left, ch, cw, [h, w], interpolation=interp,
                               antialias=False)

    rgb = geometric(rgb, InterpolationMode.BILINEAR)
    depth = geometric(depth, InterpolationMode.BILINEAR)
    gt = geometric(gt, InterpolationMode.NEAREST)
    rgb = TF.adjust_brightness(rgb, float(factors[0]))
    rgb = TF.adjust_contrast(rgb, float(factors[1]))
    rgb = TF.adjust_saturation(rgb, float(factors[2]))
    return rgb.clamp(0, 1), depth, gt


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample stream, independent of worker scheduling."""
    return np.random.default_rng([seed, epoch, index])


class RGBDDataset(Dataset):
    def __init__(self, records: Sequence[SampleRecord], size: int = 256, train: bool = False,
                 seed: int = 0, aug: AugmentConfig | None = None, mean=MEAN, std=STD):
        self.records = list(records)
        self.size, self.train, self.seed = size, train, seed
        self.aug = aug or AugmentConfig()
        self.mean, self.std = mean, std
        self.epoch = 0

    def __len__(self):
        return len(self.records)

    def __getitem__(self, index):
        rgb, depth, gt = load_sample(self.records[index], self.size)
        if self.train:
            rgb, depth, gt = augment(rgb, depth, gt, sample_rng(self.seed, self.epoch, index),
                                     self.aug)
        rgb, depth = normalize(rgb, depth, self.mean, self.std)
        return {"rgb": rgb, "depth": depth, "gt": gt, "index": index}


def collate(items):
    return {
        "rgb": torch.stack([it["rgb"] for it in items]),
        "depth": torch.stack([it["depth"] for it in items]),
        "gt": torch.stack([it["gt"] for it in items]),
        "index": [it["index"] for it in items],
    }


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> list[int]:
    if not shuffle:
        return list(range(n))
    return np.random.default_rng([seed, epoch, 0xC0FFEE]).permutation(n).tolist()


def batches(dataset: RGBDDataset, batch_size: int, epoch: int, shuffle: bool = True,
            start: int = 0):
    """Batches of ``epoch`` in order, skipping the first ``start`` of them."""
    dataset.epoch = epoch
    order = epoch_order(len(dataset), dataset.seed, epoch, shuffle)
    for lo in range(start * batch_size, len(order), batch_size):
        yield collate([dataset[i] for i in order[lo:lo + batch_size]])


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)
