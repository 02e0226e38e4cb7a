"""Saliency evaluation: MAE, max F-measure, S-measure, E-measure, PR curves.

Conventions follow the widely used SOD evaluation toolbox:

* predictions are scaled to [0, 1] and min-max stretched per image (a
  constant map is left as is); ground truth is binarized at 0.5
* 256 thresholds ``k/255``; a pixel is foreground when ``S > t``
* dataset F and E curves are averaged over images before taking the max
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

EPS = np.finfo(np.float64).eps
BETA2 = 0.3
ALPHA = 0.5
THRESHOLDS = np.arange(256) / 255.0
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


def prepare(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    """Float64 prediction in [0, 1] and boolean ground truth."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if pred.dtype == np.uint8:
        pred = pred / 255.0
    pred = pred.astype(np.float64)
    lo, hi = pred.min(), pred.max()
    if hi > lo:
        pred = (pred - lo) / (hi - lo)
    if gt.dtype == np.uint8:
        gt = gt >= 128
    return pred, gt.astype(bool) if gt.dtype == bool else gt >= 0.5


def mae(S, G) -> float:
    S, G = prepare(S, G)
    return float(np.abs(S - G).mean())


def _counts_above(values: np.ndarray) -> np.ndarray:
    """Number of ``values`` strictly greater than each threshold."""
    ordered = np.sort(values.ravel())
    return ordered.size - np.searchsorted(ordered, THRESHOLDS, side="right")


@dataclass
class FCurve:
    precision: np.ndarray
    recall: np.ndarray
    fmeasure: np.ndarray

    @property
    def f_max(self) -> float:
        return float(self.fmeasure.max())


def f_measure_curve(S, G) -> FCurve:
    """Precision, recall and F_beta at 256 thresholds.

    Raises ``ValueError`` when ``G`` has no foreground, where recall is undefined.
    """
    S, G = prepare(S, G)
    n_fg = G.sum()
    if n_fg == 0:
        raise ValueError("ground truth has no foreground")
    tp = _counts_above(S[G]).astype(np.float64)
    fp = _counts_above(S[~G]).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = tp / n_fg
        denom = BETA2 * precision + recall
        fm = np.where(denom > 0, (1 + BETA2) * precision * recall / denom, 0.0)
    return FCurve(precision, recall, fm)


def _object_score(values: np.ndarray) -> float:
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2 * x / (x * x + 1 + sigma + EPS)


def _object_term(S, G):
    u = G.mean()
    fg = _object_score(S[G])
    bg = _object_score(1 - S[~G])
    return u * fg + (1 - u) * bg


def _centroid(G):
    h, w = G.shape
    if not G.any():
        return int(np.round(w / 2)) + 1, int(np.round(h / 2)) + 1
    ys, xs = np.nonzero(G)
    return int(np.round(xs.mean())) + 1, int(np.round(ys.mean())) + 1


def _block_ssim(S, G) -> float:
    n = S.size
    if n == 0:
        return 0.0
    x, y = S.mean(), G.mean()
    dof = max(n - 1, 1)
    # spread from data shifted by its first value, so a constant block has exactly zero variance
    ds, dg = S - S.flat[0], G - G.flat[0]
    ds, dg = ds - ds.mean(), dg - dg.mean()
    sx = (ds ** 2).sum() / dof
    sy = (dg ** 2).sum() / dof
    sxy = (ds * dg).sum() / dof
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def _region_term(S, G):
    h, w = G.shape
    x, y = _centroid(G)
    area = h * w
    Gf = G.astype(np.float64)
    blocks = [(slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
              (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))]
    weights = [x * y / area, y * (w - x) / area, (h - y) * x / area]
    weights.append(1 - sum(weights))
    return sum(wt * _block_ssim(S[b], Gf[b]) for wt, b in zip(weights, blocks))


def s_measure(S, G, alpha: float = ALPHA) -> float:
    S, G = prepare(S, G)
    y = G.mean()
    if y == 0:
        return float(1 - S.mean())
    if y == 1:
        return float(S.mean())
    score = alpha * _object_term(S, G) + (1 - alpha) * _region_term(S, G)
    return float(max(score, 0.0))


def e_measure_curve(S, G) -> np.ndarray:
    """Enhanced-alignment score at each of the 256 thresholds."""
    S, G = prepare(S, G)
    n = G.size
    n_fg = int(G.sum())
    pos_fg = _counts_above(S[G]).astype(np.float64)    # predicted 1, truth 1
    pos_bg = _counts_above(S[~G]).astype(np.float64)   # predicted 1, truth 0
    pos = pos_fg + pos_bg
    if n_fg == 0:
        return (n - pos) / n
    if n_fg == n:
        return pos / n
    mean_b = pos / n
    mean_g = n_fg / n
    total = np.zeros_like(mean_b)
    # every pixel falls into one of four (prediction, truth) cells with constant alignment
    for b_val, g_val, count in ((1, 1, pos_fg), (1, 0, pos_bg),
                                (0, 1, n_fg - pos_fg), (0, 0, (n - n_fg) - pos_bg)):
        phi_b = b_val - mean_b
        phi_g = g_val - mean_g
        xi = 2 * phi_b * phi_g / (phi_b ** 2 + phi_g ** 2 + EPS)
        total += count * (xi + 1) ** 2 / 4
    return total / n


def e_measure(S, G) -> float:
    return float(e_measure_curve(S, G).max())


@dataclass
class MetricReport:
    mae: float
    s_measure: float
    f_max: float
    e_measure: float
    e_mean: float
    precision: np.ndarray
    recall: np.ndarray
    fmeasure: np.ndarray
    n_images: int
    n_empty_gt: int = 0
    e_measure_kind: str = "max"
    thresholds: np.ndarray = field(default_factory=lambda: THRESHOLDS.copy())

    def summary(self) -> dict:
        return {
            "n_images": self.n_images,
            "n_empty_gt": self.n_empty_gt,
            "mae": self.mae,
            "s_measure": self.s_measure,
            "f_max": self.f_max,
            "e_measure": self.e_measure,
            "e_measure_kind": self.e_measure_kind,
            "e_mean": self.e_mean,
        }

    def table_row(self) -> str:
        """E_xi, S_alpha, F_beta, MAE in the benchmark-table column order."""
        return f"{self.e_measure:.3f}\t{self.s_measure:.3f}\t{self.f_max:.3f}\t{self.mae:.3f}"


def aggregate(pairs) -> MetricReport:
    """Report over an iterable of ``(prediction, ground truth)`` arrays."""
    maes, sms, f_curves, p_curves, r_curves, e_curves = [], [], [], [], [], []
    n_empty = 0
    for S, G in pairs:
        maes.append(mae(S, G))
        sms.append(s_measure(S, G))
        e_curves.append(e_measure_curve(S, G))
        _, Gb = prepare(S, G)
        if not Gb.any():
            n_empty += 1
            continue
        fc = f_measure_curve(S, G)
        f_curves.append(fc.fmeasure)
        p_curves.append(fc.precision)
        r_curves.append(fc.recall)
    if not maes:
        raise ValueError("no images to evaluate")
    e_curve = np.mean(e_curves, 0)
    if f_curves:
        fm, pr, rc = np.mean(f_curves, 0), np.mean(p_curves, 0), np.mean(r_curves, 0)
    else:
        fm = pr = rc = np.zeros(256)
    return MetricReport(
        mae=float(np.mean(maes)), s_measure=float(np.mean(sms)), f_max=float(fm.max()),
        e_measure=float(e_curve.max()), e_mean=float(e_curve.mean()),
        precision=pr, recall=rc, fmeasure=fm, n_images=len(maes), n_empty_gt=n_empty)


def _list_images(directory: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_EXTS}


def read_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def load_pair(pred_path, gt_path) -> tuple[np.ndarray, np.ndarray]:
    """8-bit prediction and mask; the prediction is resized to the mask if needed."""
    gt = read_gray(gt_path)
    with Image.open(pred_path) as im:
        im = im.convert("L")
        if im.size != (gt.shape[1], gt.shape[0]):
            im = im.resize((gt.shape[1], gt.shape[0]), Image.BILINEAR)
        pred = np.asarray(im)
    return pred, gt


def evaluate_dataset(pred_dir, gt_dir) -> MetricReport:
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    gts = _list_images(gt_dir)
    preds = _list_images(pred_dir)
    if not gts:
        raise ValueError(f"no ground-truth images in {gt_dir}")
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise FileNotFoundError(
            f"no prediction for {len(missing)} ground-truth file(s): "
            + ", ".join(str(gts[m]) for m in missing[:5]))
    return aggregate(load_pair(preds[s], gts[s]) for s in sorted(gts))


def write_report(report: MetricReport, path) -> tuple[Path, Path]:
    """Key-value report at ``path`` and the PR curve CSV beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}: {v:.6f}" if isinstance(v, float) else f"{k}: {v}"
             for k, v in report.summary().items()]
    path.write_text("\n".join(lines) + "\n")
    csv_path = path.with_name(path.stem + "_pr.csv")
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall", "fmeasure"])
        for t, p, r, f in zip(report.thresholds, report.precision, report.recall, report.fmeasure):
            writer.writerow([f"{t:.6f}", f"{p:.6f}", f"{r:.6f}", f"{f:.6f}"])
    return path, csv_path


def read_report(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        key, value = line.split(":", 1)
        value = value.strip()
        try:
            out[key] = int(value) if value.isdigit() else float(value)
        except ValueError:
            out[key] = value
    return out
