"""
Scoring saliency maps
=====================

MAE, max F-measure, S-measure and E-measure on a synthetic disc, then a
dataset report with its precision/recall CSV.
"""

import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from gldmnet import metrics

yy, xx = np.mgrid[0:64, 0:64]
gt = ((yy - 30) ** 2 + (xx - 34) ** 2 <= 15 ** 2).astype(np.uint8) * 255

# a soft prediction: blurred disc edge plus noise
dist = np.sqrt((yy - 32) ** 2 + (xx - 32) ** 2)
rng = np.random.default_rng(0)
pred = np.clip(255 / (1 + np.exp((dist - 15) / 2)) + rng.normal(0, 20, gt.shape), 0, 255)
pred = pred.astype(np.uint8)

print("MAE      ", round(metrics.mae(pred, gt), 4))
print("max F    ", round(metrics.f_measure_curve(pred, gt).f_max, 4))
print("S-measure", round(metrics.s_measure(pred, gt), 4))
print("E-measure", round(metrics.e_measure(pred, gt), 4))

# the ideal map scores (0, 1, 1, 1)
print("perfect  ", metrics.mae(gt, gt), metrics.s_measure(gt, gt), metrics.e_measure(gt, gt))

# directory-level evaluation writes a key-value report and a 256-row PR csv
with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    (tmp / "pred").mkdir()
    (tmp / "gt").mkdir()
    Image.fromarray(pred).save(tmp / "pred" / "a.png")
    Image.fromarray(gt).save(tmp / "gt" / "a.png")
    report = metrics.evaluate_dataset(tmp / "pred", tmp / "gt")
    kv, pr = metrics.write_report(report, tmp / "report.txt")
    print(kv.read_text())
    print(pr.read_text().splitlines()[:3])
    print("E_xi S_alpha F_beta MAE:", report.table_row())
