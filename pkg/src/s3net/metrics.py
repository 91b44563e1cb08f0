import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .data import load_image
from .errors import ShapeError
from .losses import SsimConfig, perceptual_loss, ssim_index

REPORT_SCHEMA_VERSION = 1
METRIC_SSIM = SsimConfig.gaussian(11, 1.5)


def psnr(pred, target, peak=1.0):
    """PSNR in dB; math.inf for identical inputs."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    mse = torch.mean((pred.double() - target.double()) ** 2).item()
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim_metric(pred, target, cfg=METRIC_SSIM):
    return ssim_index(pred, target, cfg).item()


def mps(ssim, perceptual_distance):
    """Mean perceptual score: average of SSIM and (1 - distance)."""
    return 0.5 * (ssim + (1.0 - perceptual_distance))


@dataclass
class MetricRow:
    id: str
    psnr: float
    ssim: float
    perceptual_distance: float
    mps: float


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    missing_pred: list = field(default_factory=list)
    missing_gt: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def aggregate(self):
        if not self.rows:
            return None
        n = len(self.rows)
        return {
            "psnr": sum(r.psnr for r in self.rows) / n,
            "ssim": sum(r.ssim for r in self.rows) / n,
            "perceptual_distance": sum(r.perceptual_distance for r in self.rows) / n,
            "mps": sum(r.mps for r in self.rows) / n,
        }

    def to_json(self, label=None):
        agg = self.aggregate()
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "label": label,
            "count": len(self.rows),
            "aggregate": {k: _json_float(v) for k, v in agg.items()} if agg else None,
            "rows": [{k: _json_float(v) for k, v in asdict(r).items()} for r in self.rows],
            "missing_pred": self.missing_pred,
            "missing_gt": self.missing_gt,
            "warnings": self.warnings,
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "psnr", "ssim", "perceptual_distance", "mps"])
            for r in self.rows:
                w.writerow([r.id, repr(r.psnr), repr(r.ssim), repr(r.perceptual_distance), repr(r.mps)])

    def write_json(self, path, label=None):
        with open(path, "w") as f:
            json.dump(self.to_json(label), f, indent=2)


def _json_float(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


def _extractor_dtype(extractor, default):
    p = next(extractor.parameters(), None)
    return default if p is None else p.dtype


def evaluate_pair(pred, target, extractor, id=""):
    dist = 0.0
    if extractor is not None:
        dt = _extractor_dtype(extractor, pred.dtype)
        with torch.no_grad():
            dist = perceptual_loss(pred.to(dt), target.to(dt), extractor).item()
    s = ssim_metric(pred, target)
    return MetricRow(id=id, psnr=psnr(pred, target), ssim=s, perceptual_distance=dist, mps=mps(s, dist))


def evaluate_dir(pred_dir, gt_dir, extractor=None):
    pred = {p.stem: p for p in sorted(Path(pred_dir).glob("*.png"))}
    gt = {p.stem: p for p in sorted(Path(gt_dir).glob("*.png"))}
    report = MetricReport(
        missing_pred=sorted(set(gt) - set(pred)),
        missing_gt=sorted(set(pred) - set(gt)),
    )
    common = sorted(set(pred) & set(gt))
    if not common:
        report.warnings.append("no image ids in common between prediction and ground-truth dirs")
    for key in common:
        # decoded in float64 so PSNR is exact for 8-bit inputs
        p_img = load_image(pred[key], torch.float64)
        g_img = load_image(gt[key], torch.float64)
        row = evaluate_pair(p_img, g_img, extractor, id=key)
        if not 0.0 <= row.perceptual_distance <= 1.0 or not 0.0 <= row.ssim <= 1.0:
            report.warnings.append(f"{key}: ssim/distance outside [0,1]; mps is not normalised")
        report.rows.append(row)
    return report
