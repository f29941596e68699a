"""Confusion-matrix evaluation: per-class IoU, mIoU, eight-sector breakdown."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .scenes import IGNORE
from .tensor_io import DataError


class ConfusionMatrix:
    """K x K joint counts; rows are ground truth, columns are predictions."""

    def __init__(self, classes: int):
        self.classes = classes
        self.counts = np.zeros((classes, classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        """Accumulate one prediction/label pair, skipping ignore pixels."""
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise DataError(f"prediction {pred.shape} vs labels {gt.shape}")
        keep = gt != IGNORE
        p = pred[keep].astype(np.int64)
        g = gt[keep].astype(np.int64)
        if p.size and (p.min() < 0 or p.max() >= self.classes or g.min() < 0 or g.max() >= self.classes):
            raise DataError("class index out of range")
        self.counts += np.bincount(
            g * self.classes + p, minlength=self.classes**2
        ).reshape(self.classes, self.classes)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> tuple[np.ndarray, float]:
        """Per-class IoU and mIoU in percent.

        Classes with an empty union carry NaN and are excluded from the mean.
        """
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - np.diag(self.counts)
        per_class = np.full(self.classes, np.nan)
        nz = union > 0
        per_class[nz] = 100.0 * tp[nz] / union[nz]
        miou = float(np.nanmean(per_class)) if nz.any() else float("nan")
        return per_class, miou


def sector_of_columns(width: int, n_sectors: int = 8) -> np.ndarray:
    """Azimuth sector index per column; sector 0 is centered on the front view.

    The front view is the image center column.  When the width is not
    divisible by the sector count, the remainder columns join the last sector.
    """
    base = width // n_sectors
    if base == 0:
        raise DataError(f"width {width} too small for {n_sectors} sectors")
    start = width // 2 - base // 2
    rel = (np.arange(width) - start) % width
    return np.minimum(rel // base, n_sectors - 1)


def polar_eval(
    pred: np.ndarray, gt: np.ndarray, classes: int, n_sectors: int = 8
) -> list[ConfusionMatrix]:
    """Independent confusion matrices per azimuth sector of one panorama."""
    if pred.shape != gt.shape:
        raise DataError("prediction/label shape mismatch")
    sectors = sector_of_columns(pred.shape[1], n_sectors)
    cms = [ConfusionMatrix(classes) for _ in range(n_sectors)]
    for s in range(n_sectors):
        cols = sectors == s
        cms[s].update(pred[:, cols], gt[:, cols])
    return cms


def merge_sector_lists(a: list[ConfusionMatrix], b: list[ConfusionMatrix]) -> list[ConfusionMatrix]:
    return [x.merge(y) for x, y in zip(a, b)]


def build_report(
    pano_cm: ConfusionMatrix,
    sector_cms: list[ConfusionMatrix] | None,
    pinhole_cm: ConfusionMatrix | None,
) -> dict:
    """Evaluation summary: per-class IoU, mIoU, sector mIoUs, domain gap.

    The gap is pinhole mIoU minus panorama mIoU (positive when panoramas
    score worse).
    """
    per_class, miou = pano_cm.iou()
    report = {
        "per_class": {
            str(k): (None if np.isnan(per_class[k]) else round(float(per_class[k]), 6))
            for k in range(pano_cm.classes)
        },
        "miou": round(miou, 6),
        "evaluated_pixels": pano_cm.total,
    }
    if sector_cms is not None:
        mious, pixels = [], []
        for cm in sector_cms:
            _, s_miou = cm.iou()
            mious.append(round(s_miou, 6))
            pixels.append(cm.total)
        report["sectors"] = mious
        report["sector_pixels"] = pixels
    if pinhole_cm is not None:
        _, pin_miou = pinhole_cm.iou()
        report["pinhole_miou"] = round(pin_miou, 6)
        report["gap"] = round(pin_miou - miou, 6)
    return report


def format_report(report: dict) -> str:
    lines = ["class   IoU(%)"]
    for k, v in report["per_class"].items():
        lines.append(f"{k:>5}   {'-' if v is None else f'{v:6.2f}'}")
    lines.append(f"mIoU    {report['miou']:6.2f}")
    if "pinhole_miou" in report:
        lines.append(f"pinhole mIoU {report['pinhole_miou']:6.2f}   gap {report['gap']:+6.2f}")
    if "sectors" in report:
        ms = " ".join(f"{s:6.2f}" for s in report["sectors"])
        lines.append(f"sector mIoU  {ms}")
    return "\n".join(lines)


def write_report(report: dict, out_dir) -> Path:
    """Write eval.json plus the plot-ready polar CSV; returns the JSON path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "eval.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    if "sectors" in report:
        rows = ["sector,miou,pixels"]
        for i, (m, n) in enumerate(zip(report["sectors"], report["sector_pixels"])):
            rows.append(f"{i},{m},{n}")
        (out_dir / "polar.csv").write_text("\n".join(rows) + "\n")
    return path
