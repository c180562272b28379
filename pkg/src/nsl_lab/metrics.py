"""Depth and disparity error metrics.

All statistics are taken over the joint valid mask of prediction and ground
truth. ``delta[t]`` is the fraction of pixels with
``max(D / D_gt, D_gt / D) < t`` (strict).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from nsl_lab.geometry import DepthMap, DisparityMap

DEFAULT_THRESHOLDS = (1.25, 1.10, 1.05)
TABLE_COLUMNS = ("MAE", "RMSE", "REL", "d1.25", "d1.10", "d1.05", "EPE")


class EmptyMaskError(ValueError):
    pass


@dataclass
class MetricReport:
    mae: float
    rmse: float
    rel: float
    delta: dict
    epe: float | None
    valid_pixel_count: int
    # raw sums, kept so reports can be pooled pixel-wise
    sums: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "rel": self.rel,
                "delta": {f"{k:.2f}": v for k, v in self.delta.items()},
                "epe": self.epe, "valid_pixel_count": self.valid_pixel_count,
                "sums": self.sums}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["mae"], d["rmse"], d["rel"],
                   {float(k): v for k, v in d["delta"].items()},
                   d.get("epe"), int(d["valid_pixel_count"]), d.get("sums", {}))

    def row(self) -> list:
        """Values in table-column order (MAE, RMSE, REL, d1.25, d1.10, d1.05, EPE)."""
        return [self.mae, self.rmse, self.rel, self.delta.get(1.25), self.delta.get(1.10),
                self.delta.get(1.05), self.epe]


def compute_metrics(D: DepthMap, D_gt: DepthMap, d: DisparityMap | None = None,
                    d_gt: DisparityMap | None = None,
                    thresholds=DEFAULT_THRESHOLDS) -> MetricReport:
    mask = D.mask & D_gt.mask
    with_disp = d is not None and d_gt is not None
    if with_disp:
        mask = mask & d.mask & d_gt.mask
    n = int(mask.sum())
    if n == 0:
        raise EmptyMaskError("joint valid mask is empty")
    gt = D_gt.values[mask]
    if np.any(gt <= 0):
        raise ValueError("ground-truth depth must be positive inside the mask")
    pred = D.values[mask]
    err = pred - gt
    abs_err = np.abs(err)
    with np.errstate(divide="ignore"):
        ratio = np.maximum(pred / gt, np.where(pred > 0, gt / pred, np.inf))
    sums = {"abs": float(abs_err.sum()), "sq": float((err * err).sum()),
            "rel": float((abs_err / gt).sum()),
            "delta": {f"{t:.2f}": int((ratio < t).sum()) for t in thresholds}}
    epe = None
    if with_disp:
        sums["epe"] = float(np.abs(d.values[mask] - d_gt.values[mask]).sum())
        epe = sums["epe"] / n
    return MetricReport(
        mae=sums["abs"] / n, rmse=math.sqrt(sums["sq"] / n), rel=sums["rel"] / n,
        delta={float(t): sums["delta"][f"{t:.2f}"] / n for t in thresholds},
        epe=epe, valid_pixel_count=n, sums=sums)


def aggregate(reports, weighting: str = "per_image_mean") -> MetricReport:
    """Combine reports: plain mean of per-image values, or recomputed from pooled sums."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to aggregate")
    if len(reports) == 1:
        return reports[0]
    n_total = sum(r.valid_pixel_count for r in reports)
    thresholds = list(reports[0].delta)
    has_epe = all(r.epe is not None for r in reports)
    if weighting == "per_image_mean":
        return MetricReport(
            mae=float(np.mean([r.mae for r in reports])),
            rmse=float(np.mean([r.rmse for r in reports])),
            rel=float(np.mean([r.rel for r in reports])),
            delta={t: float(np.mean([r.delta[t] for r in reports])) for t in thresholds},
            epe=float(np.mean([r.epe for r in reports])) if has_epe else None,
            valid_pixel_count=n_total)
    if weighting != "pixel_pooled":
        raise ValueError(f"unknown weighting {weighting!r}")
    if all(r.sums for r in reports):
        s_abs = sum(r.sums["abs"] for r in reports)
        s_sq = sum(r.sums["sq"] for r in reports)
        s_rel = sum(r.sums["rel"] for r in reports)
        delta = {t: sum(r.sums["delta"][f"{t:.2f}"] for r in reports) / n_total
                 for t in thresholds}
        epe = sum(r.sums["epe"] for r in reports) / n_total if has_epe else None
    else:
        # reports built without sums: recover them from the per-image means
        w = [r.valid_pixel_count for r in reports]
        s_abs = sum(r.mae * c for r, c in zip(reports, w))
        s_sq = sum(r.rmse ** 2 * c for r, c in zip(reports, w))
        s_rel = sum(r.rel * c for r, c in zip(reports, w))
        delta = {t: sum(r.delta[t] * c for r, c in zip(reports, w)) / n_total for t in thresholds}
        epe = sum(r.epe * c for r, c in zip(reports, w)) / n_total if has_epe else None
    return MetricReport(mae=s_abs / n_total, rmse=math.sqrt(s_sq / n_total), rel=s_rel / n_total,
                        delta=delta, epe=epe, valid_pixel_count=n_total)


def format_table(rows, title: str | None = None) -> str:
    """Aligned text table; ``rows`` is a list of ``(name, MetricReport)``."""
    name_w = max([len("Method")] + [len(n) for n, _ in rows])
    head = f"{'Method':<{name_w}} | " + " ".join(f"{c:>8}" for c in TABLE_COLUMNS)
    lines = [title] if title else []
    lines += [head, "-" * len(head)]
    for name, rep in rows:
        cells = ["     n/a" if v is None else f"{v:8.4f}" for v in rep.row()]
        lines.append(f"{name:<{name_w}} | " + " ".join(cells))
    return "\n".join(lines)


def reports_to_json(rows) -> str:
    return json.dumps({name: rep.to_dict() for name, rep in rows}, indent=2, sort_keys=True)
