"""Pinhole camera / projector models and disparity-depth conversions.

Conventions: the left camera is the reference view, at the origin, looking
down +Z with +X right and +Y down. The right camera and the projector sit on
the +X axis, so a finite-depth point has disparity ``x_left - x_other >= 0``.
Depth is z-depth along the optical axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DISPARITY_EPS = 1e-6


class InvalidCalibration(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidCalibration("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidCalibration("principal point outside the image")

    def to_dict(self) -> dict:
        return {"fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx),
                "cy": float(self.cy), "width": int(self.width), "height": int(self.height)}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class RigCalibration:
    """Collinear, row-aligned rig: left camera, right camera and projector."""

    cam_left: Intrinsics
    cam_right: Intrinsics
    projector: Intrinsics
    baseline_lr: float
    baseline_lp: float

    def __post_init__(self):
        if not (self.baseline_lr > 0 and self.baseline_lp > 0):
            raise InvalidCalibration("baselines must be positive")
        views = (self.cam_left, self.cam_right, self.projector)
        if len({(k.fy, k.cy) for k in views}) != 1:
            raise InvalidCalibration("all views must share fy and cy for row-aligned epipolar geometry")

    @classmethod
    def simple(cls, width: int, height: int, focal: float,
               baseline_lr: float, baseline_lp: float) -> "RigCalibration":
        k = Intrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
        return cls(k, k, k, baseline_lr, baseline_lp)

    @property
    def focal(self) -> float:
        return self.cam_left.fx

    def to_dict(self) -> dict:
        return {"cam_left": self.cam_left.to_dict(), "cam_right": self.cam_right.to_dict(),
                "projector": self.projector.to_dict(),
                "baseline_lr": float(self.baseline_lr), "baseline_lp": float(self.baseline_lp)}

    @classmethod
    def from_dict(cls, d: dict) -> "RigCalibration":
        return cls(Intrinsics.from_dict(d["cam_left"]), Intrinsics.from_dict(d["cam_right"]),
                   Intrinsics.from_dict(d["projector"]),
                   float(d["baseline_lr"]), float(d["baseline_lp"]))


@dataclass
class DepthMap:
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape:
            raise ValueError("mask shape does not match values")

    @classmethod
    def dense(cls, values) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.isfinite(values) & (values > 0))


@dataclass
class DisparityMap:
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape:
            raise ValueError("mask shape does not match values")

    @classmethod
    def dense(cls, values) -> "DisparityMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.isfinite(values))


def disparity_to_depth(d: DisparityMap, f: float, B: float) -> DepthMap:
    """Triangulate ``Z = f*B/d``; disparities at or below 1e-6 px become invalid."""
    if not (f > 0 and B > 0):
        raise InvalidCalibration("f and B must be positive")
    ok = d.mask & np.isfinite(d.values) & (d.values > DISPARITY_EPS)
    z = np.zeros_like(d.values)
    z[ok] = f * B / d.values[ok]
    return DepthMap(z, ok)


def depth_to_disparity(Z: DepthMap, f: float, B: float) -> DisparityMap:
    if not (f > 0 and B > 0):
        raise InvalidCalibration("f and B must be positive")
    ok = Z.mask & (Z.values > 0)
    d = np.zeros_like(Z.values)
    # inf depth maps to zero disparity and stays valid; a subnormal depth overflows and does not
    with np.errstate(over="ignore"):
        d[ok] = f * B / Z.values[ok]
    ok &= np.isfinite(d)
    return DisparityMap(np.where(ok, d, 0.0), ok)


def depth_to_pointcloud(Z: DepthMap, K: Intrinsics) -> np.ndarray:
    """(N, 3) points in the camera frame, one per valid pixel in row-major order."""
    v, u = np.nonzero(Z.mask)
    z = Z.values[v, u]
    x = (u - K.cx) * z / K.fx
    y = (v - K.cy) * z / K.fy
    return np.stack([x, y, z], axis=1) if len(z) else np.zeros((0, 3))
