"""Stage-2 monocular refiner with the stage-1 depth injected as a prompt.

A small U-Net reads the left IR image. The stage-1 depth (D_init) enters only
through a three-layer prompt network whose output is added to the decoder
feature at 1/4 resolution, so zeroing the prompt weights leaves a purely
monocular network.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from nsl_lab.geometry import DepthMap


@dataclass(frozen=True)
class RefinerConfig:
    backbone_width: int = 16
    decoder_scales: int = 4          # stride-2 encoder stages
    alpha: float = 0.5
    prompt_convs: int = 3
    prompt_width: int = 32
    depth_scale: float = 3.0         # metres; D_init is divided by this before prompting
    max_prompt_depth: float = 12.0   # larger D_init values are clipped

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.prompt_convs != 3:
            raise ValueError("the prompt network has exactly 3 conv layers")
        if self.decoder_scales < 2:
            raise ValueError("decoder_scales must be >= 2 (the prompt enters at 1/4)")
        if self.backbone_width < 1 or self.depth_scale <= 0:
            raise ValueError("backbone_width and depth_scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RefinerConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown refiner config keys: {sorted(unknown)}")
        return cls(**d)


def _block(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.ReLU(),
                         nn.Conv2d(cout, cout, 3, 1, 1), nn.ReLU())


class Refiner(nn.Module):
    def __init__(self, cfg: RefinerConfig = RefinerConfig()):
        super().__init__()
        self.cfg = cfg
        w, n = cfg.backbone_width, cfg.decoder_scales
        widths = [w * min(2 ** s, 8) for s in range(n + 1)]
        self.widths = widths
        self.backbone = nn.ModuleList(
            [_block(1, widths[0])] + [_block(widths[s - 1], widths[s], 2) for s in range(1, n + 1)])
        # decoder stage s brings scale s+1 up to scale s; transposed convs keep the
        # sub-pixel position explicit, which a plain interpolation would lose
        self.up = nn.ModuleList(nn.ConvTranspose2d(widths[s + 1], widths[s], 2, 2) for s in range(n))
        self.fuse = nn.ModuleList(_block(2 * widths[s], widths[s]) for s in range(n))
        pw = cfg.prompt_width
        self.prompt = nn.Sequential(
            nn.Conv2d(2 * 16, pw, 3, 1, 1), nn.ReLU(),
            nn.Conv2d(pw, pw, 3, 1, 1), nn.ReLU(),
            nn.Conv2d(pw, widths[2], 3, 1, 1))
        self.head = nn.Conv2d(widths[0], 1, 3, 1, 1)

    def backbone_parameters(self):
        return list(self.backbone.parameters())

    def head_parameters(self):
        ids = {id(p) for p in self.backbone_parameters()}
        return [p for p in self.parameters() if id(p) not in ids]

    def prompt_features(self, d_init, valid):
        """Prompt at 1/4 resolution. Pixel-unshuffle keeps every D_init value."""
        cfg = self.cfg
        x = torch.cat([d_init.clamp(0, cfg.max_prompt_depth) / cfg.depth_scale,
                       valid.to(d_init.dtype)], dim=1)
        return self.prompt(F.pixel_unshuffle(x, 4))

    def forward(self, ir, d_init, valid):
        """``ir``, ``d_init`` (filled, metres) and ``valid`` are (B, 1, H, W); returns metric depth."""
        n = self.cfg.decoder_scales
        h0, w0 = ir.shape[-2:]
        m = 2 ** n
        ph, pw = (-h0) % m, (-w0) % m
        if ph or pw:
            ir, d_init, valid = (F.pad(t, (0, pw, 0, ph), mode="replicate")
                                 for t in (ir, d_init, valid.to(ir.dtype)))
        feats = []
        x = 2.0 * ir - 1.0
        for blk in self.backbone:
            x = blk(x)
            feats.append(x)
        y = feats[-1]
        for s in reversed(range(n)):
            y = self.fuse[s](torch.cat([self.up[s](y), feats[s]], dim=1))
            if s == 2:
                y = y + self.prompt_features(d_init, valid)
        out = self.cfg.depth_scale * self.head(y)
        return out[..., :h0, :w0]


def fill_invalid(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace invalid pixels by their nearest valid neighbour (Euclidean, ties by raster order)."""
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.all():
        return values.copy()
    if not mask.any():
        return np.zeros_like(values)
    ys, xs = np.nonzero(mask)
    out = values.copy()
    iy, ix = np.nonzero(~mask)
    # brute force in chunks; rasters here are small
    for start in range(0, len(iy), 2048):
        qy, qx = iy[start:start + 2048, None], ix[start:start + 2048, None]
        k = np.argmin((ys[None] - qy) ** 2 + (xs[None] - qx) ** 2, axis=1)
        out[iy[start:start + 2048], ix[start:start + 2048]] = values[ys[k], xs[k]]
    return out


def prompt_inputs(d_init: DepthMap):
    """(filled depth, validity) ready for the prompt network; non-finite values count as invalid."""
    ok = d_init.mask & np.isfinite(d_init.values) & (d_init.values > 0)
    return fill_invalid(np.where(ok, d_init.values, 0.0), ok), ok


def refine(ir_left, d_init: DepthMap, model: Refiner) -> DepthMap:
    ir_left = np.asarray(ir_left, dtype=np.float64)
    if ir_left.shape != d_init.values.shape:
        raise ValueError("ir_left and d_init must have the same shape")
    filled, ok = prompt_inputs(d_init)
    dtype = next(model.parameters()).dtype
    t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64)[None, None], dtype=dtype)
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(t(ir_left), t(filled), t(ok))
    finally:
        model.train(was)
    z = out[0, 0].double().numpy()
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("refiner produced non-finite depth")
    return DepthMap(z, z > 0)


def stage2_loss(D, D_gt, mask, alpha: float = 0.5) -> torch.Tensor:
    """Masked L1 plus ``alpha`` times the masked L1 of forward-difference gradients.

    The x and y gradient terms are each averaged over pairs whose two pixels
    are valid; a direction with no valid pair contributes zero.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    mask = mask.to(torch.bool)
    if not bool(mask.any()):
        raise ValueError("ground-truth mask is empty")
    w = mask.to(D.dtype)
    err = D - D_gt
    loss = (err.abs() * w).sum() / w.sum()
    if alpha == 0:
        return loss
    grad = 0
    for dim in (-1, -2):
        n = err.shape[dim]
        a, b = err.narrow(dim, 1, n - 1), err.narrow(dim, 0, n - 1)
        pw = w.narrow(dim, 1, n - 1) * w.narrow(dim, 0, n - 1)
        cnt = pw.sum()
        if cnt > 0:
            grad = grad + ((a - b).abs() * pw).sum() / cnt
    return loss + alpha * grad
