"""Stage-1 neural feature matcher.

Features of the left IR image are correlated against features of the
reference (projector pattern, right IR image, or both), the all-pairs cost
volume is pooled into a pyramid, and a multi-scale convolutional GRU
iteratively refines a disparity field at 1/4 resolution that is upsampled to
full resolution after every iteration.

Disparities inside the network are in 1/4-resolution pixels; everything
returned to callers is in full-resolution pixels.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from nsl_lab.geometry import DepthMap, DisparityMap, disparity_to_depth

MODES = ("mono", "stereo", "bino")


class ModeError(ValueError):
    """Inputs do not match the matcher mode."""


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class MatcherConfig:
    mode: str = "mono"
    feature_dim: int = 64
    downsample: int = 4
    pyramid_levels: int = 4
    iters_train: int = 12
    iters_eval: int = 8
    lookup_radius: int = 4
    context_scales: tuple[int, ...] = (4, 8, 16)
    loss_gamma: float = 0.9
    hidden_dim: int = 48
    encoder_width: int = 32
    upsample: str = "convex"
    # only candidates k <= j (non-negative disparity) enter the cost volume
    causal_candidates: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.downsample != 4:
            raise ValueError("downsample is fixed at 4")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.iters_train < 1 or self.iters_eval < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.lookup_radius < 0:
            raise ValueError("lookup_radius must be >= 0")
        scales = tuple(int(s) for s in self.context_scales)
        if not scales or scales != tuple(4 * 2 ** i for i in range(len(scales))):
            raise ValueError("context_scales must be a prefix of (4, 8, 16)")
        object.__setattr__(self, "context_scales", scales)
        if self.upsample not in ("convex", "bilinear"):
            raise ValueError("upsample must be 'convex' or 'bilinear'")
        if not 0 < self.loss_gamma <= 1:
            raise ValueError("loss_gamma must lie in (0, 1]")

    @property
    def corr_channels(self) -> int:
        per = self.pyramid_levels * (2 * self.lookup_radius + 1)
        return 2 * per if self.mode == "bino" else per

    @property
    def pad_multiple(self) -> int:
        return self.context_scales[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["context_scales"] = list(self.context_scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MatcherConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown matcher config keys: {sorted(unknown)}")
        d = dict(d)
        if "context_scales" in d:
            d["context_scales"] = tuple(d["context_scales"])
        return cls(**d)


# -- cost volume -------------------------------------------------------------

def build_cost_volume(f_left: torch.Tensor, f_ref: torch.Tensor) -> torch.Tensor:
    """All-pairs row correlation ``C[b, i, j, k] = sum_c FL[b, c, i, j] * FR[b, c, i, k]``."""
    if f_left.shape != f_ref.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_left.shape)} vs {tuple(f_ref.shape)}")
    return torch.einsum("bchj,bchk->bhjk", f_left, f_ref)


def build_pyramid(volume: torch.Tensor, levels: int = 4) -> list[torch.Tensor]:
    """Average adjacent pairs along the candidate axis, ``levels`` times minus one."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if volume.shape[-1] < 2 ** (levels - 1):
        raise ValueError(f"candidate axis of {volume.shape[-1]} is too short for {levels} levels")
    pyramid = [volume]
    for _ in range(levels - 1):
        c = pyramid[-1]
        w = c.shape[-1] // 2
        pyramid.append(0.5 * (c[..., 0:2 * w:2] + c[..., 1:2 * w:2]))
    return pyramid


def lookup(pyramid: list[torch.Tensor], disp: torch.Tensor, radius: int) -> torch.Tensor:
    """Sample ``2 * radius + 1`` linearly interpolated entries per level around ``j - d``.

    ``disp`` is (B, 1, H, W) in the units of the level-0 candidate axis.
    Indices outside the volume read as zero. Returns (B, L * (2r + 1), H, W).
    """
    b, _, h, w = disp.shape
    cols = torch.arange(w, dtype=disp.dtype, device=disp.device).view(1, 1, 1, w)
    offsets = torch.arange(-radius, radius + 1, dtype=disp.dtype,
                           device=disp.device).view(1, 1, 1, 1, -1)
    out = []
    for lvl, vol in enumerate(pyramid):
        n = vol.shape[-1]
        x = ((cols - disp) / 2 ** lvl).permute(0, 2, 3, 1).unsqueeze(-1) + offsets  # b,h,w,1,k
        x = x.squeeze(3)
        x0 = torch.floor(x)
        frac = x - x0
        x0 = x0.long()
        vals = 0
        for idx, wgt in ((x0, 1 - frac), (x0 + 1, frac)):
            ok = (idx >= 0) & (idx < n)
            g = torch.gather(vol, 3, idx.clamp(0, n - 1))
            vals = vals + torch.where(ok, g * wgt, torch.zeros_like(g))
        out.append(vals.permute(0, 3, 1, 2))
    return torch.cat(out, dim=1)


# -- network blocks ----------------------------------------------------------

class ResBlock(nn.Module):
    def __init__(self, cin, cout, stride=1, norm=True):
        super().__init__()
        mk = (lambda c: nn.InstanceNorm2d(c)) if norm else (lambda c: nn.Identity())
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.n1, self.n2 = mk(cout), mk(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride), mk(cout))

    def forward(self, x):
        y = F.relu(self.n1(self.conv1(x)))
        y = self.n2(self.conv2(y))
        return F.relu(y + (x if self.skip is None else self.skip(x)))


class Trunk(nn.Module):
    """Two stride-2 stages down to 1/4 resolution."""

    def __init__(self, width, norm):
        super().__init__()
        w0 = max(8, width * 3 // 4)
        self.stem = nn.Conv2d(1, w0, 7, 2, 3)
        self.stem_norm = nn.InstanceNorm2d(w0) if norm else nn.Identity()
        self.blocks = nn.Sequential(ResBlock(w0, w0, 1, norm), ResBlock(w0, width, 2, norm),
                                    ResBlock(width, width, 1, norm))

    def forward(self, x):
        return self.blocks(F.relu(self.stem_norm(self.stem(x))))


class FeatureEncoder(nn.Module):
    def __init__(self, width, dim):
        super().__init__()
        self.trunk = Trunk(width, norm=True)
        self.head = nn.Conv2d(width, dim, 1)

    def forward(self, x):
        return self.head(self.trunk(x))


class ContextEncoder(nn.Module):
    """Per scale: initial hidden state and the z/r/q gate biases."""

    def __init__(self, width, hidden, n_scales):
        super().__init__()
        self.trunk = Trunk(width, norm=False)
        self.down = nn.ModuleList(
            nn.Sequential(nn.Conv2d(width, width, 3, 2, 1), nn.ReLU(), nn.Conv2d(width, width, 3, 1, 1))
            for _ in range(n_scales - 1))
        self.heads = nn.ModuleList(nn.Conv2d(width, 4 * hidden, 3, 1, 1) for _ in range(n_scales))

    def forward(self, x):
        feats = [self.trunk(x)]
        for down in self.down:
            feats.append(F.relu(down(feats[-1])))
        return [head(f) for head, f in zip(self.heads, feats)]


class ConvGRU(nn.Module):
    def __init__(self, hidden, cin):
        super().__init__()
        self.convz = nn.Conv2d(hidden + cin, hidden, 3, 1, 1)
        self.convr = nn.Conv2d(hidden + cin, hidden, 3, 1, 1)
        self.convq = nn.Conv2d(hidden + cin, hidden, 3, 1, 1)

    def forward(self, h, cz, cr, cq, *inputs):
        x = torch.cat(inputs, dim=1)
        hx = torch.cat([h, x], dim=1)
        z = torch.sigmoid(self.convz(hx) + cz)
        r = torch.sigmoid(self.convr(hx) + cr)
        q = torch.tanh(self.convq(torch.cat([r * h, x], dim=1)) + cq)
        return (1 - z) * h + z * q


class MotionEncoder(nn.Module):
    def __init__(self, corr_ch, extra_ch, out_ch):
        super().__init__()
        self.c1 = nn.Conv2d(corr_ch, 48, 1)
        self.c2 = nn.Conv2d(48, 32, 3, 1, 1)
        self.d1 = nn.Conv2d(1 + extra_ch, 16, 7, 1, 3)
        self.d2 = nn.Conv2d(16, 16, 3, 1, 1)
        self.out = nn.Conv2d(48, out_ch - 1, 3, 1, 1)

    def forward(self, corr, disp, extra=None):
        c = F.relu(self.c2(F.relu(self.c1(corr))))
        dd = disp if extra is None else torch.cat([disp, extra], dim=1)
        d = F.relu(self.d2(F.relu(self.d1(dd))))
        return torch.cat([F.relu(self.out(torch.cat([c, d], dim=1))), disp], dim=1)


def _pool2x(x):
    return F.avg_pool2d(x, 3, 2, 1)


def _interp(x, like):
    return F.interpolate(x, size=like.shape[-2:], mode="bilinear", align_corners=True)


class UpdateBlock(nn.Module):
    """Multi-scale GRU: coarse states see the finer state pooled and the coarser one upsampled."""

    def __init__(self, cfg: MatcherConfig):
        super().__init__()
        hd, n = cfg.hidden_dim, len(cfg.context_scales)
        self.n = n
        self.motion = MotionEncoder(cfg.corr_channels, 1 if cfg.mode == "bino" else 0, 32)
        self.grus = nn.ModuleList()
        for s in range(n):
            cin = (32 if s == 0 else hd) + (hd if s + 1 < n else 0)
            self.grus.append(ConvGRU(hd, cin))
        self.delta = nn.Sequential(nn.Conv2d(hd, 64, 3, 1, 1), nn.ReLU(), nn.Conv2d(64, 1, 3, 1, 1))
        self.mask = nn.Sequential(nn.Conv2d(hd, 64, 3, 1, 1), nn.ReLU(),
                                  nn.Conv2d(64, cfg.downsample ** 2 * 9, 1))

    def forward(self, hidden, gates, corr, disp, extra=None):
        """One GRU sweep, coarsest scale first. ``hidden`` lists finest first."""
        h = list(hidden)
        n = self.n
        for s in reversed(range(1, n)):
            ins = [_pool2x(h[s - 1])]
            if s + 1 < n:
                ins.append(_interp(h[s + 1], h[s]))
            h[s] = self.grus[s](h[s], *gates[s], *ins)
        ins = [self.motion(corr, disp, extra)]
        if n > 1:
            ins.append(_interp(h[1], h[0]))
        h[0] = self.grus[0](h[0], *gates[0], *ins)
        return h


def gru_update(update: UpdateBlock, hidden, gates, corr, disp, extra=None):
    """Functional alias of ``UpdateBlock.forward``; returns the new hidden states."""
    return update(hidden, gates, corr, disp, extra)


def regress_delta(update: UpdateBlock, hidden) -> torch.Tensor:
    """Disparity increment at 1/4 resolution from the finest hidden state."""
    return update.delta(hidden[0])


def convex_upsample(disp, mask, factor):
    """Each fine pixel is a softmax-weighted mix of the 3x3 coarse neighbourhood."""
    b, _, h, w = disp.shape
    mask = mask.view(b, 1, 9, factor, factor, h, w).softmax(dim=2)
    up = F.unfold(factor * disp, [3, 3], padding=1).view(b, 1, 9, 1, 1, h, w)
    up = (mask * up).sum(dim=2)
    return up.permute(0, 1, 4, 2, 5, 3).reshape(b, 1, factor * h, factor * w)


class Matcher(nn.Module):
    def __init__(self, cfg: MatcherConfig = MatcherConfig()):
        super().__init__()
        self.cfg = cfg
        w, dim = cfg.encoder_width, cfg.feature_dim
        self.enc_lp = FeatureEncoder(w, dim) if cfg.mode in ("mono", "bino") else None
        self.enc_lr = FeatureEncoder(w, dim) if cfg.mode in ("stereo", "bino") else None
        self.context = ContextEncoder(w, cfg.hidden_dim, len(cfg.context_scales))
        self.update = UpdateBlock(cfg)

    # the module-level operations, as methods
    def encode_features(self, image, which):
        enc = self.enc_lp if which == "lp" else self.enc_lr
        if enc is None:
            raise ModeError(f"mode {self.cfg.mode} has no '{which}' encoder")
        return _check(enc(_normalize(image)), "features")

    def encode_context(self, image):
        return [_check(c, "context") for c in self.context(_normalize(image))]

    def _pyramid(self, f_left, f_ref):
        vol = build_cost_volume(f_left, f_ref) / math.sqrt(f_left.shape[1])
        if self.cfg.causal_candidates:
            n = vol.shape[-1]
            keep = torch.ones(n, n, dtype=torch.bool, device=vol.device).tril()
            vol = vol * keep
        return build_pyramid(vol, self.cfg.pyramid_levels)

    def forward(self, left, pattern=None, right=None, ratio=None, iters=None):
        """Disparity sequence at full resolution for (B, 1, H, W) inputs in [0, 1].

        ``ratio`` (B,) is baseline_lp / baseline_lr and is required in bino mode.
        """
        cfg = self.cfg
        if iters is None:
            iters = cfg.iters_train if self.training else cfg.iters_eval
        need = {"mono": ("pattern",), "stereo": ("right",), "bino": ("pattern", "right", "ratio")}
        got = {"pattern": pattern, "right": right, "ratio": ratio}
        missing = [k for k in need[cfg.mode] if got[k] is None]
        if missing:
            raise ModeError(f"mode {cfg.mode} requires {', '.join(missing)}")
        h0, w0 = left.shape[-2:]
        m = cfg.pad_multiple
        ph, pw = (-h0) % m, (-w0) % m
        pad = (lambda t: F.pad(t, (0, pw, 0, ph))) if (ph or pw) else (lambda t: t)
        left = pad(left)

        pyramids = []
        if cfg.mode in ("mono", "bino"):
            pyramids.append(self._pyramid(self.encode_features(left, "lp"),
                                          self.encode_features(pad(pattern), "lp")))
        if cfg.mode in ("stereo", "bino"):
            pyramids.append(self._pyramid(self.encode_features(left, "lr"),
                                          self.encode_features(pad(right), "lr")))
        ctx = self.encode_context(left)
        hd = cfg.hidden_dim
        hidden = [torch.tanh(c[:, :hd]) for c in ctx]
        gates = [torch.split(c[:, hd:], hd, dim=1) for c in ctx]

        b, _, hq, wq = hidden[0].shape
        disp = torch.zeros(b, 1, hq, wq, dtype=left.dtype, device=left.device)
        extra = None
        if cfg.mode == "bino":
            r = torch.as_tensor(ratio, dtype=left.dtype, device=left.device).view(-1, 1, 1, 1)
            extra = r.expand(b, 1, hq, wq)
        seq = []
        for _ in range(iters):
            if cfg.mode == "bino":
                # the state is the left-right disparity; the pattern is matched at its scaled copy
                corr = torch.cat([lookup(pyramids[0], disp * r, cfg.lookup_radius),
                                  lookup(pyramids[1], disp, cfg.lookup_radius)], dim=1)
            else:
                corr = lookup(pyramids[0], disp, cfg.lookup_radius)
            hidden = self.update(hidden, gates, corr, disp, extra)
            disp = disp + regress_delta(self.update, hidden)
            seq.append(self._upsample(disp, hidden[0])[..., :h0, :w0])
        _check(seq[-1], "disparity")
        return seq

    def _upsample(self, disp, h):
        f = self.cfg.downsample
        if self.cfg.upsample == "bilinear":
            return f * F.interpolate(disp, scale_factor=f, mode="bilinear", align_corners=False)
        return convex_upsample(disp, 0.25 * self.update.mask(h), f)


def _normalize(img):
    return 2.0 * img - 1.0


def _check(t, what):
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite {what}")
    return t


def encode_features(model: Matcher, image, which):
    return model.encode_features(image, which)


def encode_context(model: Matcher, image):
    return model.encode_context(image)


# -- loss ----------------------------------------------------------------------

def sequence_loss(seq, d_gt, mask, gamma: float = 0.9) -> torch.Tensor:
    """``sum_t gamma^(N-t) * mean_valid |d_t - d_gt|`` with t = 1..N."""
    if not seq:
        raise ValueError("empty prediction sequence")
    mask = mask.to(dtype=torch.bool)
    if not bool(mask.any()):
        raise ValueError("ground-truth mask is empty")
    n = len(seq)
    w = mask.to(seq[0].dtype)
    denom = w.sum()
    loss = 0
    for t, d in enumerate(seq, start=1):
        loss = loss + gamma ** (n - t) * ((d - d_gt).abs() * w).sum() / denom
    return loss


# -- Sample plumbing -------------------------------------------------------------

def mode_baseline(sample, mode: str) -> float:
    return sample.rig.baseline_lp if mode == "mono" else sample.rig.baseline_lr


def mode_target(sample, mode: str) -> DisparityMap:
    return sample.disp_gt_lp if mode == "mono" else sample.disp_gt_lr


def sample_inputs(samples, dtype=torch.float32) -> dict:
    """Stack a list of Samples into the keyword inputs of ``Matcher.forward``."""
    t = lambda arrs: torch.as_tensor(np.stack(arrs)[:, None], dtype=dtype)
    return {
        "left": t([s.ir_left for s in samples]),
        "right": t([s.ir_right for s in samples]),
        "pattern": t([s.pattern_ref.intensities for s in samples]),
        "ratio": torch.as_tensor([s.rig.baseline_lp / s.rig.baseline_lr for s in samples], dtype=dtype),
    }


def forward(sample, model: Matcher, iters: int | None = None) -> dict:
    """Run one Sample: ``{'sequence': [(H, W) arrays], 'disparity': DisparityMap, 'depth': DepthMap}``.

    ``depth`` is D_init, triangulated with the baseline of the model's mode.
    """
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            seq = model(**sample_inputs([sample], next(model.parameters()).dtype), iters=iters)
    finally:
        model.train(was)
    seq = [s[0, 0].double().numpy() for s in seq]
    disp = DisparityMap(seq[-1], np.isfinite(seq[-1]))
    depth = disparity_to_depth(disp, sample.rig.focal, mode_baseline(sample, model.cfg.mode))
    return {"sequence": seq, "disparity": disp, "depth": depth}


def predict(model: Matcher, sample, iters: int | None = None) -> tuple[DisparityMap, DepthMap]:
    out = forward(sample, model, iters)
    return out["disparity"], out["depth"]
