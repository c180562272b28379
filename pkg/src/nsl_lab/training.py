"""Training loops for both stages, plus checkpoint (de)serialization of the models."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from nsl_lab._random import stream
from nsl_lab.checkpoint import load_checkpoint, save_checkpoint
from nsl_lab.neural_matching import Matcher, MatcherConfig, NonFiniteError, sequence_loss


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss or gradient; ``checkpoint`` holds the last finite state."""

    def __init__(self, msg, step, checkpoint=None):
        super().__init__(msg)
        self.step = step
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 2e-4
    steps: int = 3000
    batch_size: int = 4
    weight_decay: float = 1e-5
    clip_norm: float = 0.8
    pct_start: float = 0.05
    crop: tuple[int, int] = (64, 128)
    jitter: bool = True
    ckpt_every: int = 500
    seed: int = 0
    # stage 2 only
    warmup_steps: int = 100
    backbone_lr_ratio: float = 0.1

    def __post_init__(self):
        if self.lr <= 0 or self.steps < 1 or self.batch_size < 1:
            raise ValueError("lr, steps and batch_size must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        h, w = self.crop
        if h % 16 or w % 16 or h < 16 or w < 16:
            raise ValueError("crop sides must be positive multiples of 16")
        object.__setattr__(self, "crop", (int(h), int(w)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop"] = list(self.crop)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown optimizer config keys: {sorted(unknown)}")
        d = dict(d)
        if "crop" in d:
            d["crop"] = tuple(d["crop"])
        return cls(**d)


class SampleTensors:
    """A list of Samples packed into float32 tensors of shape (N, 1, H, W)."""

    def __init__(self, samples):
        samples = list(samples)
        if not samples:
            raise ValueError("dataset is empty")
        st = lambda key: torch.as_tensor(np.stack([key(s) for s in samples])[:, None],
                                         dtype=torch.float32)
        self.left = st(lambda s: s.ir_left)
        self.right = st(lambda s: s.ir_right)
        self.pattern = st(lambda s: s.pattern_ref.intensities)
        self.disp_lp = st(lambda s: np.where(s.disp_gt_lp.mask, s.disp_gt_lp.values, 0))
        self.disp_lr = st(lambda s: np.where(s.disp_gt_lr.mask, s.disp_gt_lr.values, 0))
        self.depth = st(lambda s: np.where(s.depth_gt.mask, s.depth_gt.values, 0))
        self.mask = st(lambda s: s.depth_gt.mask).bool()
        rig = lambda f: torch.tensor([f(s.rig) for s in samples], dtype=torch.float32)
        self.focal = rig(lambda r: r.focal)
        self.b_lp = rig(lambda r: r.baseline_lp)
        self.b_lr = rig(lambda r: r.baseline_lr)
        self.pattern_ids = [s.pattern_id for s in samples]

    def __len__(self):
        return self.left.shape[0]

    def batch(self, idx, crop=None, rng=None, jitter=False) -> dict:
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        out = {k: getattr(self, k)[idx] for k in
               ("left", "right", "pattern", "disp_lp", "disp_lr", "depth", "mask")}
        out.update(focal=self.focal[idx], b_lp=self.b_lp[idx], b_lr=self.b_lr[idx])
        out["ratio"] = out["b_lp"] / out["b_lr"]
        if crop is not None:
            ch, cw = crop
            h, w = out["left"].shape[-2:]
            y = int(rng.integers(0, h - ch + 1))
            x = int(rng.integers(0, w - cw + 1))
            for k in ("left", "right", "pattern", "disp_lp", "disp_lr", "depth", "mask"):
                out[k] = out[k][..., y:y + ch, x:x + cw]
        if jitter:
            n = len(idx)
            for k in ("left", "right"):
                gain = torch.as_tensor(rng.uniform(0.8, 1.2, (n, 1, 1, 1)), dtype=torch.float32)
                bias = torch.as_tensor(rng.uniform(-0.05, 0.05, (n, 1, 1, 1)), dtype=torch.float32)
                out[k] = (out[k] * gain + bias).clamp(0, 1)
        return out


def target_for(batch: dict, mode: str):
    return batch["disp_lp"] if mode == "mono" else batch["disp_lr"]


def matcher_inputs(batch: dict) -> dict:
    return {k: batch[k] for k in ("left", "right", "pattern", "ratio")}


# -- checkpoints ---------------------------------------------------------------

def _state_arrays(model: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def save_matcher(path, model: Matcher, meta: dict | None = None) -> Path:
    return save_checkpoint(path, _state_arrays(model),
                           {"kind": "matcher", "matcher": model.cfg.to_dict()}, meta)


def load_matcher(path) -> tuple[Matcher, dict]:
    arrays, config, meta = load_checkpoint(path)
    if config.get("kind") != "matcher":
        raise ValueError(f"{path} is not a stage-1 checkpoint")
    model = Matcher(MatcherConfig.from_dict(config["matcher"]))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    model.eval()
    return model, meta


def _set_determinism(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _global_norm(params) -> float:
    norms = [p.grad.detach().norm() for p in params if p.grad is not None]
    return float(torch.linalg.vector_norm(torch.stack(norms))) if norms else 0.0


def _write_curve(path, history):
    if not history:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(history[0]))
        w.writeheader()
        w.writerows(history)


def run_loop(model, params_groups, loss_fn: Callable, data: SampleTensors, opt: OptimConfig,
             schedule: str, save: Callable, out_dir=None, log=None):
    """Shared optimizer loop. ``loss_fn(batch) -> scalar``; ``save(path, meta)`` writes a checkpoint."""
    optim = torch.optim.AdamW(params_groups, lr=opt.lr, weight_decay=opt.weight_decay)
    if schedule == "onecycle":
        sched = torch.optim.lr_scheduler.OneCycleLR(
            optim, max_lr=[g["lr"] for g in optim.param_groups], total_steps=opt.steps + 1,
            pct_start=opt.pct_start, cycle_momentum=False, anneal_strategy="linear")
    else:
        warm = max(1, opt.warmup_steps)
        # linear ramp: the k-th step (1-based) runs at k / warmup of the plateau rate
        sched = torch.optim.lr_scheduler.LambdaLR(optim, lambda s: min(1.0, (s + 1) / warm))
    params = [p for g in optim.param_groups for p in g["params"]]
    rng = stream(opt.seed, "batches")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    history = []
    n = len(data)
    perm, pos = rng.permutation(n), 0
    model.train()
    t0 = time.perf_counter()
    for step in range(1, opt.steps + 1):
        if pos + opt.batch_size > n:
            perm, pos = rng.permutation(n), 0
        idx = perm[pos:pos + opt.batch_size] if n >= opt.batch_size else rng.integers(0, n, opt.batch_size)
        pos += opt.batch_size
        h, w = data.left.shape[-2:]
        crop = opt.crop if opt.crop[0] <= h and opt.crop[1] <= w and opt.crop != (h, w) else None
        batch = data.batch(idx, crop, rng, opt.jitter)
        try:
            loss = loss_fn(batch)
        except NonFiniteError as exc:
            loss = torch.tensor(float("nan"))
            reason = str(exc)
        else:
            reason = "non-finite loss"
        if not torch.isfinite(loss):
            ck = _abort_checkpoint(save, out_dir, step, opt)
            raise TrainingAborted(f"{reason} at step {step}", step, ck)
        optim.zero_grad(set_to_none=True)
        loss.backward()
        pre = float(torch.nn.utils.clip_grad_norm_(params, opt.clip_norm))
        if not math.isfinite(pre):
            ck = _abort_checkpoint(save, out_dir, step, opt)
            raise TrainingAborted(f"non-finite gradient at step {step}", step, ck)
        post = _global_norm(params)
        lr = optim.param_groups[-1]["lr"]
        optim.step()
        sched.step()
        history.append({"step": step, "loss": float(loss.detach()), "grad_norm": pre,
                        "grad_norm_clipped": post, "lr": lr})
        if log and (step % 50 == 0 or step == 1):
            log(f"step {step}/{opt.steps} loss {float(loss.detach()):.4f} |g| {pre:.3f} "
                f"lr {lr:.2e} {time.perf_counter() - t0:.0f}s")
        if out_dir is not None and opt.ckpt_every and step % opt.ckpt_every == 0:
            save(out_dir / "last.ckpt", {"step": step, "seed": opt.seed})
    if out_dir is not None:
        save(out_dir / "final.ckpt", {"step": opt.steps, "seed": opt.seed})
        _write_curve(out_dir / "loss_curve.csv", history)
    model.eval()
    return history


def _abort_checkpoint(save, out_dir, step, opt):
    # parameters have not been touched by this step yet, so they are the last finite state
    if out_dir is None:
        return None
    path = out_dir / "aborted.ckpt"
    save(path, {"step": step - 1, "seed": opt.seed, "aborted": True})
    return path


def train_stage1(data, cfg: MatcherConfig, opt: OptimConfig = OptimConfig(), out_dir=None,
                 log=None, model: Matcher | None = None):
    """Train a matcher from scratch (or continue ``model``). Returns ``(model, history)``."""
    if not isinstance(data, SampleTensors):
        data = SampleTensors(data)
    _set_determinism(opt.seed)
    if model is None:
        model = Matcher(cfg)
    cfg = model.cfg

    def loss_fn(batch):
        seq = model(**matcher_inputs(batch), iters=cfg.iters_train)
        return sequence_loss(seq, target_for(batch, cfg.mode), batch["mask"], cfg.loss_gamma)

    save = lambda path, meta: save_matcher(path, model, {**meta, "optim": opt.to_dict()})
    history = run_loop(model, [{"params": list(model.parameters()), "lr": opt.lr}], loss_fn,
                       data, opt, "onecycle", save, out_dir, log)
    return model, history


# -- stage 2 -------------------------------------------------------------------

def save_refiner(path, model, matcher_digest: str = "", meta: dict | None = None) -> Path:
    return save_checkpoint(path, _state_arrays(model),
                           {"kind": "refiner", "refiner": model.cfg.to_dict(),
                            "stage1_digest": matcher_digest}, meta)


def load_refiner(path):
    from nsl_lab.refinement import Refiner, RefinerConfig

    arrays, config, meta = load_checkpoint(path)
    if config.get("kind") != "refiner":
        raise ValueError(f"{path} is not a stage-2 checkpoint")
    model = Refiner(RefinerConfig.from_dict(config["refiner"]))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    model.eval()
    return model, meta


def stage1_depths(matcher: Matcher, samples) -> list:
    """D_init of every sample from the frozen matcher, as DepthMaps."""
    from nsl_lab.neural_matching import forward

    return [forward(s, matcher)["depth"] for s in samples]


def train_stage2(samples, matcher: Matcher, cfg=None, opt: OptimConfig = OptimConfig(),
                 out_dir=None, log=None, d_init=None, matcher_digest: str = ""):
    """Train a refiner on D_init from the frozen ``matcher``. Returns ``(model, history)``.

    ``d_init`` may carry precomputed stage-1 depths (one DepthMap per sample).
    """
    from nsl_lab.refinement import Refiner, RefinerConfig, prompt_inputs, stage2_loss

    samples = list(samples)
    cfg = cfg or RefinerConfig()
    matcher.eval()
    for p in matcher.parameters():
        p.requires_grad_(False)
    if d_init is None:
        d_init = stage1_depths(matcher, samples)
    data = SampleTensors(samples)
    filled, valid = zip(*(prompt_inputs(d) for d in d_init))
    data.init = torch.as_tensor(np.stack(filled)[:, None], dtype=torch.float32)
    data.init_valid = torch.as_tensor(np.stack(valid)[:, None])

    _set_determinism(opt.seed)
    model = Refiner(cfg)
    groups = [{"params": model.backbone_parameters(), "lr": opt.lr * opt.backbone_lr_ratio},
              {"params": model.head_parameters(), "lr": opt.lr}]
    base_batch = data.batch

    def batch_with_init(idx, crop=None, rng=None, jitter=False):
        # crop the prompt together with the images
        out = base_batch(idx, None, None, False)
        idx_t = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        out["init"], out["init_valid"] = data.init[idx_t], data.init_valid[idx_t]
        if crop is not None:
            ch, cw = crop
            h, w = out["left"].shape[-2:]
            y = int(rng.integers(0, h - ch + 1))
            x = int(rng.integers(0, w - cw + 1))
            for k in ("left", "depth", "mask", "init", "init_valid"):
                out[k] = out[k][..., y:y + ch, x:x + cw]
        if jitter:
            n = len(idx)
            gain = torch.as_tensor(rng.uniform(0.8, 1.2, (n, 1, 1, 1)), dtype=torch.float32)
            bias = torch.as_tensor(rng.uniform(-0.05, 0.05, (n, 1, 1, 1)), dtype=torch.float32)
            out["left"] = (out["left"] * gain + bias).clamp(0, 1)
        return out

    data.batch = batch_with_init

    def loss_fn(batch):
        pred = model(batch["left"], batch["init"], batch["init_valid"])
        return stage2_loss(pred, batch["depth"], batch["mask"], cfg.alpha)

    save = lambda path, meta: save_refiner(path, model, matcher_digest,
                                           {**meta, "optim": opt.to_dict()})
    history = run_loop(model, groups, loss_fn, data, opt, "warmup", save, out_dir, log)
    return model, history
