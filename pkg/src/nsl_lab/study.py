"""The desk-scale experiment: data, three stage-1 matchers, stage-2 refiners, baselines, metrics.

Every artefact lives under ``<cache>/`` next to a fingerprint of the config
that produced it, so reruns reuse whatever is still valid:

    data/                       dataset tree
    stage1-<mode>/final.ckpt    matcher + loss_curve.csv + info.json
    stage2-<mode>/final.ckpt    refiner trained on that matcher's D_init
    results.json                per-sample metrics of every method
"""
from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import torch

from nsl_lab.classical import BlockMatchConfig, Metric, block_match, remove_depth_outliers
from nsl_lab.config import RunConfig, TMConfig, fingerprint
from nsl_lab.dataset_io import DatasetManifest, generate_dataset, load_manifest
from nsl_lab.geometry import DepthMap, DisparityMap, disparity_to_depth
from nsl_lab.metrics import MetricReport, aggregate, compute_metrics
from nsl_lab.neural_matching import Matcher, forward, mode_baseline, mode_target
from nsl_lab.refinement import refine
from nsl_lab.training import (SampleTensors, load_matcher, load_refiner, stage1_depths,
                              train_stage1, train_stage2)

# dense evaluation of learned outputs: disparities below this floor are clamped,
# not dropped, so a network cannot improve its score by predicting "no match"
MIN_DISPARITY = 1e-2
MIN_DEPTH = 1e-3


def _log_default(msg):
    print(msg, flush=True)


# -- baselines and evaluation helpers -------------------------------------------

def tm_baseline(sample, tm: TMConfig = TMConfig()) -> tuple[DisparityMap, DepthMap]:
    """Template matching of the left IR image against the pattern, with depth outlier removal."""
    cfg = BlockMatchConfig(window=tm.window, max_disp=tm.max_disp, metric=Metric(tm.metric.upper()),
                           lrc_tol=tm.lrc_tol)
    d = block_match(sample.ir_left, sample.pattern_ref.intensities, cfg)
    z = disparity_to_depth(d, sample.rig.focal, sample.rig.baseline_lp)
    keep = remove_depth_outliers(z, tm.grad_thresh)
    return DisparityMap(d.values, keep), DepthMap(z.values, keep)


def dense_depth_from_disparity(d: np.ndarray, f: float, B: float) -> np.ndarray:
    return f * B / np.maximum(d, MIN_DISPARITY)


def evaluate_prediction(sample, depth: np.ndarray, mode: str, valid=None,
                        thresholds=None) -> MetricReport:
    """Metrics of a depth prediction against the sample's GT; EPE in ``mode`` disparity units.

    ``valid`` restricts evaluation (classical methods); otherwise every GT
    pixel counts.
    """
    gt = sample.depth_gt
    mask = gt.mask if valid is None else gt.mask & valid
    depth = np.maximum(np.where(np.isfinite(depth), depth, MIN_DEPTH), MIN_DEPTH)
    f, B = sample.rig.focal, mode_baseline(sample, mode)
    d_gt = mode_target(sample, mode)
    kw = {} if thresholds is None else {"thresholds": tuple(thresholds)}
    return compute_metrics(DepthMap(depth, mask), gt, DisparityMap(f * B / depth, mask), d_gt, **kw)


# -- cached stages -------------------------------------------------------------------

def _fp_data(cfg: RunConfig) -> dict:
    return {"seed": cfg.seed, "n_train": cfg.n_train, "dataset": cfg.dataset.to_dict()}


def _fp_stage1(cfg: RunConfig, mode: str) -> dict:
    return {"data": _fp_data(cfg), "matcher": cfg.with_mode(mode).to_dict(),
            "optim": cfg.stage1.to_dict()}


def _fp_stage2(cfg: RunConfig, mode: str) -> dict:
    return {"stage1": _fp_stage1(cfg, mode), "refiner": cfg.refiner.to_dict(),
            "optim": cfg.stage2.to_dict()}


def _is_current(d: Path, fp: dict, artefact: str) -> bool:
    f = d / "fingerprint.json"
    return (d / artefact).exists() and f.exists() and json.loads(f.read_text()) == fp


def _mark(d: Path, fp: dict, info: dict | None = None):
    (d / "fingerprint.json").write_text(json.dumps(fp, indent=1, sort_keys=True) + "\n")
    if info is not None:
        (d / "info.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")


def _write_timing(d: Path, seconds: float):
    # wall time is kept apart from info.json so every other artefact stays byte-reproducible
    d.mkdir(parents=True, exist_ok=True)
    (d / "timing.json").write_text(json.dumps({"train_seconds": seconds}) + "\n")


def train_seconds(root, name: str) -> float | None:
    """Recorded wall time of ``<root>/<name>`` (e.g. ``stage1-mono``), or None."""
    p = Path(root) / name / "timing.json"
    return json.loads(p.read_text())["train_seconds"] if p.is_file() else None


def ensure_dataset(cfg: RunConfig, root: Path, jobs: int = 1, log=_log_default) -> DatasetManifest:
    d = root / "data"
    fp = _fp_data(cfg)
    if _is_current(d, fp, "manifest.json"):
        return load_manifest(d)
    log(f"generating dataset in {d}")
    m = generate_dataset(cfg.n_train, cfg.seed, cfg.dataset, d, jobs=jobs)
    _mark(d, fp)
    return m


def ensure_stage1(cfg: RunConfig, mode: str, root: Path, manifest: DatasetManifest,
                  log=_log_default) -> tuple[Matcher, dict]:
    d = root / f"stage1-{mode}"
    fp = _fp_stage1(cfg, mode)
    if _is_current(d, fp, "final.ckpt"):
        model, _ = load_matcher(d / "final.ckpt")
        return model, json.loads((d / "info.json").read_text())
    log(f"training stage-1 {mode}")
    data = SampleTensors(manifest.samples("train"))
    opt = cfg.stage1
    t0 = time.perf_counter()
    model, hist = train_stage1(data, cfg.with_mode(mode), opt, d,
                               log=lambda s: log(f"[{mode}] {s}"))
    _write_timing(d, time.perf_counter() - t0)
    info = {"steps": opt.steps,
            "initial_loss": hist[0]["loss"], "final_loss": hist[-1]["loss"],
            "max_clipped_grad_norm": max(h["grad_norm_clipped"] for h in hist)}
    _mark(d, fp, info)
    return model, info


def ensure_stage2(cfg: RunConfig, mode: str, root: Path, manifest: DatasetManifest,
                  matcher: Matcher, log=_log_default):
    d = root / f"stage2-{mode}"
    fp = _fp_stage2(cfg, mode)
    if _is_current(d, fp, "final.ckpt"):
        model, _ = load_refiner(d / "final.ckpt")
        return model, json.loads((d / "info.json").read_text())
    log(f"training stage-2 on {mode} D_init")
    samples = list(manifest.samples("train"))
    before = {k: v.clone() for k, v in matcher.state_dict().items()}
    t0 = time.perf_counter()
    model, hist = train_stage2(samples, matcher, cfg.refiner, cfg.stage2, d,
                               log=lambda s: log(f"[{mode}/s2] {s}"))
    frozen = all(torch.equal(before[k], v) for k, v in matcher.state_dict().items())
    _write_timing(d, time.perf_counter() - t0)
    info = {"steps": cfg.stage2.steps,
            "initial_loss": hist[0]["loss"], "final_loss": hist[-1]["loss"],
            "stage1_unchanged": frozen}
    _mark(d, fp, info)
    return model, info


# -- evaluation ------------------------------------------------------------------------

def _record(sample, split, method, mode, stage, report: MetricReport, coverage: float) -> dict:
    return {"id": sample.meta.get("id", ""), "split": split, "pattern": sample.pattern_id,
            "difficulty": sample.meta.get("difficulty", ""), "method": method, "mode": mode,
            "stage": stage, "coverage": coverage, "metrics": report.to_dict()}


def evaluate_all(cfg: RunConfig, manifest: DatasetManifest, matchers: dict, refiners: dict,
                 log=_log_default) -> list[dict]:
    thr = cfg.eval.thresholds
    rows = []
    torch.manual_seed(cfg.seed)
    untrained = {m: Matcher(cfg.with_mode(m)).eval() for m in matchers}
    for split in ("val", "test"):
        recs = manifest.split(split)
        for rec in recs:
            s = _read(manifest, rec)
            n_gt = max(1, int(s.depth_gt.mask.sum()))
            _, z_tm = tm_baseline(s, cfg.tm)
            if (z_tm.mask & s.depth_gt.mask).any():
                rows.append(_record(s, split, "tm", "mono", 0,
                                    evaluate_prediction(s, z_tm.values, "mono", z_tm.mask, thr),
                                    float((z_tm.mask & s.depth_gt.mask).sum()) / n_gt))
            for mode, model in matchers.items():
                f, B = s.rig.focal, mode_baseline(s, mode)
                out = forward(s, model)
                d_init = dense_depth_from_disparity(out["disparity"].values, f, B)
                rows.append(_record(s, split, "matcher", mode, 1,
                                    evaluate_prediction(s, d_init, mode, None, thr), 1.0))
                if split == "val":
                    u = forward(s, untrained[mode])
                    rows.append(_record(s, split, "untrained", mode, 1, evaluate_prediction(
                        s, dense_depth_from_disparity(u["disparity"].values, f, B), mode, None, thr), 1.0))
                if mode in refiners:
                    z = refine(s.ir_left, out["depth"], refiners[mode])
                    rows.append(_record(s, split, "refiner", mode, 2,
                                        evaluate_prediction(s, z.values, mode, None, thr), 1.0))
        log(f"evaluated {split}: {len(recs)} samples")
    return rows


def _read(manifest, rec):
    from nsl_lab.dataset_io import read_sample
    return read_sample(manifest.sample_path(rec))


def run_study(cfg: RunConfig = RunConfig(), jobs: int = 1, log=_log_default, stage2_modes=None) -> dict:
    """Run (or resume) the whole study and return the results document."""
    torch.set_num_threads(max(1, jobs))
    root = cfg.cache_root()
    root.mkdir(parents=True, exist_ok=True)
    manifest = ensure_dataset(cfg, root, jobs, log)
    matchers, infos = {}, {}
    for mode in cfg.modes:
        matchers[mode], infos[f"stage1-{mode}"] = ensure_stage1(cfg, mode, root, manifest, log)
    refiners = {}
    for mode in (cfg.modes if stage2_modes is None else stage2_modes):
        refiners[mode], infos[f"stage2-{mode}"] = ensure_stage2(cfg, mode, root, manifest,
                                                                 matchers[mode], log)
    fp = {"stage1": {m: _fp_stage1(cfg, m) for m in matchers},
          "stage2": {m: _fp_stage2(cfg, m) for m in refiners},
          "tm": cfg.tm.__dict__, "eval": cfg.to_dict()["eval"]}
    out = root / "results.json"
    if out.exists():
        doc = json.loads(out.read_text())
        if doc.get("fingerprint") == fingerprint(fp):
            return doc
    rows = evaluate_all(cfg, manifest, matchers, refiners, log)
    # the cache location is not part of the result
    config = {k: v for k, v in cfg.to_dict().items() if k != "cache"}
    doc = {"fingerprint": fingerprint(fp), "config": config, "training": infos, "rows": rows}
    out.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc


# -- summaries -------------------------------------------------------------------

def select(rows, **kw) -> list[dict]:
    return [r for r in rows if all(r.get(k) == v for k, v in kw.items())]


def summarize(rows, weighting: str = "per_image_mean") -> MetricReport:
    return aggregate([MetricReport.from_dict(r["metrics"]) for r in rows], weighting)


def ablation_rows(doc: dict, split: str = "val", per_pattern: bool = True) -> list[tuple[str, MetricReport]]:
    """(label, report) pairs: TM, then every mode x stage, optionally split by pattern."""
    rows = doc["rows"]
    weighting = doc["config"]["eval"]["weighting"]
    out = []
    variants = [("TM (IR+pattern)", dict(method="tm"))]
    for mode in doc["config"]["modes"]:
        variants.append((f"{mode} stage-1", dict(method="matcher", mode=mode)))
        if select(rows, method="refiner", mode=mode):
            variants.append((f"{mode} stage-2", dict(method="refiner", mode=mode)))
    for label, kw in variants:
        sel = select(rows, split=split, **kw)
        if not sel:
            continue
        out.append((label, summarize(sel, weighting)))
        if per_pattern:
            for pat in sorted({r["pattern"] for r in sel}):
                out.append((f"  {label} / {pat}", summarize(select(sel, pattern=pat), weighting)))
    return out
