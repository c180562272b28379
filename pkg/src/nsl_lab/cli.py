"""``nsl-lab`` command line entry point.

Exit codes: 0 success, 2 configuration or validation error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from nsl_lab.config import ConfigError, RunConfig, load_config

log = logging.getLogger("nsl_lab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class UsageError(ValueError):
    """Bad arguments detected after parsing; maps to exit code 2."""


# -- input discovery ---------------------------------------------------------------

def sample_dirs(path, split: str | None = None) -> list[Path]:
    """A sample directory, a dataset root (manifest order) or a directory of sample directories."""
    from nsl_lab.dataset_io import load_manifest

    path = Path(path)
    if (path / "meta.json").is_file():
        return [path]
    if (path / "manifest.json").is_file():
        m = load_manifest(path)
        return [m.sample_path(r) for r in m.records if split is None or r["split"] == split]
    if path.is_dir():
        found = sorted(p for p in path.iterdir() if (p / "meta.json").is_file())
        if found:
            return found
    raise UsageError(f"{path}: no samples found")


def _sample_id(d: Path) -> str:
    return d.name


def _write_outputs(out: Path, depth, disparity=None, mask=None):
    from nsl_lab.dataset_io import write_mask_png, write_pfm

    out.mkdir(parents=True, exist_ok=True)
    write_pfm(out / "depth.pfm", depth)
    if disparity is not None:
        write_pfm(out / "disparity.pfm", disparity)
    if mask is not None:
        write_mask_png(out / "mask.png", mask)


# -- subcommands ----------------------------------------------------------------------

def cmd_gen_pattern(cfg: RunConfig, args):
    from nsl_lab.dataset_io import write_png16
    from nsl_lab.patterns import PatternSpec, generate_pattern

    params = json.loads(args.params) if args.params else {}
    spec = PatternSpec(args.kind, args.width or cfg.dataset.width,
                       args.height or cfg.dataset.height, cfg.seed, params)
    pat = generate_pattern(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_png16(out, pat.intensities)
    out.with_suffix(".json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")
    log.info("wrote %s", out)


def cmd_gen_data(cfg: RunConfig, args):
    from nsl_lab.dataset_io import generate_dataset

    out = Path(args.out) if args.out else cfg.cache_root() / "data"
    m = generate_dataset(cfg.n_train, cfg.seed, cfg.dataset, out, jobs=args.jobs)
    log.info("wrote %d samples to %s", len(m.records), out)


def _train_samples(data, split="train"):
    from nsl_lab.dataset_io import load_manifest

    return list(load_manifest(data).samples(split))


def cmd_train_stage1(cfg: RunConfig, args):
    from nsl_lab.training import train_stage1

    mcfg = replace(cfg.matcher, mode=args.mode) if args.mode else cfg.matcher
    samples = _train_samples(args.data)
    out = Path(args.out)
    opt = replace(cfg.stage1, seed=cfg.seed)
    train_stage1(samples, mcfg, opt, out, log=log.info)
    log.info("checkpoint: %s", out / "final.ckpt")


def cmd_train_stage2(cfg: RunConfig, args):
    from nsl_lab.checkpoint import file_digest
    from nsl_lab.training import load_matcher, train_stage2

    matcher, _ = load_matcher(args.stage1)
    samples = _train_samples(args.data)
    out = Path(args.out)
    opt = replace(cfg.stage2, seed=cfg.seed)
    train_stage2(samples, matcher, cfg.refiner, opt, out, log=log.info,
                 matcher_digest=file_digest(args.stage1))
    log.info("checkpoint: %s", out / "final.ckpt")


def cmd_infer(cfg: RunConfig, args):
    from nsl_lab.dataset_io import read_sample
    from nsl_lab.neural_matching import forward
    from nsl_lab.refinement import refine
    from nsl_lab.training import load_matcher, load_refiner

    matcher, _ = load_matcher(args.ckpt)
    if args.mode and args.mode != matcher.cfg.mode:
        raise UsageError(f"checkpoint was trained in {matcher.cfg.mode} mode, not {args.mode}")
    refiner = None
    if args.stage == 2:
        if not args.refiner:
            raise UsageError("--stage 2 needs --refiner")
        refiner, _ = load_refiner(args.refiner)
    for d in sample_dirs(args.input, args.split):
        s = read_sample(d)
        res = forward(s, matcher)
        depth = res["depth"]
        if refiner is not None:
            depth = refine(s.ir_left, depth, refiner)
        _write_outputs(Path(args.out) / _sample_id(d), np.where(depth.mask, depth.values, 0.0),
                       res["disparity"].values)
    log.info("predictions in %s", args.out)


def cmd_baseline_tm(cfg: RunConfig, args):
    from nsl_lab.dataset_io import read_sample
    from nsl_lab.study import tm_baseline

    for d in sample_dirs(args.input, args.split):
        s = read_sample(d)
        disp, depth = tm_baseline(s, cfg.tm)
        _write_outputs(Path(args.out) / _sample_id(d), np.where(depth.mask, depth.values, 0.0),
                       np.where(disp.mask, disp.values, 0.0), depth.mask)
    log.info("TM outputs in %s", args.out)


def cmd_pseudo_gt(cfg: RunConfig, args):
    from nsl_lab.classical import pseudo_ground_truth
    from nsl_lab.dataset_io import read_sample
    from nsl_lab.patterns import alacarte_stack
    from nsl_lab.simulator import RenderConfig, Scene, View, render_ir

    pg = cfg.pseudo_gt
    for d in sample_dirs(args.input, args.split):
        s = read_sample(d)
        if "scene" not in s.meta:
            raise UsageError(f"{d}: sample carries no scene description")
        scene = Scene.from_dict(s.meta["scene"])
        h, w = s.shape
        refs = alacarte_stack(w, h, pg.n_patterns, pg.pattern_seed)
        caps = [render_ir(scene, RenderConfig(s.rig, p, s.meta.get("noise_sigma", 0.0),
                                              s.meta.get("gamma", 1.0), s.seed + 1 + k), View.LEFT)
                for k, p in enumerate(refs)]
        disp, depth = pseudo_ground_truth(caps, [p.intensities for p in refs], pg.max_disp,
                                          s.rig.focal, s.rig.baseline_lp, pg.lrc_tol,
                                          pg.grad_thresh, pg.step)
        _write_outputs(Path(args.out) / _sample_id(d), np.where(depth.mask, depth.values, 0.0),
                       np.where(disp.mask, disp.values, 0.0), depth.mask)
    log.info("pseudo ground truth in %s", args.out)


def load_prediction(pred_root: Path, sample_id: str, mode: str):
    """(depth, disparity or None, mask or None) from ``<pred>/<id>/`` or ``<pred>/samples/<id>/``."""
    from nsl_lab.dataset_io import read_mask_png, read_pfm

    for base in (pred_root / sample_id, pred_root / "samples" / sample_id):
        if (base / "depth.pfm").is_file():
            depth = read_pfm(base / "depth.pfm").astype(np.float64)
            disp = None
            for name in ("disparity.pfm", "disp_lp.pfm" if mode == "mono" else "disp_lr.pfm"):
                if (base / name).is_file():
                    disp = read_pfm(base / name).astype(np.float64)
                    break
            mask = read_mask_png(base / "mask.png") if (base / "mask.png").is_file() else None
            return depth, disp, mask
    raise UsageError(f"no prediction for sample {sample_id} under {pred_root}")


def cmd_eval(cfg: RunConfig, args):
    from nsl_lab.dataset_io import read_sample
    from nsl_lab.geometry import DepthMap, DisparityMap
    from nsl_lab.metrics import EmptyMaskError, aggregate, compute_metrics, format_table
    from nsl_lab.neural_matching import mode_target

    mode = args.mode or cfg.matcher.mode
    reports, per_sample = [], {}
    for d in sample_dirs(args.gt, args.split):
        s = read_sample(d)
        depth, disp, mask = load_prediction(Path(args.pred), _sample_id(d), mode)
        if depth.shape != s.shape:
            raise UsageError(f"{_sample_id(d)}: prediction shape {depth.shape} != {s.shape}")
        m = s.depth_gt.mask if mask is None else s.depth_gt.mask & mask
        pd = DepthMap(depth, m & (depth > 0))
        kw = {}
        if disp is not None:
            kw = {"d": DisparityMap(disp, m), "d_gt": mode_target(s, mode)}
        try:
            r = compute_metrics(pd, s.depth_gt, thresholds=cfg.eval.thresholds, **kw)
        except EmptyMaskError:
            log.warning("%s: no pixel valid in both prediction and ground truth; skipped",
                        _sample_id(d))
            continue
        reports.append(r)
        per_sample[_sample_id(d)] = r.to_dict()
    if not reports:
        raise EmptyMaskError("no sample has a valid predicted pixel")
    agg = aggregate(reports, cfg.eval.weighting)
    doc = {"aggregate": agg.to_dict(), "weighting": cfg.eval.weighting, "samples": per_sample}
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(format_table([(args.label, agg)], f"{len(reports)} samples, {cfg.eval.weighting}"))


def cmd_report(cfg: RunConfig, args):
    from nsl_lab.report import write_report
    from nsl_lab.study import run_study

    doc = run_study(cfg, jobs=args.jobs, log=log.info)
    out = Path(args.out) if args.out else cfg.cache_root() / "report"
    write_report(cfg, doc, out)
    print((out / "ablation.txt").read_text())


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. stage1.steps=200 (repeatable)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes / threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nsl-lab", description="Structured-light depth toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-pattern", parents=[common], help="render a projector pattern to PNG")
    s.add_argument("--kind", required=True)
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--params", help="JSON object of pattern parameters")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_pattern)

    s = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", help="dataset root (default: <cache>/data)")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-stage1", parents=[common], help="train the neural matcher")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=("mono", "stereo", "bino"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_stage1)

    s = sub.add_parser("train-stage2", parents=[common], help="train the depth refiner")
    s.add_argument("--data", required=True)
    s.add_argument("--stage1", required=True, help="frozen stage-1 checkpoint")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_stage2)

    s = sub.add_parser("infer", parents=[common], help="predict depth for samples")
    s.add_argument("--ckpt", required=True, help="stage-1 checkpoint")
    s.add_argument("--refiner", help="stage-2 checkpoint")
    s.add_argument("--mode", choices=("mono", "stereo", "bino"))
    s.add_argument("--stage", type=int, choices=(1, 2), default=1)
    s.add_argument("--input", required=True)
    s.add_argument("--split")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    for name, func, helptext in (("baseline-tm", cmd_baseline_tm, "template-matching baseline"),
                                 ("pseudo-gt", cmd_pseudo_gt, "temporal pseudo ground truth")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--input", required=True)
        s.add_argument("--split")
        s.add_argument("--out", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("eval", parents=[common], help="score predictions against a dataset")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--split")
    s.add_argument("--mode", choices=("mono", "stereo", "bino"))
    s.add_argument("--label", default="prediction")
    s.add_argument("--out", help="MetricReport JSON path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", parents=[common], help="run or resume the study; write tables and figures")
    s.add_argument("--out", help="report directory (default: <cache>/report)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    from nsl_lab.checkpoint import CheckpointError
    from nsl_lab.dataset_io import CorruptSampleError, ManifestError
    from nsl_lab.metrics import EmptyMaskError
    from nsl_lab.neural_matching import ModeError, NonFiniteError
    from nsl_lab.patterns import InvalidPatternSpec
    from nsl_lab.training import TrainingAborted

    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        import torch

        torch.set_num_threads(args.jobs)
        cfg = load_config(args.config, args.overrides, args.seed)
        args.func(cfg, args)
    except (ConfigError, UsageError, InvalidPatternSpec, ModeError, ManifestError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        log.error("%s (last finite checkpoint: %s)", exc, exc.checkpoint)
        return EXIT_RUNTIME
    except (CorruptSampleError, CheckpointError, NonFiniteError, EmptyMaskError,
            FloatingPointError, OSError, RuntimeError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
