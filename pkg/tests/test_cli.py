import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from nsl_lab.cli import main
from nsl_lab.dataset_io import load_manifest, read_pfm, read_sample
from nsl_lab.metrics import compute_metrics

TINY = ["--set", "n_train=4", "--set", "dataset.width=64", "--set", "dataset.height=48",
        "--set", "dataset.n_val=2", "--set", "dataset.n_test=2",
        "--set", "matcher.feature_dim=8", "--set", "matcher.hidden_dim=8",
        "--set", "matcher.encoder_width=8", "--set", "matcher.iters_train=2",
        "--set", "matcher.iters_eval=2", "--set", "matcher.pyramid_levels=2",
        "--set", "refiner.backbone_width=4", "--set", "refiner.prompt_width=8",
        "--set", "stage1.steps=2", "--set", "stage2.steps=2", "--set", "stage1.crop=[32,32]",
        "--set", "stage2.crop=[32,32]", "--set", "stage1.batch_size=2", "--set",
        "stage2.batch_size=2", "--seed", "4"]


def tree_digest(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), *TINY]) == 0
    assert main(["train-stage1", "--data", str(root / "data"), "--mode", "mono",
                 "--out", str(root / "s1"), *TINY]) == 0
    return root


def test_gen_pattern_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-pattern", "--kind", "random_binary", "--width", "40", "--height", "20",
                     "--out", str(tmp_path / name / "p.png"), "--seed", "3"]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_usage_errors(tmp_path, work):
    assert main(["gen-pattern", "--kind", "nope", "--out", str(tmp_path / "p.png")]) == 2
    assert main(["bogus-command"]) == 2
    assert main(["gen-data", "--set", "bogus=1", "--out", str(tmp_path)]) == 2
    assert main(["eval", "--pred", str(tmp_path), "--gt", str(tmp_path)]) == 2
    assert main(["infer", "--ckpt", str(work / "s1" / "final.ckpt"), "--mode", "stereo",
                 "--input", str(work / "data"), "--out", str(tmp_path / "o")]) == 2
    assert main(["gen-data", "--jobs", "0", "--out", str(tmp_path)]) == 2
    assert main(["--help"]) == 0


def test_runtime_errors(tmp_path, work):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert main(["infer", "--ckpt", str(bad), "--input", str(work / "data"),
                 "--out", str(tmp_path / "o")]) == 3
    sample = load_manifest(work / "data").sample_path(load_manifest(work / "data").records[0])
    broken = tmp_path / "broken"
    broken.mkdir()
    for f in sample.iterdir():
        (broken / f.name).write_bytes(f.read_bytes())
    (broken / "depth.pfm").write_bytes((broken / "depth.pfm").read_bytes()[:40])
    assert main(["eval", "--pred", str(tmp_path), "--gt", str(broken)]) == 3


def test_gen_data_reproducible(tmp_path, work):
    assert main(["gen-data", "--out", str(tmp_path / "again"), "--jobs", "2", *TINY]) == 0
    assert tree_digest(tmp_path / "again") == tree_digest(work / "data")


def test_train_reproducible(tmp_path, work):
    assert main(["train-stage1", "--data", str(work / "data"), "--mode", "mono",
                 "--out", str(tmp_path / "s1"), *TINY]) == 0
    a = (work / "s1" / "final.ckpt").read_bytes()
    assert (tmp_path / "s1" / "final.ckpt").read_bytes() == a


def test_stage2_infer_eval(tmp_path, work, capsys):
    assert main(["train-stage2", "--data", str(work / "data"), "--stage1",
                 str(work / "s1" / "final.ckpt"), "--out", str(tmp_path / "s2"), *TINY]) == 0
    for stage in ("1", "2"):
        out = tmp_path / f"pred{stage}"
        args = ["infer", "--ckpt", str(work / "s1" / "final.ckpt"), "--stage", stage,
                "--refiner", str(tmp_path / "s2" / "final.ckpt"), "--input", str(work / "data"),
                "--split", "test", "--out", str(out), *TINY]
        assert main(args) == 0
        dirs = sorted(out.iterdir())
        assert len(dirs) == 2
        for d in dirs:
            assert read_pfm(d / "depth.pfm").shape == (48, 64)
        assert main(args[:-len(TINY)] + ["--out", str(tmp_path / "again"), *TINY]) == 0
        assert tree_digest(tmp_path / "again") == tree_digest(out)
        assert main(["eval", "--pred", str(out), "--gt", str(work / "data"), "--split", "test",
                     "--mode", "mono", "--out", str(out / "m.json")]) == 0
        import shutil
        shutil.rmtree(tmp_path / "again")
    assert "prediction" in capsys.readouterr().out


def test_eval_identity_and_agreement(tmp_path, work):
    m = load_manifest(work / "data")
    gt_dirs = [m.sample_path(r) for r in m.records if r["split"] == "val"]
    for d in gt_dirs:
        (tmp_path / "pred" / d.name).mkdir(parents=True)
        for f in ("depth.pfm", "disp_lp.pfm"):
            (tmp_path / "pred" / d.name / ("disparity.pfm" if f.startswith("disp") else f)
             ).write_bytes((d / f).read_bytes())
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(work / "data"),
                 "--split", "val", "--mode", "mono", "--out", str(tmp_path / "m.json")]) == 0
    doc = json.loads((tmp_path / "m.json").read_text())
    agg = doc["aggregate"]
    assert agg["mae"] == 0 and agg["rmse"] == 0 and agg["epe"] == 0
    assert all(v == 1.0 for v in agg["delta"].values())

    # a perturbed prediction scores exactly as the library does
    rng = np.random.default_rng(1)
    from nsl_lab.dataset_io import write_pfm
    from nsl_lab.geometry import DepthMap
    for d in gt_dirs:
        s = read_sample(d)
        noisy = np.where(s.depth_gt.mask, s.depth_gt.values * rng.uniform(0.9, 1.1, s.shape), 0.0)
        write_pfm(tmp_path / "pred" / d.name / "depth.pfm", noisy)
        (tmp_path / "pred" / d.name / "disparity.pfm").unlink()
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(work / "data"),
                 "--split", "val", "--out", str(tmp_path / "n.json")]) == 0
    doc = json.loads((tmp_path / "n.json").read_text())
    for d in gt_dirs:
        s = read_sample(d)
        pred = read_pfm(tmp_path / "pred" / d.name / "depth.pfm").astype(np.float64)
        want = compute_metrics(DepthMap(pred, s.depth_gt.mask & (pred > 0)), s.depth_gt)
        assert doc["samples"][d.name]["mae"] == pytest.approx(want.mae, rel=1e-12)
        assert doc["samples"][d.name]["rmse"] == pytest.approx(want.rmse, rel=1e-12)


def test_baseline_and_pseudo_gt(tmp_path, work):
    for cmd in ("baseline-tm", "pseudo-gt"):
        out = tmp_path / cmd
        assert main([cmd, "--input", str(work / "data"), "--split", "val", "--out", str(out),
                     "--set", "pseudo_gt.n_patterns=8"]) == 0
        for d in out.iterdir():
            assert read_pfm(d / "depth.pfm").shape == (48, 64)
            assert (d / "mask.png").is_file()


def test_eval_without_valid_pixels(tmp_path, work):
    from nsl_lab.dataset_io import write_pfm
    m = load_manifest(work / "data")
    for rec in m.split("val"):
        d = tmp_path / m.sample_path(rec).name
        d.mkdir()
        write_pfm(d / "depth.pfm", np.zeros((48, 64)))
    assert main(["eval", "--pred", str(tmp_path), "--gt", str(work / "data"), "--split", "val"]) == 3
