import json

import numpy as np
import pytest

from nsl_lab.config import load_config
from nsl_lab.metrics import MetricReport
from nsl_lab.report import write_report
from nsl_lab.study import (ablation_rows, dense_depth_from_disparity, run_study, select,
                           summarize, train_seconds)

TINY = ["n_train=4", "dataset.width=64", "dataset.height=48", "dataset.n_val=2",
        "dataset.n_test=2", "matcher.feature_dim=8", "matcher.hidden_dim=8",
        "matcher.encoder_width=8", "matcher.iters_train=2", "matcher.iters_eval=2",
        "matcher.pyramid_levels=2", "refiner.backbone_width=4", "refiner.prompt_width=8",
        "stage1.steps=2", "stage2.steps=2", "stage1.crop=[32,32]", "stage2.crop=[32,32]"]


@pytest.fixture(scope="module")
def tiny_study(tmp_path_factory):
    root = tmp_path_factory.mktemp("study")
    cfg = load_config(None, TINY + [f'cache="{root}"', 'modes=["mono","bino"]'])
    return cfg, run_study(cfg, log=lambda m: None)


def test_rows_cover_every_method(tiny_study):
    cfg, doc = tiny_study
    rows = doc["rows"]
    for mode in cfg.modes:
        for method, splits in (("matcher", {"val", "test"}), ("refiner", {"val", "test"}),
                               ("untrained", {"val"})):
            got = {r["split"] for r in select(rows, method=method, mode=mode)}
            assert got == splits, (method, mode)
    assert {r["id"] for r in select(rows, method="matcher", mode="mono")} == \
        {f"{s}-{i:05d}" for s in ("val", "test") for i in range(2)}
    assert all(r["coverage"] == 1.0 for r in select(rows, method="matcher"))
    assert doc["training"]["stage2-mono"]["stage1_unchanged"] is True
    assert "cache" not in doc["config"]


def test_resume_reuses_cache(tiny_study):
    cfg, doc = tiny_study
    before = train_seconds(cfg.cache_root(), "stage1-mono")
    assert before is not None and before > 0
    stamp = (cfg.cache_root() / "stage1-mono" / "final.ckpt").stat().st_mtime_ns
    again = run_study(cfg, log=lambda m: None)
    assert again == json.loads((cfg.cache_root() / "results.json").read_text())
    assert again["rows"] == doc["rows"]
    assert (cfg.cache_root() / "stage1-mono" / "final.ckpt").stat().st_mtime_ns == stamp


def test_config_change_invalidates_only_downstream(tiny_study):
    cfg, _ = tiny_study
    root = cfg.cache_root()
    stamp1 = (root / "stage1-mono" / "final.ckpt").stat().st_mtime_ns
    stamp2 = (root / "stage2-mono" / "final.ckpt").stat().st_mtime_ns
    changed = load_config(None, TINY + [f'cache="{root}"', 'modes=["mono","bino"]',
                                        "stage2.lr=1e-3"])
    run_study(changed, log=lambda m: None)
    assert (root / "stage1-mono" / "final.ckpt").stat().st_mtime_ns == stamp1
    assert (root / "stage2-mono" / "final.ckpt").stat().st_mtime_ns != stamp2


def test_report(tiny_study, tmp_path):
    cfg, doc = tiny_study
    cfg_now = load_config(None, TINY + [f'cache="{cfg.cache_root()}"', 'modes=["mono","bino"]'])
    doc = run_study(cfg_now, log=lambda m: None)
    out = write_report(cfg_now, doc, tmp_path / "rep", n_examples=2)
    text = (out / "ablation.txt").read_text()
    for label in ("TM (IR+pattern)", "mono stage-1", "mono stage-2", "bino stage-1", "bino stage-2"):
        assert label in text
    assert sorted(p.name for p in (out / "figures").iterdir()) == ["val_00.png", "val_01.png"]
    tables = json.loads((out / "ablation.json").read_text())
    assert set(tables) == {"val", "test"}
    labels = [label for label, _ in ablation_rows(doc, "val", per_pattern=False)]
    assert labels[0] == "TM (IR+pattern)" and labels[1:3] == ["mono stage-1", "mono stage-2"]


def test_summarize_and_select():
    a = MetricReport(1.0, 1.0, 0.1, {1.25: 1.0}, 0.5, 10).to_dict()
    b = MetricReport(3.0, 3.0, 0.3, {1.25: 0.0}, 1.5, 30).to_dict()
    rows = [{"m": 1, "metrics": a}, {"m": 2, "metrics": b}]
    assert select(rows, m=2) == rows[1:]
    assert summarize(rows).mae == pytest.approx(2.0)
    assert summarize(rows, "pixel_pooled").mae == pytest.approx(2.5)


def test_dense_depth_clamps():
    z = dense_depth_from_disparity(np.array([[-1.0, 0.0, 5.0]]), 100.0, 0.05)
    assert np.all(np.isfinite(z)) and np.all(z > 0)
    assert z[0, 2] == pytest.approx(1.0)
