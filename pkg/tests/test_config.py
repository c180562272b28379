import json

import pytest

from nsl_lab.config import ConfigError, RunConfig, apply_overrides, fingerprint, load_config


def test_defaults_roundtrip():
    cfg = RunConfig()
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_shipped_config_matches_defaults():
    from importlib.resources import files
    doc = json.loads(files("nsl_lab").joinpath("configs/desk.json").read_text())
    assert RunConfig.from_dict(doc) == RunConfig()


@pytest.mark.parametrize("doc", [{"bogus": 1}, {"stage1": {"lrr": 1}}, {"dataset": {"x": 1}},
                                 {"modes": ["tri"]}, {"n_train": 0}, {"stage1": 3},
                                 {"eval": {"weighting": "median"}}, []])
def test_strict(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc)


def test_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"stage1": {"steps": 10}}))
    cfg = load_config(p, ["stage1.lr=0.01", "matcher.mode=stereo", 'modes=["mono"]'], seed=9)
    assert cfg.stage1.steps == 10 and cfg.stage1.lr == 0.01
    assert cfg.matcher.mode == "stereo" and cfg.modes == ("mono",) and cfg.seed == 9
    assert apply_overrides({}, ["a.b=1"]) == {"a": {"b": 1}}


@pytest.mark.parametrize("ov", [["nokey"], ["seed=1", "seed.x=2"]])
def test_bad_overrides(ov):
    with pytest.raises(ConfigError):
        load_config(None, ov)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_cache_root(monkeypatch, tmp_path):
    monkeypatch.setenv("NSL_LAB_CACHE", str(tmp_path))
    assert RunConfig().cache_root() == tmp_path
    assert RunConfig(cache="/x").cache_root().as_posix() == "/x"
    monkeypatch.delenv("NSL_LAB_CACHE")
    assert RunConfig().cache_root().name == "nsl_lab"


def test_fingerprint_stable():
    assert fingerprint({"a": 1, "b": 2}) == fingerprint({"b": 2, "a": 1})
    assert fingerprint(RunConfig().to_dict()) != fingerprint(RunConfig(seed=1).to_dict())
