"""On-disk samples, dataset generation and manifests.

Layout::

    <root>/manifest.json
    <root>/samples/<id>/ir_left.png  ir_right.png  pattern.png   16-bit, x65535
                        depth.pfm    disp_lp.pfm   disp_lr.pfm   float32 LE
                        mask.png     meta.json

``meta.json`` carries sha256 digests of every other file, so a damaged
sample is detected on read instead of silently feeding garbage to training.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from nsl_lab._random import stream
from nsl_lab.geometry import DepthMap, DisparityMap, RigCalibration
from nsl_lab.patterns import (TEST_KINDS, TRAIN_KINDS, PatternImage, PatternKind, PatternSpec,
                              generate_pattern)
from nsl_lab.simulator import Difficulty, RenderConfig, Sample, random_scene, render_sample

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
SAMPLE_FILES = ("ir_left.png", "ir_right.png", "pattern.png", "depth.pfm",
                "disp_lp.pfm", "disp_lr.pfm", "mask.png")


class CorruptSampleError(RuntimeError):
    """A sample directory is missing files, fails its checksums or has bad rasters."""


class ManifestError(ValueError):
    pass


# -- raster codecs -----------------------------------------------------------

def write_pfm(path, values) -> None:
    a = np.asarray(values, dtype="<f4")
    if a.ndim != 2:
        raise ValueError("only single-channel PFM is supported")
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        # PFM stores the bottom row first
        fh.write(np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a single-channel PFM as a (H, W) float32 array."""
    data = Path(path).read_bytes()
    try:
        head, rest = data.split(b"\n", 1)
        dims, rest = rest.split(b"\n", 1)
        scale, raw = rest.split(b"\n", 1)
        if head.strip() != b"Pf":
            raise ValueError(f"unsupported PFM header {head!r}")
        w, h = (int(t) for t in dims.split())
        scale = float(scale)
    except ValueError as exc:
        raise CorruptSampleError(f"{path}: malformed PFM header ({exc})") from None
    if len(raw) != 4 * w * h:
        raise CorruptSampleError(f"{path}: expected {4 * w * h} data bytes, found {len(raw)}")
    dtype = "<f4" if scale < 0 else ">f4"
    return np.frombuffer(raw, dtype=dtype).reshape(h, w)[::-1].astype(np.float32)


def write_png16(path, img) -> None:
    a = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("image contains non-finite values")
    q = np.round(np.clip(a, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")


def read_png16(path) -> np.ndarray:
    with Image.open(path) as im:
        q = np.array(im)
    if q.dtype != np.uint16:
        raise CorruptSampleError(f"{path}: expected a 16-bit grayscale PNG, got {q.dtype}")
    return q.astype(np.float64) / 65535.0


def write_mask_png(path, mask) -> None:
    Image.fromarray(np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)).save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("L")) > 127


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# -- samples -----------------------------------------------------------------

def write_sample(sample: Sample, path, extra_meta: dict | None = None) -> Path:
    """Write ``sample`` to directory ``path`` atomically (temp dir, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".tmp-{path.name}-", dir=path.parent))
    try:
        write_png16(tmp / "ir_left.png", sample.ir_left)
        write_png16(tmp / "ir_right.png", sample.ir_right)
        write_png16(tmp / "pattern.png", sample.pattern_ref.intensities)
        write_pfm(tmp / "depth.pfm", np.where(sample.depth_gt.mask, sample.depth_gt.values, 0.0))
        write_pfm(tmp / "disp_lp.pfm", np.where(sample.disp_gt_lp.mask, sample.disp_gt_lp.values, 0.0))
        write_pfm(tmp / "disp_lr.pfm", np.where(sample.disp_gt_lr.mask, sample.disp_gt_lr.values, 0.0))
        write_mask_png(tmp / "mask.png", sample.depth_gt.mask)
        spec = sample.pattern_ref.spec
        meta = {
            **dict(sample.meta), **(extra_meta or {}),
            "version": FORMAT_VERSION,
            "shape": list(sample.shape),
            "pattern_id": sample.pattern_id,
            "pattern_spec": spec.to_dict() if spec is not None else None,
            "seed": int(sample.seed),
            "rig": sample.rig.to_dict(),
            "files": {name: _sha256(tmp / name) for name in SAMPLE_FILES},
        }
        _dump_json(meta, tmp / "meta.json")
        if path.exists():
            shutil.rmtree(path)
        os.rename(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_sample(path, verify: bool = True) -> Sample:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except (OSError, ValueError) as exc:
        raise CorruptSampleError(f"{path}: unreadable meta.json ({exc})") from None
    if meta.get("version") != FORMAT_VERSION:
        raise CorruptSampleError(f"{path}: unsupported format version {meta.get('version')!r}")
    for name in SAMPLE_FILES:
        f = path / name
        if not f.is_file():
            raise CorruptSampleError(f"{path}: missing {name}")
        if verify and _sha256(f) != meta["files"].get(name):
            raise CorruptSampleError(f"{path}: checksum mismatch for {name}")
    shape = tuple(meta["shape"])
    try:
        ir_l = read_png16(path / "ir_left.png")
        ir_r = read_png16(path / "ir_right.png")
        pattern = read_png16(path / "pattern.png")
        mask = read_mask_png(path / "mask.png")
    except OSError as exc:
        raise CorruptSampleError(f"{path}: undecodable PNG ({exc})") from None
    depth = read_pfm(path / "depth.pfm").astype(np.float64)
    d_lp = read_pfm(path / "disp_lp.pfm").astype(np.float64)
    d_lr = read_pfm(path / "disp_lr.pfm").astype(np.float64)
    for name, arr in (("ir_left", ir_l), ("ir_right", ir_r), ("mask", mask), ("depth", depth),
                      ("disp_lp", d_lp), ("disp_lr", d_lr)):
        if arr.shape != shape:
            raise CorruptSampleError(f"{path}: {name} has shape {arr.shape}, expected {shape}")
    spec = PatternSpec.from_dict(meta["pattern_spec"]) if meta.get("pattern_spec") else None
    reserved = {"version", "shape", "pattern_id", "pattern_spec", "seed", "rig", "files"}
    return Sample(
        ir_left=ir_l, ir_right=ir_r, pattern_ref=PatternImage(pattern, spec),
        depth_gt=DepthMap(depth, mask),
        disp_gt_lp=DisparityMap(d_lp, mask.copy()),
        disp_gt_lr=DisparityMap(d_lr, mask.copy()),
        rig=RigCalibration.from_dict(meta["rig"]),
        pattern_id=meta["pattern_id"], seed=int(meta["seed"]),
        meta={k: v for k, v in meta.items() if k not in reserved})


# -- datasets ----------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    """Generation settings. Ranges are (low, high) for uniform jitter."""

    width: int = 160
    height: int = 96
    n_val: int = 64
    n_test: int = 64
    focal: tuple[float, float] = (90.0, 110.0)
    baseline_lr: tuple[float, float] = (0.08, 0.12)
    baseline_lp: tuple[float, float] = (0.04, 0.06)
    noise_sigma: tuple[float, float] = (0.005, 0.02)
    gamma: float = 1.0
    pattern_seed: int = 0
    difficulties: tuple[str, ...] = tuple(d.value for d in Difficulty)

    def __post_init__(self):
        for name in ("focal", "baseline_lr", "baseline_lp", "noise_sigma"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi):
                raise ValueError(f"{name} range must satisfy 0 <= low <= high")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.width % 4 or self.height % 4 or self.width < 16 or self.height < 16:
            raise ValueError("width and height must be multiples of 4 and at least 16")
        if self.n_val < 0 or self.n_test < 0:
            raise ValueError("shard sizes must be >= 0")
        object.__setattr__(self, "difficulties",
                           tuple(Difficulty(d).value for d in self.difficulties))
        if not self.difficulties:
            raise ValueError("at least one difficulty is required")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    config: DatasetConfig
    records: list[dict] = field(default_factory=list)
    train_kinds: tuple[str, ...] = tuple(k.value for k in TRAIN_KINDS)
    test_kinds: tuple[str, ...] = tuple(k.value for k in TEST_KINDS)
    version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        return {"version": self.version, "seed": int(self.seed), "config": self.config.to_dict(),
                "pattern_split": {"train": list(self.train_kinds), "test": list(self.test_kinds)},
                "samples": self.records}

    def split(self, name: str) -> list[dict]:
        return [r for r in self.records if r["split"] == name]

    def sample_path(self, record: dict) -> Path:
        return self.root / record["path"]

    def samples(self, split: str | None = None) -> Iterator[Sample]:
        """Yield samples in manifest order, optionally restricted to one split."""
        for r in self.records:
            if split is None or r["split"] == split:
                yield read_sample(self.sample_path(r))

    def validate(self) -> None:
        ids = [r["id"] for r in self.records]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate sample ids")
        if set(self.train_kinds) & set(self.test_kinds):
            raise ManifestError("train and test pattern kinds overlap")
        for r in self.records:
            if r["split"] not in SPLITS:
                raise ManifestError(f"{r['id']}: unknown split {r['split']!r}")
            allowed = self.test_kinds if r["split"] == "test" else self.train_kinds
            if r["pattern_id"] not in allowed:
                raise ManifestError(f"{r['id']}: pattern {r['pattern_id']} not allowed in {r['split']}")
            base = self.sample_path(r)
            for name in SAMPLE_FILES + ("meta.json",):
                if not (base / name).is_file():
                    raise ManifestError(f"{r['id']}: missing {name}")


def save_manifest(manifest: DatasetManifest) -> Path:
    path = Path(manifest.root) / "manifest.json"
    tmp = path.with_name(".manifest.json.tmp")
    _dump_json(manifest.to_dict(), tmp)
    os.replace(tmp, path)
    return path


def load_manifest(root, validate: bool = True) -> DatasetManifest:
    root = Path(root)
    try:
        d = json.loads((root / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise ManifestError(f"{root}: cannot read manifest.json ({exc})") from None
    if d.get("version") != FORMAT_VERSION:
        raise ManifestError(f"unsupported manifest version {d.get('version')!r}")
    m = DatasetManifest(root, int(d["seed"]), DatasetConfig.from_dict(d["config"]),
                        list(d["samples"]), tuple(d["pattern_split"]["train"]),
                        tuple(d["pattern_split"]["test"]))
    if validate:
        m.validate()
    return m


def _balanced_kinds(kinds, n: int, rng) -> list[str]:
    """``n`` kinds drawn so every kind appears floor(n/k) or ceil(n/k) times, in random order."""
    reps = -(-n // len(kinds))
    # which kinds get the extra copy is itself random
    head = list(rng.permutation([k.value for k in kinds]))
    order = (head * reps)[:n]
    return [str(k) for k in rng.permutation(order)]


def _plan(n: int, seed: int, config: DatasetConfig) -> list[dict]:
    jobs = []
    for split, count, kinds in (("train", n, TRAIN_KINDS), ("val", config.n_val, TRAIN_KINDS),
                                ("test", config.n_test, TEST_KINDS)):
        order = _balanced_kinds(kinds, count, stream(seed, "pattern-order", split)) if count else []
        for i in range(count):
            rng = stream(seed, "sample", split, i)
            jobs.append({
                "id": f"{split}-{i:05d}", "split": split, "pattern_id": order[i],
                "seed": int(rng.integers(0, 2**62)),
                "difficulty": config.difficulties[int(rng.integers(len(config.difficulties)))],
                "focal": float(rng.uniform(*config.focal)),
                "baseline_lr": float(rng.uniform(*config.baseline_lr)),
                "baseline_lp": float(rng.uniform(*config.baseline_lp)),
                "noise_sigma": float(rng.uniform(*config.noise_sigma)),
            })
    return jobs


def _render_job(job: dict, config: DatasetConfig, root: Path) -> dict:
    rig = RigCalibration.simple(config.width, config.height, job["focal"],
                                job["baseline_lr"], job["baseline_lp"])
    pattern = generate_pattern(PatternSpec(PatternKind(job["pattern_id"]), config.width,
                                           config.height, seed=config.pattern_seed))
    scene = random_scene(job["seed"], job["difficulty"], rig)
    rc = RenderConfig(rig, pattern, noise_sigma=job["noise_sigma"], gamma=config.gamma,
                      seed=job["seed"])
    sample = render_sample(scene, rc, job["pattern_id"])
    rel = f"samples/{job['id']}"
    write_sample(sample, root / rel, extra_meta={
        "id": job["id"], "split": job["split"], "difficulty": job["difficulty"],
        "noise_sigma": job["noise_sigma"], "gamma": config.gamma, "scene": scene.to_dict()})
    return {"id": job["id"], "split": job["split"], "path": rel, "pattern_id": job["pattern_id"],
            "seed": job["seed"], "difficulty": job["difficulty"], "rig": rig.to_dict()}


def generate_dataset(n: int, seed: int, config: DatasetConfig = DatasetConfig(),
                     root=".", jobs: int = 1) -> DatasetManifest:
    """Render ``n`` training samples plus the val and held-out-pattern shards under ``root``.

    Every sample draws from its own seed stream, so the tree does not depend
    on ``jobs`` or on rendering order.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    root = Path(root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    plan = _plan(n, seed, config)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_render_job, plan, [config] * len(plan),
                                    [root] * len(plan), chunksize=4))
    else:
        records = [_render_job(j, config, root) for j in plan]
    manifest = DatasetManifest(root, seed, config, records)
    save_manifest(manifest)
    return manifest
