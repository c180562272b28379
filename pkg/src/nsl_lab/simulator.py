"""Ray-cast structured-light renderer.

Each pixel casts a primary ray, projects the hit point into the projector to
sample the pattern, and casts a shadow ray toward the projector center.
Radiance is Phong-lit with inverse-square falloff, plus an ambient term:

    power * pattern * (albedo * max(0, n.l) + ks * max(0, r.v)^shininess) / dist^2
    + ambient * albedo

followed by gamma, zero-mean Gaussian noise and clamping to [0, 1]. Camera
noise is a stand-in: the IR response curve and speckle statistics of real
projectors are not modelled.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from nsl_lab import kernels
from nsl_lab._random import stream
from nsl_lab.geometry import (DepthMap, DisparityMap, RigCalibration, depth_to_disparity)
from nsl_lab.patterns import PatternImage


class EmptySceneError(RuntimeError):
    pass


class SceneFormatError(ValueError):
    pass


class View(str, enum.Enum):
    LEFT = "left"
    RIGHT = "right"


class Difficulty(str, enum.Enum):
    EASY = "easy"
    TEXTURED = "textured"
    SPECULAR = "specular"
    OCCLUSION = "occlusion"


@dataclass(frozen=True)
class Material:
    albedo: float = 0.8
    specular_strength: float = 0.0
    shininess: float = 16.0

    def __post_init__(self):
        if not (0 <= self.albedo <= 1 and 0 <= self.specular_strength <= 1):
            raise ValueError("albedo and specular_strength must lie in [0, 1]")
        if self.shininess < 1:
            raise ValueError("shininess must be >= 1")


_KIND_CODE = {"plane": kernels._kernels_py.PLANE, "sphere": kernels._kernels_py.SPHERE,
              "box": kernels._kernels_py.BOX}


@dataclass(frozen=True)
class Primitive:
    """Geometric primitive in left-camera coordinates (meters).

    plane: ``point`` and unit ``normal``; sphere: ``center`` and ``radius``;
    box: axis-aligned, ``lo`` and ``hi`` corners.
    """

    kind: str
    params: tuple
    material: Material = field(default_factory=Material)

    def __post_init__(self):
        if self.kind not in _KIND_CODE:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        p = tuple(float(x) for x in self.params)
        if self.kind == "plane":
            n = np.asarray(p[3:6])
            if len(p) != 6 or not np.isclose(np.linalg.norm(n), 1.0):
                raise ValueError("plane needs a point and a unit normal")
        elif self.kind == "sphere":
            if len(p) != 4 or p[3] <= 0:
                raise ValueError("sphere needs a center and a positive radius")
        elif len(p) != 6 or not all(p[i + 3] > p[i] for i in range(3)):
            raise ValueError("box needs lo < hi on every axis")
        object.__setattr__(self, "params", p)

    @classmethod
    def plane(cls, point, normal, material=None):
        n = np.asarray(normal, dtype=float)
        n = n / np.linalg.norm(n)
        return cls("plane", (*point, *n), material or Material())

    @classmethod
    def sphere(cls, center, radius, material=None):
        return cls("sphere", (*center, radius), material or Material())

    @classmethod
    def box(cls, lo, hi, material=None):
        return cls("box", (*lo, *hi), material or Material())

    def to_dict(self) -> dict:
        m = self.material
        return {"kind": self.kind, "params": list(self.params),
                "material": {"albedo": m.albedo, "specular_strength": m.specular_strength,
                             "shininess": m.shininess}}


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    ambient_level: float = 0.0
    projector_power: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if not 0 <= self.ambient_level <= 1:
            raise ValueError("ambient_level must lie in [0, 1]")
        if self.projector_power < 0:
            raise ValueError("projector_power must be non-negative")

    def packed(self):
        """Arrays consumed by the kernels: type codes, (n, 6) params, (n, 3) materials."""
        n = len(self.primitives)
        types = np.array([_KIND_CODE[p.kind] for p in self.primitives], dtype=np.int64)
        params = np.zeros((n, 6))
        mats = np.zeros((n, 3))
        for i, p in enumerate(self.primitives):
            params[i, :len(p.params)] = p.params
            mats[i] = (p.material.albedo, p.material.specular_strength, p.material.shininess)
        return types, params, mats

    def to_dict(self) -> dict:
        return {"version": 1, "ambient_level": self.ambient_level,
                "projector_power": self.projector_power,
                "primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        allowed = {"version", "ambient_level", "projector_power", "primitives"}
        if not isinstance(d, dict) or set(d) - allowed or "primitives" not in d:
            raise SceneFormatError("scene must hold 'primitives' and optional lighting keys only")
        prims = []
        try:
            for p in d["primitives"]:
                m = p.get("material", {})
                prims.append(Primitive(p["kind"], tuple(p["params"]), Material(**m)))
            return cls(tuple(prims), float(d.get("ambient_level", 0.0)),
                       float(d.get("projector_power", 1.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneFormatError(f"invalid scene: {exc}") from exc


def load_scene(path) -> Scene:
    return Scene.from_dict(json.loads(Path(path).read_text()))


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2))


@dataclass(frozen=True)
class Hit:
    t: float
    point: np.ndarray
    normal: np.ndarray
    material: Material


def raycast(scene: Scene, origin, direction) -> Hit | None:
    """Nearest intersection with ``t > 1e-6`` along a unit ``direction``, or None."""
    o = np.asarray(origin, dtype=np.float64).reshape(1, 3)
    d = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    if not np.isclose(np.linalg.norm(d), 1.0):
        raise ValueError("direction must be a unit vector")
    if not scene.primitives:
        return None
    types, params, _ = scene.packed()
    t, idx, nrm = kernels.get_backend("python").intersect(types, params, o, d)
    if idx[0] < 0:
        return None
    return Hit(float(t[0]), o[0] + t[0] * d[0], nrm[0], scene.primitives[int(idx[0])].material)


@dataclass(frozen=True)
class RenderConfig:
    rig: RigCalibration
    pattern: PatternImage
    noise_sigma: float = 0.01
    gamma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        pk = self.rig.projector
        if (self.pattern.height, self.pattern.width) != (pk.height, pk.width):
            raise ValueError("pattern raster must match the projector resolution")


def _view_origin(rig: RigCalibration, view: View):
    view = View(view)
    return (0.0, rig.cam_left) if view is View.LEFT else (rig.baseline_lr, rig.cam_right)


def render_radiance(scene: Scene, config: RenderConfig, view=View.LEFT):
    """Linear radiance, z-depth and shadow flags of one view, before gamma and noise."""
    rig = config.rig
    cam_x, K = _view_origin(rig, view)
    P = rig.projector
    types, params, mats = scene.packed()
    if len(types) == 0:
        z = np.zeros((K.height, K.width))
        return z, z.copy(), np.zeros_like(z, dtype=bool)
    return kernels.render_view(
        types, params, mats, cam_x, K.fx, K.fy, K.cx, K.cy, K.width, K.height,
        rig.baseline_lp, P.fx, P.fy, P.cx, P.cy, config.pattern.intensities,
        float(scene.projector_power), float(scene.ambient_level))


def render_ir(scene: Scene, config: RenderConfig, view=View.LEFT) -> np.ndarray:
    view = View(view)
    rad, _, _ = render_radiance(scene, config, view)
    img = np.power(np.maximum(rad, 0.0), 1.0 / config.gamma) if config.gamma != 1.0 else rad
    if config.noise_sigma > 0:
        rng = stream(config.seed, "ir-noise", view.value)
        img = img + rng.normal(0.0, config.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def render_ground_truth(scene: Scene, rig: RigCalibration, view=View.LEFT) -> DepthMap:
    cam_x, K = _view_origin(rig, view)
    if not scene.primitives:
        return DepthMap(np.zeros((K.height, K.width)), np.zeros((K.height, K.width), bool))
    types, params, mats = scene.packed()
    # a blank pattern is enough for depth; render_view needs some raster
    blank = np.zeros((rig.projector.height, rig.projector.width))
    _, depth, _ = kernels.render_view(
        types, params, mats, cam_x, K.fx, K.fy, K.cx, K.cy, K.width, K.height,
        rig.baseline_lp, rig.projector.fx, rig.projector.fy, rig.projector.cx,
        rig.projector.cy, blank, 0.0, 0.0)
    # snapped to float32 so the on-disk PFM copy is bit-identical
    depth = depth.astype(np.float32).astype(np.float64)
    return DepthMap(depth, depth > 0)


@dataclass
class Sample:
    ir_left: np.ndarray
    ir_right: np.ndarray
    pattern_ref: PatternImage
    depth_gt: DepthMap
    disp_gt_lp: DisparityMap
    disp_gt_lr: DisparityMap
    rig: RigCalibration
    pattern_id: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.ir_left.shape


def render_sample(scene: Scene, config: RenderConfig, pattern_id: str = "") -> Sample:
    rig = config.rig
    depth = render_ground_truth(scene, rig, View.LEFT)
    if not depth.mask.any():
        raise EmptySceneError("nothing in the scene is visible from the left camera")
    ir_l = render_ir(scene, config, View.LEFT)
    ir_r = render_ir(scene, config, View.RIGHT)
    f = rig.focal
    return Sample(
        ir_left=ir_l, ir_right=ir_r, pattern_ref=config.pattern, depth_gt=depth,
        disp_gt_lp=depth_to_disparity(depth, f, rig.baseline_lp),
        disp_gt_lr=depth_to_disparity(depth, f, rig.baseline_lr),
        rig=rig,
        pattern_id=pattern_id or (config.pattern.spec.kind.value if config.pattern.spec else ""),
        seed=int(config.seed))


def _random_material(rng, difficulty: Difficulty) -> Material:
    albedo = float(rng.uniform(0.35, 1.0))
    if difficulty is Difficulty.EASY:
        return Material(albedo, 0.0, 1.0)
    if difficulty is Difficulty.SPECULAR:
        return Material(albedo * 0.7, float(rng.uniform(0.3, 1.0)), float(rng.uniform(8, 64)))
    return Material(albedo, float(rng.uniform(0.0, 0.25)), float(rng.uniform(4, 32)))


def random_scene(seed: int, difficulty=Difficulty.EASY, rig: RigCalibration | None = None) -> Scene:
    """Seeded scene with a back wall and up to 7 objects, depths within [0.4, 3.0] m.

    ``occlusion`` guarantees one object sits directly in front of another
    along the optical axis; ``textured`` varies albedo per object and adds a
    slanted floor; ``specular`` gives every object a strong specular lobe.
    """
    difficulty = Difficulty(difficulty)
    rng = stream(seed, "scene", difficulty.value)
    # field-of-view slope of the default desk rig; objects are kept roughly in view
    slope_x, slope_y = 0.75, 0.45
    if rig is not None:
        slope_x = rig.cam_left.width / 2 / rig.cam_left.fx
        slope_y = rig.cam_left.height / 2 / rig.cam_left.fy

    wall_z = float(rng.uniform(1.4, 2.4))
    # tilt bounded so the wall stays inside 3.0 m across the field of view
    wall_n = np.array([rng.uniform(-0.15, 0.15), rng.uniform(-0.1, 0.1), -1.0])
    prims = [Primitive.plane((0.0, 0.0, wall_z), wall_n, _random_material(rng, difficulty))]
    if difficulty is Difficulty.TEXTURED:
        floor_y = float(rng.uniform(0.3, 0.6))
        prims.append(Primitive.plane((0.0, floor_y, 0.0), (0.0, -1.0, -0.15),
                                     _random_material(rng, difficulty)))

    n_obj = int(rng.integers(1, 8 - len(prims) + 1))
    for k in range(n_obj):
        z = float(rng.uniform(0.6, wall_z - 0.2))
        x = float(rng.uniform(-0.7, 0.7) * slope_x * z)
        y = float(rng.uniform(-0.7, 0.7) * slope_y * z)
        size = float(rng.uniform(0.06, 0.22) * z)
        mat = _random_material(rng, difficulty)
        if difficulty is Difficulty.OCCLUSION and k == 0:
            # occluder straight ahead, something larger behind it
            z_back = float(rng.uniform(z + 0.3, wall_z - 0.05)) if z + 0.3 < wall_z - 0.05 else wall_z - 0.05
            back = Primitive.box((x - 1.5 * size, y - 1.5 * size, z_back - 0.05),
                                 (x + 1.5 * size, y + 1.5 * size, z_back + 0.05), mat)
            front_z = max(0.6, z - 0.3)
            prims.append(back)
            prims.append(Primitive.sphere((x * front_z / z_back, y * front_z / z_back, front_z),
                                          0.5 * size * front_z / z,
                                          _random_material(rng, difficulty)))
            continue
        if rng.random() < 0.5:
            prims.append(Primitive.sphere((x, y, z), size / 2, mat))
        else:
            h = size / 2
            prims.append(Primitive.box((x - h, y - h, z - h), (x + h, y + h, z + h), mat))
    prims = prims[:8]
    ambient = float(rng.uniform(0.0, 0.15))
    # exposure tuned so a mid-depth Lambertian surface lands near 0.7
    mid = float(np.sqrt(wall_z * np.median([_depth_of(p) for p in prims])))
    power = float(rng.uniform(0.6, 1.0) * mid * mid)
    return Scene(tuple(prims), ambient, power)


def _depth_of(p: Primitive) -> float:
    if p.kind == "plane":
        return p.params[2] if abs(p.params[5]) > 0.5 else 1.0
    if p.kind == "sphere":
        return p.params[2]
    return 0.5 * (p.params[2] + p.params[5])


def with_pattern(config: RenderConfig, pattern: PatternImage) -> RenderConfig:
    return replace(config, pattern=pattern)
