"""Structured-light pattern generators.

Eight pattern families are provided. Six are used for training and two are
held out for testing generalization to unseen patterns. The dot families are
statistical stand-ins for the proprietary layouts of commercial projectors,
not reproductions of them.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from nsl_lab._random import stream


class InvalidPatternSpec(ValueError):
    pass


class PatternKind(str, enum.Enum):
    DOTS_D415 = "dots_d415"
    DOTS_D435 = "dots_d435"
    KINECT_DOTS = "kinect_dots"
    RANDOM_BINARY = "random_binary"
    RANDOM_SQUARE = "random_square"
    SINCOS = "sincos"
    ALACARTE = "alacarte"
    ALACARTE_ROLL = "alacarte_roll"


TRAIN_KINDS = (
    PatternKind.ALACARTE,
    PatternKind.ALACARTE_ROLL,
    PatternKind.DOTS_D415,
    PatternKind.DOTS_D435,
    PatternKind.SINCOS,
    PatternKind.RANDOM_BINARY,
)
TEST_KINDS = (PatternKind.KINECT_DOTS, PatternKind.RANDOM_SQUARE)

# kind -> default params; keys outside this table are rejected
DEFAULT_PARAMS: dict[PatternKind, dict[str, float]] = {
    # one-pixel dots on a jittered grid: density = p_dot / cell**2
    PatternKind.DOTS_D415: {"cell": 3, "p_dot": 0.72},
    PatternKind.DOTS_D435: {"cell": 3, "p_dot": 0.90},
    PatternKind.KINECT_DOTS: {"cell": 4, "p_dot": 0.96},
    PatternKind.RANDOM_BINARY: {"p": 0.5},
    PatternKind.RANDOM_SQUARE: {"min_side": 3, "max_side": 9, "coverage": 0.30},
    PatternKind.SINCOS: {"period_x": 16.0, "period_y": 16.0},
    PatternKind.ALACARTE: {"p": 0.5},
    PatternKind.ALACARTE_ROLL: {"p": 0.5},
}


@dataclass(frozen=True)
class PatternSpec:
    kind: PatternKind
    width: int
    height: int
    seed: int = 0
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", PatternKind(self.kind))
        except ValueError:
            raise InvalidPatternSpec(f"unknown pattern kind {self.kind!r}") from None
        if int(self.width) < 8 or int(self.height) < 8:
            raise InvalidPatternSpec(
                f"pattern must be at least 8x8, got {self.width}x{self.height}")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise InvalidPatternSpec(
                f"unknown params for {self.kind.value}: {sorted(unknown)}")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidPatternSpec("seed must be a 64-bit unsigned integer")

    def resolved_params(self) -> dict[str, Any]:
        return {**DEFAULT_PARAMS[self.kind], **self.params}

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "width": int(self.width),
                "height": int(self.height), "seed": int(self.seed),
                "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "PatternSpec":
        return cls(kind=d["kind"], width=int(d["width"]), height=int(d["height"]),
                   seed=int(d.get("seed", 0)), params=dict(d.get("params", {})))


@dataclass(frozen=True)
class PatternImage:
    intensities: np.ndarray  # (height, width) float64 in [0, 1], read-only
    spec: PatternSpec | None = None

    def __post_init__(self):
        self.intensities.setflags(write=False)

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    @property
    def width(self) -> int:
        return self.intensities.shape[1]


def _dots(rng, h, w, cell, p_dot):
    cell = int(cell)
    img = np.zeros((h, w))
    gh, gw = math.ceil(h / cell), math.ceil(w / cell)
    keep = rng.random((gh, gw)) < p_dot
    oy = rng.integers(0, cell, size=(gh, gw))
    ox = rng.integers(0, cell, size=(gh, gw))
    gy, gx = np.nonzero(keep)
    ys = gy * cell + oy[gy, gx]
    xs = gx * cell + ox[gy, gx]
    inside = (ys < h) & (xs < w)
    img[ys[inside], xs[inside]] = 1.0
    return img


def _random_square(rng, h, w, min_side, max_side, coverage):
    img = np.zeros((h, w))
    target = coverage * h * w
    lit = 0
    # the loop always terminates: every square lights at least one new pixel eventually
    while lit < target:
        s = int(rng.integers(int(min_side), int(max_side) + 1))
        y = int(rng.integers(0, h))
        x = int(rng.integers(0, w))
        img[y:y + s, x:x + s] = 1.0
        lit = int(img.sum())
    return img


def _alacarte(rng, h, w, p):
    code = (rng.random(w) < p).astype(np.float64)
    return np.broadcast_to(code, (h, w)).copy()


def generate_pattern(spec: PatternSpec) -> PatternImage:
    """Render the pattern described by ``spec``; a pure function of the spec."""
    kind = spec.kind
    h, w = int(spec.height), int(spec.width)
    prm = spec.resolved_params()
    rng = stream(spec.seed, "pattern", kind.value)

    if kind in (PatternKind.DOTS_D415, PatternKind.DOTS_D435, PatternKind.KINECT_DOTS):
        img = _dots(rng, h, w, prm["cell"], prm["p_dot"])
    elif kind is PatternKind.RANDOM_BINARY:
        img = (rng.random((h, w)) < prm["p"]).astype(np.float64)
    elif kind is PatternKind.RANDOM_SQUARE:
        img = _random_square(rng, h, w, prm["min_side"], prm["max_side"], prm["coverage"])
    elif kind is PatternKind.SINCOS:
        x = np.arange(w)[None, :]
        y = np.arange(h)[:, None]
        img = (0.5 + 0.25 * np.sin(2 * np.pi * x / prm["period_x"])
               + 0.25 * np.cos(2 * np.pi * y / prm["period_y"]))
    elif kind is PatternKind.ALACARTE:
        img = _alacarte(rng, h, w, prm["p"])
    elif kind is PatternKind.ALACARTE_ROLL:
        img = _alacarte(rng, h, w, prm["p"])
        shifts = rng.integers(0, w, size=h)
        for row in range(h):
            img[row] = np.roll(img[row], shifts[row])
    else:  # pragma: no cover - enum is exhaustive
        raise InvalidPatternSpec(f"unknown pattern kind {kind!r}")

    return PatternImage(np.clip(img, 0.0, 1.0), spec)


def alacarte_stack(width: int, height: int, count: int, seed: int) -> list[PatternImage]:
    """``count`` independent alacarte column codes, as projected for temporal decoding."""
    return [generate_pattern(PatternSpec(PatternKind.ALACARTE, width, height,
                                         seed=(int(seed) * 1000 + k) % 2**64))
            for k in range(count)]
