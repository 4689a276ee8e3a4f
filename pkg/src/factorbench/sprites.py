"""Procedural dSprites-like renderer.

Sprites are rasterised by point-sampling an ``ss x ss`` sub-pixel grid in
every pixel and box-filtering the hits, so pixel values are multiples of
1/ss^2. Determinism rules:

* sprite centres are snapped to a 1/8-pixel grid, which together with the
  sub-pixel sample offsets (multiples of 1/(2 ss)) makes the sample set
  symmetric under quarter turns about the centre;
* rotation cosines/sines are rounded to 12 decimals, so quarter turns are
  exact and boundary decisions do not depend on libm rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .factors import FactorSpace

SHAPES = ("square", "ellipse", "triangle")

# outlines are sized to roughly equal area (about 4 s^2 for half-size s)
_ELLIPSE_AXES = (1.4, 0.7)
_TRIANGLE_RADIUS = 1.6
# circumradius of each outline in units of its half-size
_EXTENT = {"square": math.sqrt(2.0), "ellipse": _ELLIPSE_AXES[0], "triangle": _TRIANGLE_RADIUS}


class RendererConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RendererConfig:
    canvas: int = 64
    shapes: tuple[str, ...] = SHAPES
    scale_range: tuple[float, float] = (0.06, 0.12)  # half-size as a fraction of the canvas
    rotation_span: float = 360.0  # degrees covered by the orientation axis, endpoint excluded
    margin: float = 0.2  # fraction of the canvas kept free on each side for sprite centres
    supersample: int = 4
    threshold: float | None = None  # binarise coverage at this level when set

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        unknown = set(self.shapes) - set(SHAPES)
        if unknown:
            raise RendererConfigError(f"unknown shapes {sorted(unknown)}")
        if self.canvas < 4 or self.supersample < 1:
            raise RendererConfigError("canvas must be >= 4 and supersample >= 1")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise RendererConfigError(f"bad scale range {self.scale_range}")
        reach = hi * max(_EXTENT[s] for s in self.shapes)
        if reach > self.margin or self.margin >= 0.5:
            raise RendererConfigError(
                f"largest sprite reaches {reach:.3f} of the canvas from its centre but the "
                f"position margin is {self.margin:.3f}; shapes would leave the canvas")

    @property
    def injective(self) -> bool:
        return self.rotation_span <= 90.0


FULL_ROTATION = RendererConfig()
INJECTIVE_ROTATION = RendererConfig(rotation_span=90.0)


@lru_cache(maxsize=8)
def _sample_grid(canvas: int, ss: int) -> tuple[np.ndarray, np.ndarray]:
    offs = (np.arange(canvas * ss, dtype=np.float64) + 0.5) / ss
    return np.meshgrid(offs, offs, indexing="xy")  # X varies along columns, Y along rows


def _inside(shape: str, u: np.ndarray, v: np.ndarray, s: float) -> np.ndarray:
    if shape == "square":
        return (np.abs(u) <= s) & (np.abs(v) <= s)
    if shape == "ellipse":
        a, b = _ELLIPSE_AXES
        return (u / (a * s)) ** 2 + (v / (b * s)) ** 2 <= 1.0
    # equilateral triangle centred on its centroid, apex pointing up (negative v)
    r = _TRIANGLE_RADIUS * s
    k = math.sqrt(3.0)
    return (v <= 0.5 * r) & (k * u - v <= r) & (-k * u - v <= r)


def sprite_pose(config: RendererConfig, space: FactorSpace, levels) -> dict:
    """Continuous pose (pixel units / degrees) commanded by a factor vector."""
    shape_l, scale_l, rot_l, x_l, y_l = (int(v) for v in levels)
    cards = space.cardinalities
    lo, hi = config.scale_range
    frac = scale_l / (cards[1] - 1) if cards[1] > 1 else 1.0
    half = (lo + (hi - lo) * frac) * config.canvas
    angle = config.rotation_span * rot_l / cards[2]
    c = config.canvas
    m = config.margin * c

    def centre(level, card):
        t = level / (card - 1) if card > 1 else 0.5
        return round((m + t * (c - 2 * m)) * 8) / 8

    return {"shape": config.shapes[shape_l], "half_size": half, "angle": angle,
            "cx": centre(x_l, cards[3]), "cy": centre(y_l, cards[4])}


def render_sprite(config: RendererConfig, space: FactorSpace, levels) -> np.ndarray:
    """Render one factor vector to a (canvas, canvas, 1) float32 image in [0, 1]."""
    check_compatible(space, config)
    space.index_of(levels)  # validates ranges
    pose = sprite_pose(config, space, levels)
    ss = config.supersample
    X, Y = _sample_grid(config.canvas, ss)
    theta = math.radians(pose["angle"])
    cos_t = round(math.cos(theta), 12) + 0.0
    sin_t = round(math.sin(theta), 12) + 0.0
    dx = X - pose["cx"]
    dy = Y - pose["cy"]
    # rotate sample points into the sprite frame
    u = cos_t * dx + sin_t * dy
    v = -sin_t * dx + cos_t * dy
    hit = _inside(pose["shape"], u, v, pose["half_size"])
    c = config.canvas
    cover = hit.reshape(c, ss, c, ss).sum(axis=(1, 3)).astype(np.float32) / (ss * ss)
    if config.threshold is not None:
        cover = (cover >= config.threshold).astype(np.float32)
    return cover[:, :, None]


def check_compatible(space: FactorSpace, config: RendererConfig) -> None:
    if space.n_factors != 5:
        raise RendererConfigError(
            f"sprite spaces have 5 axes (shape, scale, orientation, x, y); {space.name!r} has {space.n_factors}")
    shape_axis = space.axes[0]
    if shape_axis.cardinality != len(config.shapes):
        raise RendererConfigError(
            f"axis {shape_axis.name!r} has {shape_axis.cardinality} levels but the renderer "
            f"draws {len(config.shapes)} shapes")
    for axis in space.axes[3:]:
        if axis.cardinality > config.canvas:
            raise RendererConfigError(f"axis {axis.name!r}: more positions than canvas pixels")


def config_for_preset(name: str, canvas: int = 64) -> RendererConfig:
    inj = name in ("dsprites-inj", "dsprites-ci", "dsprites-tiny")
    return RendererConfig(canvas=canvas, rotation_span=90.0 if inj else 360.0)
