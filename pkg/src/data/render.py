"""Software rasterizer for the pendulum and cart-pole frames.

Frames are grayscale (n, n, 1) arrays in [0, 1] on a white background. Each
pixel averages a supersample x supersample grid of coverage samples, and each
sample ramps linearly across one sub-pixel at shape edges, so the left-right
mirror of a state renders as the mirrored image.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from src.data.envs import CARTPOLE
from src.errors import ValidationError

logger = logging.getLogger(__name__)

RENDER_SIZES = (64, 128)

# Geometry as fractions of the image size
PENDULUM_GEOMETRY = {
    'rod_length': 0.40,
    'rod_width': 0.07,
    'axle_radius': 0.05,
    'rod_level': 0.0,
    'axle_level': 0.3,
}

CARTPOLE_GEOMETRY = {
    'track_row': 0.75,
    'track_width': 0.012,
    'cart_width': 0.125,
    'cart_height': 0.0625,
    'pole_length': 0.35,
    'pole_width': 0.03,
    'track_level': 0.5,
    'cart_level': 0.2,
    'pole_level': 0.0,
}


@dataclass(frozen=True)
class RenderSpec:
    size: int = 64
    supersample: int = 2
    pendulum: dict = field(default_factory=lambda: dict(PENDULUM_GEOMETRY))
    cartpole: dict = field(default_factory=lambda: dict(CARTPOLE_GEOMETRY))

    def __post_init__(self):
        if self.size not in RENDER_SIZES:
            raise ValidationError(f"render size must be one of {RENDER_SIZES}, got {self.size}")
        if self.supersample < 1:
            raise ValidationError("supersample factor must be at least 1")

    def to_dict(self):
        return {'size': self.size, 'supersample': self.supersample,
                'pendulum': dict(self.pendulum), 'cartpole': dict(self.cartpole)}


def _sample_grid(spec):
    """Sub-pixel sample coordinates (x = column, y = row), pixel units"""
    s = spec.supersample
    offsets = (np.arange(spec.size * s) + 0.5) / s
    xs, ys = np.meshgrid(offsets, offsets)
    return xs, ys


def _coverage(inside, spec):
    """Signed inside-distance (px) to a [0, 1] sample coverage"""
    return np.clip(inside * spec.supersample + 0.5, 0.0, 1.0)


def _segment_distance(xs, ys, a, b):
    dx, dy = b[0] - a[0], b[1] - a[1]
    length_sq = dx * dx + dy * dy
    if length_sq == 0.0:
        t = 0.0
    else:
        t = np.clip(((xs - a[0]) * dx + (ys - a[1]) * dy) / length_sq, 0.0, 1.0)
    return np.hypot(xs - (a[0] + t * dx), ys - (a[1] + t * dy))


def _paint(canvas, coverage, level):
    np.minimum(canvas, 1.0 - coverage * (1.0 - level), out=canvas)


def _resolve(canvas, spec):
    s = spec.supersample
    n = spec.size
    image = canvas.reshape(n, s, n, s).mean(axis=(1, 3))
    return np.clip(image, 0.0, 1.0)[..., None]


def render_pendulum(s, spec=None):
    """Rod from the image centre at angle theta (0 points up), plus the axle disc.

    Returns (image, label) with label = (sin theta, cos theta).
    """
    spec = spec or RenderSpec(64)
    g = spec.pendulum
    n = spec.size
    xs, ys = _sample_grid(spec)
    canvas = np.ones_like(xs)

    centre = (n / 2.0, n / 2.0)
    length = g['rod_length'] * n
    tip = (centre[0] + length * math.sin(s.theta), centre[1] - length * math.cos(s.theta))
    rod = _segment_distance(xs, ys, centre, tip)
    _paint(canvas, _coverage(g['rod_width'] * n / 2.0 - rod, spec), g['rod_level'])

    axle = np.hypot(xs - centre[0], ys - centre[1])
    _paint(canvas, _coverage(g['axle_radius'] * n - axle, spec), g['axle_level'])

    label = np.array([math.sin(s.theta), math.cos(s.theta)])
    return _resolve(canvas, spec), label


def cart_centre_px(x, spec):
    """Horizontal pixel of the cart centre.

    The rails at +-x_threshold put the cart edges on the image border; a cart
    past a rail is drawn against it.
    """
    n = spec.size
    cart_w = spec.cartpole['cart_width'] * n
    limit = CARTPOLE['x_threshold']
    x = min(max(x, -limit), limit)
    return cart_w / 2.0 + (x + limit) / (2.0 * limit) * (n - cart_w)


def render_cartpole(s, spec=None):
    """Track line, cart box and pole. Returns (image, label) with label = [theta in degrees]"""
    spec = spec or RenderSpec(128)
    g = spec.cartpole
    n = spec.size
    xs, ys = _sample_grid(spec)
    canvas = np.ones_like(xs)

    track_y = g['track_row'] * n
    _paint(canvas, _coverage(g['track_width'] * n / 2.0 - np.abs(ys - track_y), spec), g['track_level'])

    cx = cart_centre_px(s.x, spec)
    half_w = g['cart_width'] * n / 2.0
    half_h = g['cart_height'] * n / 2.0
    cy = track_y - half_h
    inside = np.minimum(half_w - np.abs(xs - cx), half_h - np.abs(ys - cy))
    _paint(canvas, _coverage(inside, spec), g['cart_level'])

    top = (cx, track_y - 2.0 * half_h)
    length = g['pole_length'] * n
    tip = (top[0] + length * math.sin(s.theta), top[1] - length * math.cos(s.theta))
    pole = _segment_distance(xs, ys, top, tip)
    _paint(canvas, _coverage(g['pole_width'] * n / 2.0 - pole, spec), g['pole_level'])

    return _resolve(canvas, spec), np.array([math.degrees(s.theta)])
