import math

import numpy as np
import pytest

from src.data.envs import CartPoleState, PendulumState
from src.data.render import RenderSpec, cart_centre_px, render_cartpole, render_pendulum
from src.errors import ValidationError


class TestPendulumFrames:
    def test_shape_range_and_label(self):
        image, label = render_pendulum(PendulumState(0.4, 0.0), RenderSpec(64))
        assert image.shape == (64, 64, 1)
        assert image.min() >= 0.0 and image.max() <= 1.0
        assert np.allclose(label, [math.sin(0.4), math.cos(0.4)])

    def test_mirror_state_renders_mirror_image(self):
        spec = RenderSpec(64)
        left, _ = render_pendulum(PendulumState(0.9, 0.0), spec)
        right, _ = render_pendulum(PendulumState(-0.9, 0.0), spec)
        assert np.max(np.abs(left - right[:, ::-1])) <= 1.0 / 255

    def test_horizontal_rod_is_row_symmetric(self):
        image, _ = render_pendulum(PendulumState(math.pi / 2, 0.0), RenderSpec(64))
        assert np.allclose(image, image[::-1], atol=1e-6)

    def test_rod_points_up_at_zero(self):
        image, _ = render_pendulum(PendulumState(0.0, 0.0), RenderSpec(64))
        assert image[10, 32, 0] < 0.5      # above the centre
        assert image[54, 32, 0] == 1.0     # below the axle

    def test_unsupported_size(self):
        with pytest.raises(ValidationError):
            RenderSpec(100)


class TestCartPoleFrames:
    def test_label_in_degrees(self):
        _, label = render_cartpole(CartPoleState(0.0, 0.0, math.radians(5.0), 0.0), RenderSpec(64))
        assert np.allclose(label, [5.0])

    def test_mirror(self):
        spec = RenderSpec(64)
        a, _ = render_cartpole(CartPoleState(0.8, 0.0, 0.1, 0.0), spec)
        b, _ = render_cartpole(CartPoleState(-0.8, 0.0, -0.1, 0.0), spec)
        assert np.max(np.abs(a - b[:, ::-1])) <= 1.0 / 255

    def test_cart_at_left_rail_touches_border(self):
        spec = RenderSpec(64)
        assert math.isclose(cart_centre_px(-2.4, spec), spec.cartpole['cart_width'] * 64 / 2.0)
        image, _ = render_cartpole(CartPoleState(-2.4, 0.0, 0.0, 0.0), spec)
        cart_row = int(spec.cartpole['track_row'] * 64 - spec.cartpole['cart_height'] * 64 / 2.0)
        assert image[cart_row, 0, 0] < 0.5

    def test_cart_past_rail_is_drawn_against_it(self):
        spec = RenderSpec(64)
        a, _ = render_cartpole(CartPoleState(-2.4, 0.0, 0.2, 0.0), spec)
        b, _ = render_cartpole(CartPoleState(-4.0, 0.0, 0.2, 0.0), spec)
        assert np.array_equal(a, b)
