import math

import numpy as np
import pytest

from src.data.envs import (CARTPOLE, CartPoleState, PendulumState, cartpole_step, pendulum_energy,
                           pendulum_step, wrap_angle)
from src.errors import NumericalAbort, ValidationError


def _reference_cartpole(state, z):
    """Vectorised restatement of the cart-pole Euler step"""
    x, x_dot, theta, theta_dot = state
    c = CARTPOLE
    force = c['force_mag'] * (2 * z - 1)
    m_total = c['masscart'] + c['masspole']
    ml = c['masspole'] * c['length']
    temp = (force + ml * theta_dot ** 2 * np.sin(theta)) / m_total
    theta_acc = (c['gravity'] * np.sin(theta) - np.cos(theta) * temp) / (
        c['length'] * (4.0 / 3.0 - c['masspole'] * np.cos(theta) ** 2 / m_total))
    x_acc = temp - ml * theta_acc * np.cos(theta) / m_total
    return np.array([x, x_dot, theta, theta_dot]) + c['dt'] * np.array([x_dot, x_acc, theta_dot, theta_acc])


class TestPendulum:
    def test_upright_is_a_fixed_point(self):
        s = PendulumState(0.0, 0.0)
        for _ in range(50):
            s = pendulum_step(s, 0.0)
        assert s == PendulumState(0.0, 0.0)

    def test_hanging_stays_put(self):
        s = PendulumState(math.pi, 0.0)
        for _ in range(50):
            s = pendulum_step(s, 0.0)
        assert abs(abs(s.theta) - math.pi) < 1e-10 and abs(s.theta_dot) < 1e-10

    def test_energy_does_not_drift(self):
        s = PendulumState(math.pi / 2, 0.0)
        energy = []
        for _ in range(2000):
            s = pendulum_step(s, 0.0)
            energy.append(pendulum_energy(s))
        assert abs(np.mean(energy[:100]) - np.mean(energy[-100:])) < 0.25

    def test_energy_audit_from_two_radians(self):
        s = PendulumState(2.0, 0.0)
        initial = pendulum_energy(s)
        worst = 0.0
        for _ in range(1000):
            s = pendulum_step(s, 0.0)
            worst = max(worst, abs(pendulum_energy(s) - initial) / abs(initial))
        # bounded oscillation of about 14% at dt=0.05, not secular drift
        assert worst < 0.15

    def test_mirror_symmetry(self):
        s = PendulumState(0.7, -1.3)
        m = PendulumState(-0.7, 1.3)
        for u in [0.5, -1.0, 2.0, 0.0]:
            s, m = pendulum_step(s, u), pendulum_step(m, -u)
            assert math.isclose(s.theta, -m.theta, abs_tol=1e-12)
            assert math.isclose(s.theta_dot, -m.theta_dot, abs_tol=1e-12)

    def test_torque_and_speed_clamped(self):
        s = pendulum_step(PendulumState(0.0, 7.9), 100.0)
        assert s.theta_dot == 8.0

    def test_non_finite_state(self):
        with pytest.raises(NumericalAbort):
            PendulumState(float('nan'), 0.0)


def test_wrap_angle_range():
    for theta in [-7.0, -math.pi, 0.0, math.pi, 3 * math.pi + 0.1]:
        wrapped = wrap_angle(theta)
        assert -math.pi < wrapped <= math.pi
        assert math.isclose(math.sin(wrapped), math.sin(theta), abs_tol=1e-12)


class TestCartPole:
    def test_unforced_equilibrium(self):
        s = CartPoleState(0.0, 0.0, 0.0, 0.0)
        for _ in range(20):
            s = cartpole_step(s, 1, force_mag=0.0)
        assert s == CartPoleState(0.0, 0.0, 0.0, 0.0)

    def test_matches_reference_for_ten_steps(self):
        s = CartPoleState(0.1, -0.2, 0.03, 0.1)
        ref = np.array([0.1, -0.2, 0.03, 0.1])
        for z in [1, 0, 0, 1, 1, 1, 0, 1, 0, 0]:
            s = cartpole_step(s, z)
            ref = _reference_cartpole(ref, z)
            assert np.allclose([s.x, s.x_dot, s.theta, s.theta_dot], ref, atol=1e-12, rtol=0)

    def test_mirror_symmetry(self):
        s = CartPoleState(0.3, 0.1, -0.05, 0.2)
        m = CartPoleState(-0.3, -0.1, 0.05, -0.2)
        for z in [1, 1, 0, 1, 0]:
            s, m = cartpole_step(s, z), cartpole_step(m, 1 - z)
            assert np.allclose([s.x, s.x_dot, s.theta, s.theta_dot], [-m.x, -m.x_dot, -m.theta, -m.theta_dot],
                               atol=1e-15, rtol=0)

    def test_push_right_accelerates_cart_right(self):
        s = cartpole_step(cartpole_step(CartPoleState(0.0, 0.0, 0.0, 0.0), 1), 1)
        assert s.x_dot > 0 and s.theta_dot < 0

    def test_limits(self):
        assert CartPoleState(0.0, 0.0, math.radians(13), 0.0).out_of_bounds()
        assert CartPoleState(2.5, 0.0, 0.0, 0.0).out_of_bounds()
        assert not CartPoleState(0.0, 0.0, 3.0, 0.0).fallen
        assert CartPoleState(0.0, 0.0, -3.2, 0.0).fallen

    def test_action_must_be_binary(self):
        with pytest.raises(ValidationError):
            cartpole_step(CartPoleState(0.0, 0.0, 0.0, 0.0), 2)
