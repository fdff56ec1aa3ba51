"""Pendulum swing-up and cart-pole dynamics.

Both steps are pure functions of (state, input). Constants follow the classic
swing-up pendulum and cart-pole formulations.
"""

import logging
import math
from dataclasses import dataclass

from src.errors import NumericalAbort, ValidationError

logger = logging.getLogger(__name__)

PENDULUM = {
    'g': 10.0,
    'm': 1.0,
    'l': 1.0,
    'dt': 0.05,
    'max_speed': 8.0,
    'max_torque': 2.0,
}

CARTPOLE = {
    'gravity': 9.8,
    'masscart': 1.0,
    'masspole': 0.1,
    'length': 0.5,      # half the pole length
    'force_mag': 10.0,
    'dt': 0.02,
    'x_threshold': 2.4,
    'theta_threshold_deg': 12.0,
}


def wrap_angle(theta):
    """Map an angle to (-pi, pi]"""
    return math.pi - (math.pi - theta) % (2.0 * math.pi)


@dataclass(frozen=True)
class PendulumState:
    theta: float       # 0 = upright
    theta_dot: float

    def __post_init__(self):
        if not (math.isfinite(self.theta) and math.isfinite(self.theta_dot)):
            raise NumericalAbort("pendulum state is non-finite")


@dataclass(frozen=True)
class CartPoleState:
    x: float
    x_dot: float
    theta: float       # radians from vertical, positive leans right
    theta_dot: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.x_dot, self.theta, self.theta_dot)):
            raise NumericalAbort("cart-pole state is non-finite")

    @property
    def fallen(self):
        """Pole rotated past 180 degrees in either direction"""
        return abs(self.theta) > math.pi

    def out_of_bounds(self):
        """Default episode limits used when generating training data"""
        limit = math.radians(CARTPOLE['theta_threshold_deg'])
        return abs(self.x) > CARTPOLE['x_threshold'] or abs(self.theta) > limit


def pendulum_step(s, u, dt=PENDULUM['dt']):
    """Semi-implicit Euler step of theta'' = 3g/(2l) sin(theta) + 3u/(m l^2)"""
    if not math.isfinite(u):
        raise NumericalAbort("pendulum torque is non-finite")
    g, m, l = PENDULUM['g'], PENDULUM['m'], PENDULUM['l']
    u = min(max(u, -PENDULUM['max_torque']), PENDULUM['max_torque'])
    acc = 3.0 * g / (2.0 * l) * math.sin(s.theta) + 3.0 * u / (m * l * l)
    theta_dot = s.theta_dot + acc * dt
    theta_dot = min(max(theta_dot, -PENDULUM['max_speed']), PENDULUM['max_speed'])
    theta = wrap_angle(s.theta + theta_dot * dt)
    return PendulumState(theta, theta_dot)


def pendulum_energy(s):
    """Total energy of the uniform rod, zero potential at the pivot height"""
    g, m, l = PENDULUM['g'], PENDULUM['m'], PENDULUM['l']
    return m * l * l * s.theta_dot ** 2 / 6.0 + 0.5 * m * g * l * math.cos(s.theta)


def cartpole_step(s, z, dt=CARTPOLE['dt'], force_mag=None):
    """Euler step of the cart-pole ODEs; z = 1 pushes right (+force), z = 0 left.

    `force_mag` overrides the configured push magnitude (0 gives the unforced system).
    """
    if z not in (0, 1):
        raise ValidationError(f"cart-pole action must be 0 or 1, got {z!r}")
    c = CARTPOLE
    total_mass = c['masscart'] + c['masspole']
    polemass_length = c['masspole'] * c['length']
    magnitude = c['force_mag'] if force_mag is None else force_mag
    force = magnitude if z == 1 else -magnitude

    cos_t = math.cos(s.theta)
    sin_t = math.sin(s.theta)
    temp = (force + polemass_length * s.theta_dot ** 2 * sin_t) / total_mass
    theta_acc = (c['gravity'] * sin_t - cos_t * temp) / (
        c['length'] * (4.0 / 3.0 - c['masspole'] * cos_t ** 2 / total_mass))
    x_acc = temp - polemass_length * theta_acc * cos_t / total_mass

    return CartPoleState(
        s.x + dt * s.x_dot,
        s.x_dot + dt * x_acc,
        s.theta + dt * s.theta_dot,
        s.theta_dot + dt * theta_acc,
    )
