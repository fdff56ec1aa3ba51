"""
PID controller with a filtered derivative and a clamped integral.

Gain params:
    kp, ki, kd = proportional, integral and derivative gains on y_e = y_sp - y_hat

Other params:
    dt = discrete time step (s)
    tau_f = derivative filter time constant (s); 0 disables filtering
    integral_limit = clamp on the accumulated integral |I|
"""

import logging
import math
from dataclasses import dataclass

from src.config import CONTROL_DEFAULTS
from src.errors import ValidationError

logger = logging.getLogger(__name__)


@dataclass
class PidController:
    kp: float = CONTROL_DEFAULTS['kp']
    ki: float = CONTROL_DEFAULTS['ki']
    kd: float = CONTROL_DEFAULTS['kd']
    dt: float = CONTROL_DEFAULTS['dt']
    tau_f: float = CONTROL_DEFAULTS['tau_f']
    integral_limit: float = CONTROL_DEFAULTS['integral_limit']

    def __post_init__(self):
        if self.dt <= 0:
            raise ValidationError("PID dt must be positive")
        if self.tau_f < 0:
            raise ValidationError("PID derivative filter constant must be non-negative")
        if self.integral_limit <= 0:
            raise ValidationError("PID integral limit must be positive")
        self.reset()

    def reset(self):
        self.integral = 0.0
        self.prev_error = None
        self.d_filtered = 0.0

    @property
    def beta(self):
        """Derivative filter blend dt / (tau_f + dt)"""
        return self.dt / (self.tau_f + self.dt)

    def step(self, y_e):
        if not math.isfinite(y_e):
            raise ValidationError("PID error input is non-finite")
        self.integral = min(max(self.integral + y_e * self.dt, -self.integral_limit), self.integral_limit)

        # No derivative on the first sample after reset
        raw = 0.0 if self.prev_error is None else (y_e - self.prev_error) / self.dt
        self.d_filtered += self.beta * (raw - self.d_filtered)
        self.prev_error = y_e

        return self.kp * y_e + self.ki * self.integral + self.kd * self.d_filtered

    def gains(self):
        return {'kp': self.kp, 'ki': self.ki, 'kd': self.kd, 'tau_f': self.tau_f,
                'dt': self.dt, 'integral_limit': self.integral_limit}


def pid_step(c, y_e):
    return c.step(y_e)


def binary_action(u):
    """Push right (1) when u >= 0, the side where sigmoid(u) >= 0.5; left (0) otherwise"""
    return 1 if u >= 0 else 0
