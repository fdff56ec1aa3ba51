"""Closed-loop cart-pole runs with a CNN sensor, a novelty detector and a
safety system in the measurement path.

Each step: render the state, optionally disturb the frame (from the scenario
onset), predict y_hat with the sensor, score the frame, let the safety system
choose a directive, compute the PID action and advance the physics. The run
ends at the horizon or when the pole passes 180 degrees.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import pandas as pd

from src.algorithm.cnn import predict
from src.algorithm.safe_occ import ParallelDetector, novelty_signal, parallel_verdict
from src.config import CONTROL_DEFAULTS, ENV_DEFAULTS, GAIN_TUNING_GRID
from src.control.pid import PidController, binary_action
from src.core.numeric import derive_seed, make_rng
from src.data.augment import disturb_frame
from src.data.envs import CartPoleState, cartpole_step
from src.data.render import RenderSpec, render_cartpole
from src.errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)

RECOURSES = ('freeze_last_control', 'zero_control')
PASS_THROUGH = 'pass_through'

LOOP_COLUMNS = ['t', 'y_true', 'y_hat', 'y_err', 'z', 'h_hat', 'score', 'verdict', 'alarm']
TUNING_COLUMNS = ['kp', 'ki', 'kd', 'tau_f', 'seed', 'steps_survived', 'max_abs_theta_deg']

LOOP_STREAM = 3
DISTURB_STREAM = 4


@dataclass
class SafetySystem:
    debounce: int = CONTROL_DEFAULTS['debounce']
    recourse: str = CONTROL_DEFAULTS['recourse']
    alarm: bool = False
    consecutive: int = 0
    alarm_step: Optional[int] = None
    steps: int = 0

    def __post_init__(self):
        if self.debounce < 1:
            raise ValidationError("safety debounce must be at least 1")
        if self.recourse not in RECOURSES:
            raise ValidationError(f"unknown recourse '{self.recourse}', expected one of {RECOURSES}")

    def update(self, verdict):
        """Consume one verdict ('novel'/'normal' or an object with is_novel) and return a directive"""
        novel = verdict.is_novel if hasattr(verdict, 'is_novel') else verdict == 'novel'
        self.steps += 1
        if not self.alarm:
            self.consecutive = self.consecutive + 1 if novel else 0
            if self.consecutive >= self.debounce:
                self.alarm = True
                self.alarm_step = self.steps
                logger.warning(f"Safety alarm latched after {self.debounce} consecutive novel frames "
                               f"(verdict {self.steps}); recourse {self.recourse}")
        return self.recourse if self.alarm else PASS_THROUGH

    def reset(self):
        self.alarm = False
        self.consecutive = 0
        self.alarm_step = None
        self.steps = 0


def safety_update(ss, verdict):
    return ss.update(verdict)


@dataclass(frozen=True)
class Scenario:
    name: str
    disturbance: Optional[str] = None
    onset: int = CONTROL_DEFAULTS['onset']


SCENARIOS = {
    'clean': Scenario('clean'),
    'fog': Scenario('fog', 'fog'),
    'spatter': Scenario('spatter', 'spatter'),
    'blockages': Scenario('blockages', 'blockages'),
}


@dataclass
class LoopRecord:
    t: int
    y_true: float
    y_hat: float
    y_err: float
    z: int
    h_hat: float = math.nan
    score: float = math.nan
    verdict: str = 'none'
    alarm: bool = False


@dataclass
class LoopResult:
    records: List[LoopRecord] = field(default_factory=list)
    terminated: bool = False   # pole passed 180 degrees before the horizon

    @property
    def steps_survived(self):
        return len(self.records)

    @property
    def alarm_step(self):
        """t of the first alarmed record, or None"""
        return next((r.t for r in self.records if r.alarm), None)


def _check_components(cnn, detector, spec):
    if cnn is None:
        if detector is not None:
            raise ValidationError("a novelty detector needs the CNN sensor it was fitted on")
        return
    if tuple(cnn.input_shape) != (spec.size, spec.size, 1):
        raise ShapeError(f"sensor expects {tuple(cnn.input_shape)} frames, renderer makes {spec.size}x{spec.size}x1")
    if cnn.n_y != 1:
        raise ShapeError(f"cart-pole sensor must predict one value, this one predicts {cnn.n_y}")


def _score(detector, cnn, image):
    """(h_hat, score, verdict label) for one frame"""
    if isinstance(detector, ParallelDetector):
        pv = parallel_verdict(detector, cnn, image)
        worst = max(pv.members, key=lambda v: v.score)
        return worst.h_hat, worst.score, pv.label
    v = novelty_signal(detector, cnn, image)
    return v.h_hat, v.score, v.label


def run_closed_loop(cnn=None, pid=None, detector=None, safety=None, scenario=None,
                    horizon=CONTROL_DEFAULTS['horizon'], seed=0, spec=None,
                    setpoint_deg=CONTROL_DEFAULTS['setpoint_deg'], initial_state=None):
    """Run one cart-pole episode; `cnn=None` feeds the true angle back instead.

    Returns a LoopResult. Deterministic in (components, scenario, seed).
    """
    if horizon < 1:
        raise ValidationError("closed-loop horizon must be at least 1 step")
    spec = spec or RenderSpec(ENV_DEFAULTS['cartpole']['size'])
    scenario = scenario or SCENARIOS['clean']
    pid = pid or PidController()
    pid.reset()
    if safety is not None:
        safety.reset()
    _check_components(cnn, detector, spec)

    if initial_state is None:
        initial_state = CartPoleState(*make_rng(seed, LOOP_STREAM).uniform(-0.05, 0.05, size=4))
    state = initial_state
    result = LoopResult()
    last_z = binary_action(0.0)

    for t in range(horizon):
        y_true = math.degrees(state.theta)
        h_hat, score, verdict = math.nan, math.nan, 'none'
        if cnn is None:
            y_hat = y_true
        else:
            image, _ = render_cartpole(state, spec)
            if scenario.disturbance is not None and t >= scenario.onset:
                image, _ = disturb_frame(image, scenario.disturbance, derive_seed(seed, DISTURB_STREAM), t)
            y_hat = float(predict(cnn, image[None])[0, 0])
            if detector is not None:
                h_hat, score, verdict = _score(detector, cnn, image)

        directive = safety.update(verdict) if safety is not None and verdict != 'none' else PASS_THROUGH
        y_err = setpoint_deg - y_hat
        u = pid.step(y_err)
        if directive == 'freeze_last_control':
            z = last_z
        elif directive == 'zero_control':
            z = binary_action(0.0)
        else:
            z = binary_action(u)
            last_z = z

        alarm = bool(safety is not None and safety.alarm)
        result.records.append(LoopRecord(t, y_true, y_hat, y_err, z, h_hat, score, verdict, alarm))
        state = cartpole_step(state, z)
        if state.fallen:
            result.terminated = True
            logger.info(f"Scenario {scenario.name}: pole fell at step {t + 1}")
            break

    logger.info(f"Scenario {scenario.name}: {result.steps_survived} steps, "
                f"max |theta| {max(abs(r.y_true) for r in result.records):.1f} deg, "
                f"alarm at {result.alarm_step}")
    return result


def records_to_frame(records):
    """LoopRecords as a DataFrame with LOOP_COLUMNS"""
    if isinstance(records, LoopResult):
        records = records.records
    rows = [vars(r) for r in records]
    return pd.DataFrame(rows, columns=LOOP_COLUMNS)


def tune_gains(kp_grid=None, kd_grid=None, seeds=None, horizon=None, base=None):
    """Grid search of (kp, kd) on true-state feedback.

    One row per (kp, kd, seed) with TUNING_COLUMNS.
    """
    kp_grid = kp_grid or GAIN_TUNING_GRID['kp']
    kd_grid = kd_grid or GAIN_TUNING_GRID['kd']
    seeds = seeds if seeds is not None else GAIN_TUNING_GRID['seeds']
    horizon = horizon or GAIN_TUNING_GRID['horizon']
    base = dict(CONTROL_DEFAULTS if base is None else base)
    rows = []
    for kp in kp_grid:
        for kd in kd_grid:
            for seed in seeds:
                pid = PidController(kp, base['ki'], kd, base['dt'], base['tau_f'], base['integral_limit'])
                result = run_closed_loop(pid=pid, horizon=horizon, seed=seed)
                rows.append({
                    'kp': kp, 'ki': base['ki'], 'kd': kd, 'tau_f': base['tau_f'], 'seed': seed,
                    'steps_survived': result.steps_survived,
                    'max_abs_theta_deg': max(abs(r.y_true) for r in result.records),
                })
    return pd.DataFrame(rows, columns=TUNING_COLUMNS)


def best_gains(table):
    """(kp, kd) with the most steps survived on average, then the smallest mean peak angle"""
    summary = table.groupby(['kp', 'kd'], sort=True).agg(
        steps=('steps_survived', 'mean'), peak=('max_abs_theta_deg', 'mean')).reset_index()
    summary = summary.sort_values(['steps', 'peak'], ascending=[False, True], kind='stable')
    best = summary.iloc[0]
    return float(best['kp']), float(best['kd'])
