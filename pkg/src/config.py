"""Runtime configuration and experiment defaults.

Environment variables (optionally from a .env file):
    SAFEOCC_SEED      overrides the manifest / default seed
    SAFEOCC_DATA_DIR  where datasets, models and tables are written (default: data)
    SAFEOCC_LOG_DIR   where the command log is written (default: logs)
"""

import os

from dotenv import load_dotenv

load_dotenv()

DATA_DIR = os.getenv('SAFEOCC_DATA_DIR', 'data')
LOG_DIR = os.getenv('SAFEOCC_LOG_DIR', 'logs')
DEFAULT_SEED = 0

SCHEMA_VERSION = 1


def env_seed():
    """Seed from SAFEOCC_SEED, or None when unset"""
    raw = os.getenv('SAFEOCC_SEED')
    if raw is None or raw.strip() == '':
        return None
    return int(raw)


def resolve_seed(flag_seed=None, manifest_seed=None):
    """Seed precedence: explicit flag > SAFEOCC_SEED > manifest > default"""
    if flag_seed is not None:
        return int(flag_seed)
    seed = env_seed()
    if seed is not None:
        return seed
    if manifest_seed is not None:
        return int(manifest_seed)
    return DEFAULT_SEED


# Environment and rendering defaults per scale
ENV_DEFAULTS = {
    'pendulum': {
        'size': 64,
        'episodes': 60,
        'full_episodes': 200,
        'horizon': 40,
        'filters': [8, 16, 32, 64],
        'full_filters': [16, 32, 64, 128],
        'dense_units': 64,
        'output_scale': 1.0,
    },
    'cartpole': {
        'size': 128,
        'episodes': 120,
        'full_episodes': 1000,
        'horizon': 200,
        'filters': [8, 16, 32, 64, 128],
        'full_filters': [16, 32, 64, 128, 256],
        'dense_units': 64,
        'output_scale': 10.0,
    },
}

# Adam training defaults
TRAINING_DEFAULTS = {
    'lr': 1e-3,
    'batch': 32,
    'max_epochs': 40,
    'patience': 5,
    'min_delta': 1e-4,
}

LR_SWEEP_GRID = [1e-2, 3e-3, 1e-3, 3e-4]

SPLIT_FRACTIONS = (0.7, 0.2, 0.1)

# Disturbance parameter ranges (sampled per image unless a spec overrides them)
DISTURBANCE_RANGES = {
    'blockages': {'count': (1, 4), 'side_frac': (0.10, 0.25), 'fill': 0.5},
    'blur': {'radius': (1, 3)},
    'fog': {'strength': (0.3, 0.6), 'octaves': 3, 'base_cells': 4},
    'noise': {'sigma': (0.05, 0.15)},
    'shift': {'jitter_frac': 0.08},
    'spatter': {'coverage': (0.02, 0.08), 'blob_sigma': 1.5, 'ink': 0.1},
}

DISTURBANCE_KINDS = ['blockages', 'blur', 'fog', 'noise', 'shift', 'spatter']

# Sensors A-G: which disturbances each sensor sees during training
SENSOR_ROSTER = {
    'A': [],
    'B': ['blockages'],
    'C': ['blur'],
    'D': ['fog'],
    'E': ['noise'],
    'F': ['shift'],
    'G': ['spatter'],
}

# One-class SVM defaults
OCC_DEFAULTS = {
    'nu': 1e-4,
    'gamma': 'auto',
    'epsilon': 0.0,
    'tol': 1e-6,
    'max_updates': 10 ** 6,
    'gram_cache_limit': 4096,
}

# Cart-pole controller. The process is direct acting on y_e = y_sp - y_hat,
# hence the negative gains. kp and kd are a point of GAIN_TUNING_GRID;
# `python main.py tune-gains` records the run in <data dir>/results/gain_tuning.csv
# and tests/test_acceptance.py checks these gains against it on every tuning seed.
CONTROL_DEFAULTS = {
    'setpoint_deg': 0.0,
    'kp': -1.0,
    'ki': -0.05,
    'kd': -0.4,
    'tau_f': 0.02,
    'integral_limit': 50.0,
    'dt': 0.02,
    'horizon': 400,
    'onset': 150,
    'debounce': 3,
    'recourse': 'freeze_last_control',
}

GAIN_TUNING_GRID = {
    'kp': [-0.5, -1.0, -2.0],
    'kd': [-0.1, -0.2, -0.4, -0.8],
    'seeds': [0, 1, 2],
    'horizon': 300,
}
