"""Simulated image datasets for CNN sensors.

A dataset directory holds:
    manifest.json  env, render spec, seed, episode bounds, splits, provenance
    images.bin     float32 LE frames, (N, n, n, 1) row-major
    labels.bin     float64 LE labels, (N, n_y)
"""

import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from src.config import ENV_DEFAULTS, SCHEMA_VERSION, SPLIT_FRACTIONS
from src.core.numeric import make_rng
from src.data.envs import (CARTPOLE, PENDULUM, CartPoleState, PendulumState, cartpole_step,
                           pendulum_step)
from src.data.render import RenderSpec, render_cartpole, render_pendulum
from src.data.storage import atomic_write_bytes, directory_sha256, read_json, write_json
from src.errors import MissingArtifactError, ValidationError

logger = logging.getLogger(__name__)

ENVS = ('pendulum', 'cartpole')
SPLITS = ('train', 'val', 'test')

# RNG stream ids
EPISODE_STREAM = 1
SPLIT_STREAM = 2


@dataclass
class Dataset:
    images: np.ndarray          # (N, n, n, 1)
    labels: np.ndarray          # (N, n_y)
    episode_bounds: np.ndarray  # (E + 1,) frame offsets of each episode
    meta: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)        # name -> frame indices
    source_index: np.ndarray = None                  # (N,) original frame of each row
    kinds: list = None                               # (N,) 'original' or disturbance kind

    def __post_init__(self):
        n = len(self.images)
        if len(self.labels) != n:
            raise ValidationError(f"{n} images but {len(self.labels)} labels")
        if self.source_index is None:
            self.source_index = np.arange(n, dtype=np.int64)
        if self.kinds is None:
            self.kinds = ['original'] * n

    def __len__(self):
        return len(self.images)

    @property
    def env(self):
        return self.meta.get('env')

    def indices(self, split_name, kind=None):
        """Frame indices of a split, optionally restricted to one kind"""
        idx = np.asarray(self.split.get(split_name, []), dtype=np.int64)
        if kind is not None:
            idx = idx[[self.kinds[i] == kind for i in idx]] if idx.size else idx
        return idx

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return self.images[idx], self.labels[idx]


def split_indices(n, seed, fractions=SPLIT_FRACTIONS):
    """Random disjoint train/val/test partition of range(n)"""
    if n < 3:
        raise ValidationError(f"need at least 3 frames to split, got {n}")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) <= 0:
        raise ValidationError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    order = make_rng(seed, SPLIT_STREAM).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = max(1, int(round(fractions[1] * n)))
    n_train = min(n_train, n - n_val - 1)
    return {
        'train': np.sort(order[:n_train]),
        'val': np.sort(order[n_train:n_train + n_val]),
        'test': np.sort(order[n_train + n_val:]),
    }


def _pendulum_episode(rng, horizon, spec):
    state = PendulumState(rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0))
    frames, labels = [], []
    for _ in range(horizon):
        image, label = render_pendulum(state, spec)
        frames.append(image)
        labels.append(label)
        u = rng.uniform(-PENDULUM['max_torque'], PENDULUM['max_torque'])
        state = pendulum_step(state, u)
    return frames, labels


def _cartpole_episode(rng, horizon, spec):
    state = CartPoleState(*rng.uniform(-0.05, 0.05, size=4))
    frames, labels = [], []
    for _ in range(horizon):
        image, label = render_cartpole(state, spec)
        frames.append(image)
        labels.append(label)
        if state.out_of_bounds():
            break
        state = cartpole_step(state, int(rng.integers(0, 2)))
    return frames, labels


def generate_dataset(env, n_episodes, seed, spec=None, horizon=None):
    """Roll uniform-random-control episodes and render every frame.

    Pendulum episodes run a fixed horizon; cart-pole episodes stop at the
    default angle/position limits or the horizon. Each episode draws from its
    own stream of the seed, so episode e is the same whatever n_episodes is.
    """
    if env not in ENVS:
        raise ValidationError(f"unknown env '{env}', expected one of {ENVS}")
    if n_episodes < 1:
        raise ValidationError("n_episodes must be at least 1")
    defaults = ENV_DEFAULTS[env]
    spec = spec or RenderSpec(defaults['size'])
    horizon = horizon or defaults['horizon']
    rollout = _pendulum_episode if env == 'pendulum' else _cartpole_episode

    frames, labels, bounds = [], [], [0]
    for e in range(n_episodes):
        ep_frames, ep_labels = rollout(make_rng(seed, EPISODE_STREAM, e), horizon, spec)
        frames.extend(ep_frames)
        labels.extend(ep_labels)
        bounds.append(len(frames))
    images = np.stack(frames).astype(np.float32).astype(np.float64)
    labels = np.stack(labels)
    logger.info(f"Generated {env} dataset: {n_episodes} episodes, {len(images)} frames at {spec.size}px")

    meta = {
        'env': env,
        'seed': int(seed),
        'n_episodes': int(n_episodes),
        'horizon': int(horizon),
        'render': spec.to_dict(),
        'physics': dict(PENDULUM if env == 'pendulum' else CARTPOLE),
        'augment_kinds': [],
    }
    return Dataset(images, labels, np.asarray(bounds, dtype=np.int64), meta,
                   split_indices(len(images), seed))


class DatasetCollector:
    """Reads and writes dataset directories"""

    def __init__(self, data_dir):
        self.data_dir = data_dir

    @property
    def manifest_file(self):
        return os.path.join(self.data_dir, 'manifest.json')

    def save(self, dataset):
        n = len(dataset)
        manifest = {
            'schema_version': SCHEMA_VERSION,
            'meta': dataset.meta,
            'n_frames': n,
            'image_shape': list(dataset.images.shape[1:]),
            'n_y': int(dataset.labels.shape[1]),
            'episode_bounds': dataset.episode_bounds,
            'split': {name: np.asarray(dataset.split.get(name, []), dtype=np.int64) for name in SPLITS},
            'source_index': dataset.source_index,
            'kinds': list(dataset.kinds),
        }
        os.makedirs(self.data_dir, exist_ok=True)
        atomic_write_bytes(os.path.join(self.data_dir, 'images.bin'),
                           np.ascontiguousarray(dataset.images, dtype='<f4').tobytes())
        atomic_write_bytes(os.path.join(self.data_dir, 'labels.bin'),
                           np.ascontiguousarray(dataset.labels, dtype='<f8').tobytes())
        write_json(self.manifest_file, manifest)
        logger.info(f"Saved {n} frames to {self.data_dir}")
        return self.dataset_hash()

    def load(self):
        manifest = self._read_manifest()
        n = manifest['n_frames']
        shape = tuple(manifest['image_shape'])
        images = self._read_array('images.bin', '<f4', (n,) + shape)
        labels = self._read_array('labels.bin', '<f8', (n, manifest['n_y']))
        dataset = Dataset(
            images.astype(np.float64),
            labels.astype(np.float64),
            np.asarray(manifest['episode_bounds'], dtype=np.int64),
            manifest['meta'],
            {name: np.asarray(idx, dtype=np.int64) for name, idx in manifest['split'].items()},
            np.asarray(manifest['source_index'], dtype=np.int64),
            list(manifest['kinds']),
        )
        logger.info(f"Loaded {n} {dataset.env} frames from {self.data_dir}")
        return dataset

    def dataset_hash(self):
        return directory_sha256(self.data_dir)

    def validate(self):
        """Check file sizes, label sanity and split partition; returns a summary dict"""
        manifest = self._read_manifest()
        dataset = self.load()
        n = len(dataset)
        split = [np.asarray(manifest['split'].get(name, []), dtype=np.int64) for name in SPLITS]
        joined = np.concatenate(split)
        if joined.size != n or not np.array_equal(np.sort(joined), np.arange(n)):
            raise ValidationError(f"{self.data_dir}: splits are not a disjoint cover of {n} frames")
        if not np.all(np.isfinite(dataset.labels)):
            raise ValidationError(f"{self.data_dir}: non-finite labels")
        if dataset.images.min() < 0.0 or dataset.images.max() > 1.0:
            raise ValidationError(f"{self.data_dir}: pixel values outside [0, 1]")
        if dataset.env == 'pendulum':
            norm = np.sum(dataset.labels ** 2, axis=1)
            if np.max(np.abs(norm - 1.0)) > 1e-12:
                raise ValidationError(f"{self.data_dir}: pendulum labels off the unit circle")
        results = {
            'n_frames': n,
            'env': dataset.env,
            'split_sizes': {name: int(idx.size) for name, idx in zip(SPLITS, split)},
            'kinds': sorted(set(dataset.kinds)),
        }
        logger.info(f"Dataset validation results: {results}")
        return results

    def _read_manifest(self):
        if not os.path.isdir(self.data_dir):
            raise MissingArtifactError(f"dataset directory not found: {self.data_dir}")
        manifest = read_json(self.manifest_file)
        if manifest.get('schema_version') != SCHEMA_VERSION:
            raise ValidationError(f"{self.manifest_file}: unsupported schema version")
        return manifest

    def _read_array(self, name, dtype, shape):
        path = os.path.join(self.data_dir, name)
        if not os.path.exists(path):
            raise MissingArtifactError(f"dataset file not found: {path}")
        data = np.fromfile(path, dtype=dtype)
        if data.size != int(np.prod(shape)):
            raise ValidationError(f"{path}: expected {int(np.prod(shape))} values, found {data.size}")
        return data.reshape(shape)


def with_frames(dataset, images, labels, source_index, kinds, augment_kinds):
    """Dataset extended by extra frames that join their source frame's split"""
    offset = len(dataset)
    split = {}
    for name in SPLITS:
        base = np.asarray(dataset.split.get(name, []), dtype=np.int64)
        member = np.isin(source_index, dataset.source_index[base]) if base.size else np.zeros(len(source_index), bool)
        split[name] = np.concatenate([base, offset + np.flatnonzero(member)])
    meta = dict(dataset.meta)
    meta['augment_kinds'] = list(augment_kinds)
    return replace(
        dataset,
        images=np.concatenate([dataset.images, images]),
        labels=np.concatenate([dataset.labels, labels]),
        meta=meta,
        split=split,
        source_index=np.concatenate([dataset.source_index, source_index]),
        kinds=list(dataset.kinds) + list(kinds),
    )
