"""Novelty detectors built on a CNN sensor's own feature maps.

A detector taps one block of the sensor, scalarizes each filter's feature map
to a single value, refines the resulting vector, optionally reduces it with
PCA, and scores it with a one-class SVM:

    h = occ(refine(scalarize(P)))

Detectors can be combined in parallel; the combined verdict is the union of
the members' novel verdicts.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Union

import numpy as np
import pandas as pd

from src.algorithm.cnn import TapPoint, extract_tap_batch, predict
from src.algorithm.occ import (OcSvmModel, Verdict, decision_batch, fit_ocsvm,
                               scores_from_decisions)
from src.algorithm.reduction import (PcaModel, RefinerModel, TwoDPcaModel, apply_pca,
                                     fit_2d2pca, fit_pca, fit_refiner, refine,
                                     scalarize_batch, REFINERS, SCALARIZERS)
from src.config import OCC_DEFAULTS
from src.core.numeric import as_tensor3
from src.errors import ValidationError

logger = logging.getLogger(__name__)

ACCURACY_COLUMNS = ['sensor', 'config', 'test_set', 'label', 'accuracy_pct', 'n_images']
SCORE_COLUMNS = ['sensor', 'config', 'test_set', 'label', 'index', 'h_hat', 'rho', 'epsilon', 'tol', 'score', 'verdict']


@dataclass
class DetectorConfig:
    name: str
    tap: TapPoint
    scalarizer: str = 'max'
    refiner: str = 'standard'
    pca: Union[str, int, float] = 'off'   # 'off', component count, or variance fraction
    nu: float = OCC_DEFAULTS['nu']
    gamma: Union[str, float] = OCC_DEFAULTS['gamma']
    epsilon: float = OCC_DEFAULTS['epsilon']

    def __post_init__(self):
        if self.scalarizer not in SCALARIZERS:
            raise ValidationError(f"unknown scalarizer '{self.scalarizer}'")
        if self.refiner not in REFINERS:
            raise ValidationError(f"unknown refiner '{self.refiner}'")
        if not (self.pca == 'off' or isinstance(self.pca, (int, float))):
            raise ValidationError(f"pca must be 'off', a component count or a variance fraction, got {self.pca!r}")
        if isinstance(self.pca, float) and not 0.0 < self.pca <= 1.0:
            raise ValidationError("pca variance fraction must be in (0, 1]")
        if not (self.gamma == 'auto' or (isinstance(self.gamma, (int, float)) and self.gamma > 0)):
            raise ValidationError("gamma must be 'auto' or positive")

    def to_dict(self):
        return {
            'name': self.name,
            'tap': self.tap.to_dict(),
            'scalarizer': self.scalarizer,
            'refiner': self.refiner,
            'pca': self.pca,
            'nu': self.nu,
            'gamma': self.gamma,
            'epsilon': self.epsilon,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data['tap'] = TapPoint(**data['tap'])
        return cls(**data)

    def digest(self):
        """Stable hash of the configuration"""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(text.encode('utf-8')).hexdigest()


PRESETS = {
    'config1': DetectorConfig('config1', TapPoint(1, 'pooled'), 'max', 'standard', 'off'),
    'config2': DetectorConfig('config2', TapPoint(-1, 'pooled'), 'twod_pca', 'standard', 'off'),
    'cartpole': DetectorConfig('cartpole', TapPoint(5, 'pooled'), 'twod_pca', 'standard', 'off'),
}


@dataclass
class SafeOccDetector:
    config: DetectorConfig
    refiner: RefinerModel
    occ: OcSvmModel
    twod: Optional[TwoDPcaModel] = None
    pca: Optional[PcaModel] = None

    def with_epsilon(self, epsilon):
        return replace(self, config=replace(self.config, epsilon=float(epsilon)))


@dataclass
class ParallelDetector:
    detectors: List[SafeOccDetector] = field(default_factory=list)

    def __post_init__(self):
        if not self.detectors:
            raise ValidationError("a parallel detector needs at least one member")


@dataclass
class ParallelVerdict:
    label: str
    members: List[Verdict]


def extract_features(model, image, tap):
    """The tapped Psi / A / P tensor for one image"""
    return extract_tap_batch(model, as_tensor3(image)[None], tap)[0]


def extract_features_batch(model, images, tap, batch_size=64):
    return extract_tap_batch(model, images, tap, batch_size)


def _scalarized(detector, maps):
    return scalarize_batch(maps, detector.config.scalarizer, detector.twod)


def refined_features(detector, model, images, batch_size=64):
    """Feature vectors as seen by the OC-SVM, one row per image"""
    maps = extract_tap_batch(model, images, detector.config.tap, batch_size)
    v = refine(detector.refiner, _scalarized(detector, maps))
    if detector.pca is not None:
        v = apply_pca(detector.pca, v)
    return v


def fit_detector(model, images, config, batch_size=64):
    """Fit every stage on the sensor's training images, in pipeline order"""
    maps = extract_tap_batch(model, images, config.tap, batch_size)
    logger.info(f"Fitting detector '{config.name}' on {maps.shape[0]} images, tap block "
                f"{config.tap.resolve(model)} {config.tap.signal} {maps.shape[1:]}")

    twod = fit_2d2pca(maps, d=1, r=1) if config.scalarizer == 'twod_pca' else None
    v = scalarize_batch(maps, config.scalarizer, twod)
    refiner = fit_refiner(v, config.refiner)
    v = refine(refiner, v)

    pca = None
    if config.pca != 'off':
        if isinstance(config.pca, float):
            pca = fit_pca(v, variance_threshold=config.pca)
        else:
            pca = fit_pca(v, d=int(config.pca))
        v = apply_pca(pca, v)

    gamma = None if config.gamma == 'auto' else float(config.gamma)
    occ = fit_ocsvm(v, nu=config.nu, gamma=gamma)
    return SafeOccDetector(config, refiner, occ, twod, pca)


def novelty_scores(detector, model, images, batch_size=64):
    """(h_hat, score, novel mask) arrays for a batch of images"""
    v = refined_features(detector, model, images, batch_size)
    h_hat = decision_batch(detector.occ, v)
    score = scores_from_decisions(detector.occ, h_hat, detector.config.epsilon)
    return h_hat, score, score > 0


def novelty_signal(detector, model, image):
    """Verdict for a single image"""
    h_hat, score, novel = novelty_scores(detector, model, as_tensor3(image)[None])
    return Verdict('novel' if novel[0] else 'normal', float(score[0]), float(h_hat[0]))


def parallel_verdict(pd_detector, model, image):
    """Union vote: novel when any member says novel"""
    members = [novelty_signal(d, model, image) for d in pd_detector.detectors]
    label = 'novel' if any(m.is_novel for m in members) else 'normal'
    return ParallelVerdict(label, members)


def parallel_novel_mask(pd_detector, model, images, batch_size=64):
    """Per-image union verdicts plus each member's novel mask"""
    member_masks = [novelty_scores(d, model, images, batch_size)[2] for d in pd_detector.detectors]
    return np.logical_or.reduce(member_masks), member_masks


def _accuracy_row(sensor, config_name, set_name, label, novel_mask):
    n = int(novel_mask.size)
    if n == 0:
        raise ValidationError(f"test set '{set_name}' is empty")
    correct = novel_mask if label == 'novel' else ~novel_mask
    return {
        'sensor': sensor,
        'config': config_name,
        'test_set': set_name,
        'label': label,
        'accuracy_pct': 100.0 * float(np.mean(correct)),
        'n_images': n,
    }


def evaluate_accuracy(detector, model, test_sets, sensor='A', batch_size=64):
    """Normal/novel accuracy per labelled test set.

    `test_sets` maps a set name to (images, label) with label 'normal' or
    'novel'. `detector` is a SafeOccDetector or a ParallelDetector.
    Returns a DataFrame with ACCURACY_COLUMNS.
    """
    rows = []
    for set_name, (images, label) in test_sets.items():
        if label not in ('normal', 'novel'):
            raise ValidationError(f"test set '{set_name}' has unknown label '{label}'")
        if len(images) == 0:
            raise ValidationError(f"test set '{set_name}' is empty")
        if isinstance(detector, ParallelDetector):
            mask, _ = parallel_novel_mask(detector, model, images, batch_size)
            name = '+'.join(d.config.name for d in detector.detectors)
        else:
            _, _, mask = novelty_scores(detector, model, images, batch_size)
            name = detector.config.name
        row = _accuracy_row(sensor, name, set_name, label, mask)
        logger.info(f"{sensor}/{name}/{set_name} ({label}): {row['accuracy_pct']:.2f}% of {row['n_images']}")
        rows.append(row)
    return pd.DataFrame(rows, columns=ACCURACY_COLUMNS)


def score_table(detector, model, test_sets, sensor='A', batch_size=64):
    """Per-image novelty trace for each set; score = rho - epsilon - tol - h_hat"""
    frames = []
    for set_name, (images, label) in test_sets.items():
        h_hat, score, novel = novelty_scores(detector, model, images, batch_size)
        frames.append(pd.DataFrame({
            'sensor': sensor,
            'config': detector.config.name,
            'test_set': set_name,
            'label': label,
            'index': np.arange(len(h_hat)),
            'h_hat': h_hat,
            'rho': detector.occ.rho,
            'epsilon': detector.config.epsilon,
            'tol': detector.occ.tol,
            'score': score,
            'verdict': np.where(novel, 'novel', 'normal'),
        }, columns=SCORE_COLUMNS))
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=SCORE_COLUMNS)


def evaluate_sensor_error(model, images, labels, batch_size=64):
    """Mean L2 prediction error ||y_hat - y||_2 over a set"""
    y_hat = predict(model, images, batch_size)
    labels = np.asarray(labels, dtype=np.float64).reshape(y_hat.shape)
    return float(np.mean(np.linalg.norm(y_hat - labels, axis=1)))


def configuration_grid(nu=OCC_DEFAULTS['nu']):
    """{psi, activation, pooled} x {first, last block} x {max, twod_pca} x {none, scale, standard}"""
    configs = []
    for signal in ('psi', 'activation', 'pooled'):
        for block, block_name in ((1, 'first'), (-1, 'last')):
            for scalarizer in ('max', 'twod_pca'):
                for refiner in ('none', 'scale', 'standard'):
                    name = f'{signal}-{block_name}-{scalarizer}-{refiner}'
                    configs.append(DetectorConfig(name, TapPoint(block, signal), scalarizer, refiner, 'off', nu))
    return configs


def run_configuration_grid(model, train_images, test_sets, sensor='A', configs=None, batch_size=64):
    """Fit and evaluate every grid configuration; one accuracy row per (config, set)"""
    configs = configs or configuration_grid()
    frames = []
    for i, config in enumerate(configs, start=1):
        logger.info(f"Grid {i}/{len(configs)}: {config.name}")
        detector = fit_detector(model, train_images, config, batch_size)
        frames.append(evaluate_accuracy(detector, model, test_sets, sensor, batch_size))
    return pd.concat(frames, ignore_index=True)


def project_features(detector, model, train_images, sets, components=3, batch_size=64):
    """3-D PCA view of refined features: fit on training features, project each set.

    Returns a DataFrame with columns set, label, pc1..pcN.
    """
    basis = fit_pca(refined_features(detector, model, train_images, batch_size),
                    d=min(components, _feature_dim(detector)))
    frames = []
    for set_name, (images, label) in sets.items():
        coords = apply_pca(basis, refined_features(detector, model, images, batch_size))
        frame = pd.DataFrame(coords, columns=[f'pc{i + 1}' for i in range(coords.shape[1])])
        frame.insert(0, 'label', label)
        frame.insert(0, 'set', set_name)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def _feature_dim(detector):
    return detector.occ.support_vectors.shape[1]
