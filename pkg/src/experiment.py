"""Experiment orchestration behind the command-line interface.

Every command reads its inputs, writes its outputs atomically and records them
in the experiment manifest (default: <data dir>/experiment.json).
"""

import json
import logging
import os

import numpy as np
import pandas as pd

from src.algorithm.cnn import build_model
from src.algorithm.safe_occ import (ACCURACY_COLUMNS, PRESETS, SCORE_COLUMNS, DetectorConfig,
                                    ParallelDetector, configuration_grid, evaluate_accuracy,
                                    evaluate_sensor_error, fit_detector, project_features,
                                    run_configuration_grid, score_table)
from src.algorithm.training import TrainHyper, sweep_learning_rate, train
from src.config import (CONTROL_DEFAULTS, DATA_DIR, DISTURBANCE_KINDS, ENV_DEFAULTS, LOG_DIR,
                        OCC_DEFAULTS, SENSOR_ROSTER, TRAINING_DEFAULTS, resolve_seed)
from src.control.loop import (SCENARIOS, LOOP_COLUMNS, TUNING_COLUMNS, Scenario, SafetySystem,
                              best_gains, records_to_frame, run_closed_loop, tune_gains)
from src.control.pid import PidController
from src.core.numeric import derive_seed, make_rng
from src.data.augment import augment_dataset, disturbed_copies
from src.data.collector import DatasetCollector, generate_dataset
from src.data.render import RenderSpec
from src.data.storage import (config_hash, file_sha256, load_detector, load_manifest, load_sensor,
                              read_json, save_detector, save_sensor, update_manifest,
                              validate_manifest, write_csv)
from src.errors import MissingArtifactError, ValidationError

logger = logging.getLogger(__name__)

SENSOR_ERROR_COLUMNS = ['sensor', 'test_set', 'label', 'mean_l2_error', 'n_images']
PROJECTION_COLUMNS = ['set', 'label', 'pc1', 'pc2', 'pc3']

# RNG stream ids
INIT_STREAM = 20
TRAIN_STREAM = 21
SWEEP_STREAM = 22
EVAL_STREAM = 23


def configure_logging(log_dir=LOG_DIR, level=logging.INFO):
    os.makedirs(log_dir, exist_ok=True)
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(os.path.join(log_dir, 'safeocc.log')),
            logging.StreamHandler()
        ],
        force=True,
    )


def _stem(path):
    return os.path.splitext(path)[0]


def _name(path):
    return os.path.splitext(os.path.basename(os.path.normpath(path)))[0]


class ExperimentRunner:
    def __init__(self, manifest_file=None, data_dir=DATA_DIR):
        self.data_dir = data_dir
        self.manifest_file = manifest_file or os.path.join(data_dir, 'experiment.json')
        os.makedirs(self.data_dir, exist_ok=True)

    @property
    def manifest(self):
        return load_manifest(self.manifest_file)

    def seed(self, flag_seed=None):
        return resolve_seed(flag_seed, self.manifest.get('seed'))

    def record(self, section, key, entry):
        return update_manifest(self.manifest_file, section, key, entry, seed=self.seed())

    # ------------------------------------------------------------------ data

    def gen_data(self, env, episodes=None, size=None, seed=None, out=None, full_scale=False):
        """Simulate and render a dataset directory"""
        if env not in ENV_DEFAULTS:
            raise ValidationError(f"unknown env '{env}'")
        defaults = ENV_DEFAULTS[env]
        seed = self.seed(seed)
        episodes = episodes or defaults['full_episodes' if full_scale else 'episodes']
        spec = RenderSpec(size or defaults['size'])
        out = out or os.path.join(self.data_dir, env)

        logger.info(f"Generating {env} dataset: {episodes} episodes, seed {seed}")
        dataset = generate_dataset(env, episodes, seed, spec)
        digest = DatasetCollector(out).save(dataset)

        self.record('env', env, {'render': spec.to_dict(), 'physics': dataset.meta['physics']})
        self.record('datasets', _name(out), {
            'path': out, 'hash': digest, 'env': env, 'seed': seed,
            'n_frames': len(dataset), 'augment_kinds': [],
            'split_sizes': {k: int(len(v)) for k, v in dataset.split.items()},
        })
        return {'path': out, 'n_frames': len(dataset), 'hash': digest}

    def augment(self, data, kinds, seed=None, out=None, drop_occluding=False):
        """Append disturbed copies of every original frame, per kind"""
        seed = self.seed(seed)
        unknown = [k for k in kinds if k not in DISTURBANCE_KINDS]
        if unknown:
            raise ValidationError(f"unknown disturbance kinds {unknown}, expected {DISTURBANCE_KINDS}")
        dataset = DatasetCollector(data).load()
        dataset = augment_dataset(dataset, kinds, seed, drop_occluding)
        out = out or data
        digest = DatasetCollector(out).save(dataset)
        self.record('datasets', _name(out), {
            'path': out, 'hash': digest, 'env': dataset.env, 'seed': seed, 'source': data,
            'n_frames': len(dataset), 'augment_kinds': dataset.meta['augment_kinds'],
            'drop_occluding': bool(drop_occluding),
        })
        return {'path': out, 'n_frames': len(dataset), 'hash': digest}

    # --------------------------------------------------------------- sensors

    def train_sensor(self, data, out=None, arch=None, lr=None, epochs=None, seed=None,
                     batch=None, patience=None, lr_sweep=False, roster_name=None, full_scale=False):
        """Train a CNN sensor on a dataset's train split, early-stopping on its val split"""
        seed = self.seed(seed)
        collector = DatasetCollector(data)
        dataset = collector.load()
        env = dataset.env
        defaults = ENV_DEFAULTS[env]
        filters = list(arch or defaults['full_filters' if full_scale else 'filters'])
        kinds = list(dataset.meta.get('augment_kinds', []))
        if roster_name is not None:
            if roster_name not in SENSOR_ROSTER:
                raise ValidationError(f"unknown roster sensor '{roster_name}'")
            if sorted(SENSOR_ROSTER[roster_name]) != sorted(kinds):
                raise ValidationError(f"sensor {roster_name} trains on {SENSOR_ROSTER[roster_name]}, "
                                      f"dataset holds {kinds}")
        out = out or os.path.join(self.data_dir, 'sensors', f"{roster_name or _name(data)}.sfoc")

        hyper = TrainHyper(
            lr=lr or TRAINING_DEFAULTS['lr'],
            batch=batch or TRAINING_DEFAULTS['batch'],
            max_epochs=epochs or TRAINING_DEFAULTS['max_epochs'],
            patience=patience or TRAINING_DEFAULTS['patience'],
        )
        model = build_model(dataset.images.shape[1:], filters, dataset.labels.shape[1],
                            dense_units=defaults['dense_units'], output_scale=defaults['output_scale'],
                            rng=make_rng(seed, INIT_STREAM))
        split = {'train': dataset.indices('train'), 'val': dataset.indices('val')}

        if lr_sweep:
            best_lr, table = sweep_learning_rate(model, dataset.images, dataset.labels, split, hyper,
                                                 derive_seed(seed, SWEEP_STREAM))
            write_csv(table, f"{_stem(out)}_lr_sweep.csv", ['lr', 'train_sse'])
            hyper.lr = best_lr
            logger.info(f"Learning-rate sweep selected lr={best_lr:g}")

        model, history = train(model, dataset.images, dataset.labels, split, hyper,
                               make_rng(seed, TRAIN_STREAM))
        provenance = {
            'dataset': data,
            'dataset_hash': collector.dataset_hash(),
            'env': env,
            'seed': seed,
            'augment_kinds': kinds,
            'roster_name': roster_name,
            'hyper': vars(hyper),
            'filters': filters,
        }
        provenance['config_hash'] = config_hash(provenance)
        save_sensor(out, model, provenance)
        history_file = f"{_stem(out)}_history.csv"
        write_csv(history, history_file, ['epoch', 'train_sse', 'val_sse', 'lr'])
        self.record('sensors', _name(out), {
            'path': out, 'hash': file_sha256(out), 'dataset': data, 'dataset_hash': provenance['dataset_hash'],
            'augment_kinds': kinds, 'roster_name': roster_name, 'seed': seed, 'history': history_file,
        })
        if roster_name is not None:
            self.record('roster', roster_name, {'kinds': kinds, 'sensor': out})
        return {'path': out, 'epochs': len(history), 'best_val_sse': float(history['val_sse'].min())}

    def _load_sensor(self, sensor, data=None):
        model, meta = load_sensor(sensor)
        provenance = meta['provenance']
        data = data or provenance['dataset']
        collector = DatasetCollector(data)
        dataset = collector.load()
        if collector.dataset_hash() != provenance['dataset_hash']:
            raise ValidationError(f"dataset {data} does not match the one sensor {sensor} was trained on")
        return model, provenance, dataset

    # ------------------------------------------------------------- detectors

    def _detector_config(self, config=None, preset=None, nu=None, epsilon=None):
        if (config is None) == (preset is None):
            raise ValidationError("give exactly one of --config or --preset")
        if preset is not None:
            if preset not in PRESETS:
                raise ValidationError(f"unknown preset '{preset}', expected one of {sorted(PRESETS)}")
            cfg = DetectorConfig.from_dict(PRESETS[preset].to_dict())
        else:
            try:
                cfg = DetectorConfig.from_dict(read_json(config))
            except TypeError as e:
                raise ValidationError(f"{config}: {e}") from e
        if nu is not None:
            cfg.nu = float(nu)
        if epsilon is not None:
            cfg.epsilon = float(epsilon)
        return cfg

    def fit_detector(self, sensor, data=None, config=None, preset=None, out=None, nu=None, epsilon=None):
        """Fit a SAFE-OCC detector on the sensor's training images"""
        model, provenance, dataset = self._load_sensor(sensor, data)
        cfg = self._detector_config(config, preset, nu, epsilon)
        out = out or os.path.join(self.data_dir, 'detectors', f"{_name(sensor)}_{cfg.name}.sfoc")
        train_images, _ = dataset.subset(dataset.indices('train'))
        detector = fit_detector(model, train_images, cfg)
        save_detector(out, detector, {
            'sensor': sensor,
            'sensor_hash': file_sha256(sensor),
            'dataset_hash': provenance['dataset_hash'],
            'seed': provenance['seed'],
            'config_hash': cfg.digest(),
        })
        self.record('detectors', _name(out), {
            'path': out, 'hash': file_sha256(out), 'sensor': sensor, 'config': cfg.to_dict(),
        })
        return {'path': out, 'support_vectors': int(detector.occ.alphas.size), 'rho': detector.occ.rho}

    def _load_detectors(self, sensor, detectors):
        sensor_hash = file_sha256(sensor)
        loaded = []
        for path in detectors:
            detector, meta = load_detector(path)
            if meta['provenance']['sensor_hash'] != sensor_hash:
                raise ValidationError(f"detector {path} was fitted on a different sensor than {sensor}")
            loaded.append(detector)
        return loaded

    def test_sets(self, dataset, kinds, normal_kinds, seed):
        """{name: (images, label)} from the test split's original frames"""
        idx = dataset.indices('test', kind='original')
        if idx.size == 0:
            raise ValidationError("dataset has no original frames in its test split")
        images, labels = dataset.subset(idx)
        sets = {}
        for name in kinds:
            label = 'normal' if name == 'original' or name in normal_kinds else 'novel'
            if name == 'original':
                sets[name] = (images, labels, label)
            elif name in DISTURBANCE_KINDS:
                disturbed = disturbed_copies(images, name, derive_seed(seed, EVAL_STREAM),
                                             dataset.source_index[idx])
                sets[name] = (disturbed, labels, label)
            else:
                raise ValidationError(f"unknown test set '{name}'")
        return sets

    # ------------------------------------------------------------ evaluation

    def evaluate(self, sensor, detectors=(), test_sets=None, out=None, data=None, seed=None):
        """Sensor error, detector accuracy and per-image novelty scores on the test split"""
        model, provenance, dataset = self._load_sensor(sensor, data)
        seed = self.seed(seed)
        loaded = self._load_detectors(sensor, detectors)
        names = list(test_sets or ['original'] + DISTURBANCE_KINDS)
        sets = self.test_sets(dataset, names, provenance['augment_kinds'], seed)
        out = out or os.path.join(self.data_dir, 'results', _name(sensor))
        sensor_name = provenance.get('roster_name') or _name(sensor)

        rows = []
        for name, (images, labels, label) in sets.items():
            error = evaluate_sensor_error(model, images, labels)
            logger.info(f"Sensor {sensor_name} on {name}: mean L2 error {error:.4f}")
            rows.append({'sensor': sensor_name, 'test_set': name, 'label': label,
                         'mean_l2_error': error, 'n_images': len(images)})
        write_csv(pd.DataFrame(rows), os.path.join(out, 'sensor_errors.csv'), SENSOR_ERROR_COLUMNS)

        written = {'sensor_errors': os.path.join(out, 'sensor_errors.csv')}
        if loaded:
            labelled = {name: (images, label) for name, (images, _, label) in sets.items()}
            frames = [evaluate_accuracy(d, model, labelled, sensor_name) for d in loaded]
            if len(loaded) > 1:
                frames.append(evaluate_accuracy(ParallelDetector(loaded), model, labelled, sensor_name))
            write_csv(pd.concat(frames, ignore_index=True), os.path.join(out, 'novelty_accuracy.csv'),
                      ACCURACY_COLUMNS)
            scores = pd.concat([score_table(d, model, labelled, sensor_name) for d in loaded],
                               ignore_index=True)
            write_csv(scores, os.path.join(out, 'novelty_scores.csv'), SCORE_COLUMNS)
            written['novelty_accuracy'] = os.path.join(out, 'novelty_accuracy.csv')
            written['novelty_scores'] = os.path.join(out, 'novelty_scores.csv')

        for key, path in written.items():
            self.record('tables', f"{_name(sensor)}_{key}", {'path': path, 'hash': file_sha256(path), 'seed': seed})
        return written

    def grid(self, sensor, out=None, data=None, nu=None, seed=None):
        """Novelty accuracy of every configuration in the enumeration grid"""
        model, provenance, dataset = self._load_sensor(sensor, data)
        seed = self.seed(seed)
        train_images, _ = dataset.subset(dataset.indices('train'))
        sets = self.test_sets(dataset, ['original'] + DISTURBANCE_KINDS, provenance['augment_kinds'], seed)
        labelled = {name: (images, label) for name, (images, _, label) in sets.items()}
        configs = configuration_grid(OCC_DEFAULTS['nu'] if nu is None else nu)
        table = run_configuration_grid(model, train_images, labelled,
                                       provenance.get('roster_name') or _name(sensor), configs)
        out = out or os.path.join(self.data_dir, 'results', f"{_name(sensor)}_grid.csv")
        write_csv(table, out, ACCURACY_COLUMNS)
        self.record('tables', f"{_name(sensor)}_grid", {'path': out, 'hash': file_sha256(out), 'seed': seed})
        return {'path': out, 'configs': len(configs)}

    def project(self, sensor, detector, out=None, data=None, test_sets=None, seed=None):
        """3-D PCA coordinates of refined features per test set"""
        model, provenance, dataset = self._load_sensor(sensor, data)
        seed = self.seed(seed)
        (det,) = self._load_detectors(sensor, [detector])
        train_images, _ = dataset.subset(dataset.indices('train'))
        names = list(test_sets or ['original'] + DISTURBANCE_KINDS)
        sets = self.test_sets(dataset, names, provenance['augment_kinds'], seed)
        labelled = {name: (images, label) for name, (images, _, label) in sets.items()}
        table = project_features(det, model, train_images, labelled)
        out = out or os.path.join(self.data_dir, 'results', f"{_name(detector)}_projection.csv")
        write_csv(table, out, [c for c in PROJECTION_COLUMNS if c in table.columns])
        self.record('tables', f"{_name(detector)}_projection", {'path': out, 'hash': file_sha256(out)})
        return {'path': out, 'rows': len(table)}

    # --------------------------------------------------------------- control

    def simulate(self, sensor=None, detector=None, scenario='clean', onset=None, out=None, seed=None,
                 horizon=None, debounce=None, recourse=None, safety=True, gains=None):
        """Closed-loop cart-pole run; writes the per-step trace"""
        if scenario not in SCENARIOS:
            raise ValidationError(f"unknown scenario '{scenario}', expected one of {sorted(SCENARIOS)}")
        seed = self.seed(seed)
        cnn = None
        if sensor is not None:
            cnn, meta = load_sensor(sensor)
            if meta['provenance']['env'] != 'cartpole':
                raise ValidationError(f"{sensor} is a {meta['provenance']['env']} sensor; simulate needs cart-pole")
        if detector is not None and cnn is None:
            raise ValidationError("--detector needs --sensor")
        det = self._load_detectors(sensor, [detector])[0] if detector is not None else None

        base = dict(CONTROL_DEFAULTS)
        base.update(gains or {})
        pid = PidController(base['kp'], base['ki'], base['kd'], base['dt'], base['tau_f'], base['integral_limit'])
        ss = SafetySystem(debounce or base['debounce'], recourse or base['recourse']) if (safety and det) else None
        sc = Scenario(scenario, SCENARIOS[scenario].disturbance, base['onset'] if onset is None else onset)
        result = run_closed_loop(cnn, pid, det, ss, sc, horizon or base['horizon'], seed)

        tag = f"{scenario}{'' if ss else '_nosafety'}_seed{seed}"
        out = out or os.path.join(self.data_dir, 'results', f"loop_{tag}.csv")
        write_csv(records_to_frame(result), out, LOOP_COLUMNS)
        self.record('scenarios', _name(out), {
            'path': out, 'scenario': scenario, 'onset': sc.onset, 'seed': seed, 'sensor': sensor,
            'detector': detector, 'safety': ss is not None, 'gains': pid.gains(),
            'steps_survived': result.steps_survived, 'alarm_step': result.alarm_step,
        })
        return {'path': out, 'steps_survived': result.steps_survived,
                'terminated': result.terminated, 'alarm_step': result.alarm_step}

    def tune_gains(self, out=None, seeds=None, horizon=None):
        """Grid-search controller gains on true-state feedback"""
        table = tune_gains(seeds=seeds, horizon=horizon)
        out = out or os.path.join(self.data_dir, 'results', 'gain_tuning.csv')
        write_csv(table, out, TUNING_COLUMNS)
        kp, kd = best_gains(table)
        self.record('controller', 'tuning', {'path': out, 'best_kp': kp, 'best_kd': kd})
        return {'path': out, 'kp': kp, 'kd': kd}

    # ------------------------------------------------------------ validation

    def validate(self):
        """Check that every manifest artifact exists and dataset splits partition their frames"""
        if not os.path.exists(self.manifest_file):
            raise ValidationError(f"no experiment manifest at {self.manifest_file}")
        manifest = self.manifest
        try:
            checked = validate_manifest(manifest)
            for key, entry in manifest.get('datasets', {}).items():
                DatasetCollector(entry['path']).validate()
        except MissingArtifactError as e:
            raise ValidationError(str(e)) from e
        logger.info(f"Manifest {self.manifest_file}: {len(checked)} artifacts validated")
        return {'artifacts': len(checked), 'datasets': len(manifest.get('datasets', {}))}


def summary_line(result):
    return json.dumps(result, sort_keys=True, default=lambda o: o.item() if isinstance(o, np.generic) else str(o))
