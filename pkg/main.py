#!/usr/bin/env python3
"""
SAFE-OCC - Main Application Entry Point

Command-line interface for generating simulation datasets, training CNN
sensors, fitting novelty detectors on their feature maps, evaluating them and
running closed-loop cart-pole scenarios.

Exit codes: 0 success, 2 missing file, 3 validation failure, 4 numerical
abort, 1 anything else. Failures print one JSON line on stderr.
"""

import argparse
import json
import logging
import os
import sys

from src.config import DATA_DIR, LOG_DIR
from src.errors import SafeOccError, ValidationError

logger = logging.getLogger(__name__)


class CliParser(argparse.ArgumentParser):
    """Bad flags are validation failures (exit 3), not argparse's exit 2"""

    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _csv_list(text):
    return [item.strip() for item in text.split(',') if item.strip()]


def _int_list(text):
    try:
        return [int(item) for item in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def build_parser():
    parser = CliParser(
        description='SAFE-OCC - novelty detection for CNN sensors in control loops',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py gen-data --env pendulum --episodes 60 --seed 1
  python main.py augment --data data/pendulum --kinds fog --out data/pendulum_fog
  python main.py train-sensor --data data/pendulum --roster-name A
  python main.py fit-detector --sensor data/sensors/A.sfoc --preset config1
  python main.py eval --sensor data/sensors/A.sfoc --detectors data/detectors/A_config1.sfoc
  python main.py simulate --env cartpole --sensor data/sensors/cartpole.sfoc --scenario blockages
        """
    )
    parser.add_argument('--manifest', help='experiment manifest (default: <data dir>/experiment.json)')
    parser.add_argument('--data-dir', default=DATA_DIR, help='root for generated artifacts')
    parser.add_argument('--log-dir', default=LOG_DIR)
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', help='simulate and render a dataset')
    p.add_argument('--env', required=True, choices=['pendulum', 'cartpole'])
    p.add_argument('--episodes', type=int)
    p.add_argument('--size', type=int, choices=[64, 128])
    p.add_argument('--seed', type=int)
    p.add_argument('--out')
    p.add_argument('--full-scale', action='store_true')

    p = sub.add_parser('augment', help='append disturbed copies of every original frame')
    p.add_argument('--data', required=True)
    p.add_argument('--kinds', required=True, type=_csv_list)
    p.add_argument('--seed', type=int)
    p.add_argument('--out')
    p.add_argument('--drop-occluding', action='store_true',
                   help='redraw blockages that hide every dark pixel')

    p = sub.add_parser('train-sensor', help='train a CNN sensor')
    p.add_argument('--data', required=True)
    p.add_argument('--arch', type=_int_list, help='filters per block, e.g. 8,16,32,64')
    p.add_argument('--lr', type=float)
    p.add_argument('--epochs', type=int)
    p.add_argument('--batch', type=int)
    p.add_argument('--patience', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--out')
    p.add_argument('--lr-sweep', action='store_true')
    p.add_argument('--roster-name', help='sensor letter A-G; checks the dataset augmentation kinds')
    p.add_argument('--full-scale', action='store_true')

    p = sub.add_parser('fit-detector', help='fit a novelty detector on a sensor')
    p.add_argument('--sensor', required=True)
    p.add_argument('--data')
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument('--config', help='JSON detector configuration')
    group.add_argument('--preset', choices=['config1', 'config2', 'cartpole'])
    p.add_argument('--nu', type=float)
    p.add_argument('--epsilon', type=float)
    p.add_argument('--out')

    p = sub.add_parser('eval', help='sensor error and detector accuracy tables')
    p.add_argument('--sensor', required=True)
    p.add_argument('--detectors', type=_csv_list, default=[])
    p.add_argument('--test-sets', type=_csv_list)
    p.add_argument('--data')
    p.add_argument('--seed', type=int)
    p.add_argument('--out')

    p = sub.add_parser('grid', help='accuracy over the detector configuration grid')
    p.add_argument('--sensor', required=True)
    p.add_argument('--data')
    p.add_argument('--nu', type=float)
    p.add_argument('--seed', type=int)
    p.add_argument('--out')

    p = sub.add_parser('simulate', help='closed-loop cart-pole scenario')
    p.add_argument('--env', default='cartpole', choices=['cartpole'])
    p.add_argument('--sensor')
    p.add_argument('--detector')
    p.add_argument('--scenario', default='clean', choices=['clean', 'fog', 'spatter', 'blockages'])
    p.add_argument('--onset', type=int)
    p.add_argument('--horizon', type=int)
    p.add_argument('--debounce', type=int)
    p.add_argument('--recourse', choices=['freeze_last_control', 'zero_control'])
    p.add_argument('--no-safety', action='store_true')
    p.add_argument('--seed', type=int)
    p.add_argument('--out')

    p = sub.add_parser('project', help='3-D PCA view of refined detector features')
    p.add_argument('--sensor', required=True)
    p.add_argument('--detector', required=True)
    p.add_argument('--data')
    p.add_argument('--test-sets', type=_csv_list)
    p.add_argument('--seed', type=int)
    p.add_argument('--out')

    p = sub.add_parser('tune-gains', help='grid-search PID gains on true-state feedback')
    p.add_argument('--seeds', type=_int_list)
    p.add_argument('--horizon', type=int)
    p.add_argument('--out')

    sub.add_parser('validate', help='check the experiment manifest')
    return parser


def run_command(runner, args):
    if args.command == 'gen-data':
        return runner.gen_data(args.env, args.episodes, args.size, args.seed, args.out, args.full_scale)
    if args.command == 'augment':
        return runner.augment(args.data, args.kinds, args.seed, args.out, args.drop_occluding)
    if args.command == 'train-sensor':
        return runner.train_sensor(args.data, args.out, args.arch, args.lr, args.epochs, args.seed,
                                   args.batch, args.patience, args.lr_sweep, args.roster_name,
                                   args.full_scale)
    if args.command == 'fit-detector':
        return runner.fit_detector(args.sensor, args.data, args.config, args.preset, args.out,
                                   args.nu, args.epsilon)
    if args.command == 'eval':
        return runner.evaluate(args.sensor, args.detectors, args.test_sets, args.out, args.data, args.seed)
    if args.command == 'grid':
        return runner.grid(args.sensor, args.out, args.data, args.nu, args.seed)
    if args.command == 'simulate':
        return runner.simulate(args.sensor, args.detector, args.scenario, args.onset, args.out,
                               args.seed, args.horizon, args.debounce, args.recourse,
                               safety=not args.no_safety)
    if args.command == 'project':
        return runner.project(args.sensor, args.detector, args.out, args.data, args.test_sets, args.seed)
    if args.command == 'tune-gains':
        return runner.tune_gains(args.out, args.seeds, args.horizon)
    if args.command == 'validate':
        return runner.validate()
    raise SafeOccError(f"unhandled command {args.command}")


def ensure_directories(directories):
    """Ensure required directories exist and are writable"""
    for dir_name in directories:
        if not os.path.exists(dir_name):
            print(f"📁 Creating {dir_name} directory...")
            os.makedirs(dir_name, mode=0o755)
        else:
            try:
                test_file = os.path.join(dir_name, '.write_test')
                with open(test_file, 'w') as f:
                    f.write('test')
                os.remove(test_file)
            except (OSError, PermissionError):
                print(f"❌ Permission error: Cannot write to {dir_name}/ directory", file=sys.stderr)
                print(f"💡 Fix with: sudo chown -R $USER:$USER {dir_name}/ && chmod 755 {dir_name}/",
                      file=sys.stderr)
                sys.exit(1)


def error_line(exc, code):
    return json.dumps({'error': type(exc).__name__, 'code': code, 'message': str(exc)})


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as e:
        print(error_line(e, e.exit_code), file=sys.stderr)
        return e.exit_code
    ensure_directories([args.data_dir, args.log_dir])

    from src.experiment import ExperimentRunner, configure_logging, summary_line

    configure_logging(args.log_dir)
    try:
        runner = ExperimentRunner(args.manifest, args.data_dir)
        result = run_command(runner, args)
    except SafeOccError as e:
        logger.error(f"{args.command} failed: {e}")
        print(error_line(e, e.exit_code), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly")
        print(error_line(e, 1), file=sys.stderr)
        return 1
    print(summary_line(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
