"""Batch front end: train, sample, evaluate, beckmann, bounds and verify experiments.

    python run.py train --config configs/train_bump.yaml --seed 7 --out run/train/0007
    python run.py bounds --config configs/bounds.yaml
    python run.py verify --seed 0 --out run/verify/0000

Exit codes: 0 ok, 1 failed verification, 2 usage or input error (error JSON on stdout).
"""

import argparse
import json
import logging
import os
import sys

import numpy as np
import pandas as pd
import tensorflow as tf

from models.Beckmann import verify_transport
from models.FlowDensity import FlowDensityModel, TrainConfig
from models.RK2Flow import FlowSchedule, GuardViolation, InversionError, NonFiniteStateError, integrate
from utils.bounds import R0_DEFAULT, capacity_ledger, pac_sample_size, pac_schedule, step_lipschitz
from utils.callbacks import TrainingLogger
from utils.config import COMMANDS, ConfigError, load_config
from utils.loaders import load_dataset, load_model, load_problem
from utils.verify import run_suite, validate_report
from utils.write import SCHEMA_VERSION, to_builtin, write_csv, write_json

logger = logging.getLogger('liouville_flow')

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2

DEFAULT_PROBLEM = {'family': 'bump', 'beta': 0.5, 'd': 2}


class CommandError(Exception):

    def __init__(self, kind, message, exit_code=EXIT_USAGE):
        super().__init__(message)
        self.kind = kind
        self.exit_code = exit_code


def run_folder(config):
    if config.out:
        return config.out
    return os.path.join('run', config.command, 'default' if config.seed is None else '%04d' % config.seed)


def _load_samples(path, d=None):
    try:
        return load_dataset(path, d)
    except FileNotFoundError as exc:
        raise CommandError('dataset_not_found', str(exc))


def _load_checkpoint(path):
    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise CommandError('checkpoint_not_found', str(exc))


def _kl_record(estimate):
    return {'value': estimate.value, 'raw': estimate.raw}


#### COMMANDS

def run_train(config):
    params = config.params
    seed = config.seed
    out = run_folder(config)

    problem = None
    if 'dataset' in params:
        samples = _load_samples(params['dataset'])
    else:
        problem = load_problem(params['problem'])
        samples = problem.sample_target(params.get('n_samples', 2000), seed)
    d = samples.shape[1]

    widths = params.get('widths', [16, 16, d])
    if widths[-1] != d:
        raise ConfigError('the last width must equal the data dimension d=%d, got %s' % (d, widths))
    model = FlowDensityModel.build(d, widths, K=params.get('K', 12), k=params.get('k', 4),
                                   steps=params.get('steps', 16), seed=seed, init_scale=params.get('init_scale'),
                                   guard_mode=params.get('guard_mode', 'empirical'))
    train_config = TrainConfig(learning_rate=params.get('learning_rate', 0.05),
                               iterations=params.get('iterations', 500),
                               batch_size=params.get('batch_size', 0),
                               seed=seed,
                               guard_mode=params.get('guard_mode', 'empirical'),
                               fd_fallback=params.get('fd_fallback', False),
                               optimiser=params.get('optimiser', 'sgd'),
                               print_every_n_batches=params.get('print_every_n_batches', 50))

    logger.info('training on %d samples in d=%d, widths=%s, m=%d', samples.shape[0], d, widths, model.schedule.steps)
    model.train_erm(samples, train_config, [TrainingLogger(out, train_config.print_every_n_batches, seed=seed)])
    model.save(out)

    network = model.field.network
    ledger = capacity_ledger(d, network.depth, network.width, h=model.schedule.h, k=model.field.k,
                             K=model.field.K, n=samples.shape[0])
    record = {'ledger': ledger.to_dict(), 'steps': model.schedule.steps, 'iterations': model.iteration,
              'final_nll': model.nll(samples)}
    if problem is not None:
        record['kl'] = _kl_record(model.kl_estimate(problem.target_logdensity, params.get('grid_resolution', 256)))
    write_json(record, os.path.join(out, 'bounds.json'), seed=seed)
    return EXIT_OK


def run_sample(config):
    model = _load_checkpoint(config.params['checkpoint'])
    x = model.sample(config.params.get('n', 1000), config.seed)
    frame = pd.DataFrame(x, columns=['x_%d' % (i + 1) for i in range(model.d)])
    write_csv(frame, os.path.join(run_folder(config), 'samples.csv'), seed=config.seed)
    return EXIT_OK


def run_evaluate(config):
    params = config.params
    seed = config.seed
    out = run_folder(config)
    model = _load_checkpoint(params['checkpoint'])
    grid_resolution = params.get('grid_resolution', 256)

    record = {'steps': model.schedule.steps, 'mass': model.density_mass(grid_resolution)}
    problem = load_problem(params['problem']) if 'problem' in params else None
    samples = None
    if 'dataset' in params:
        samples = _load_samples(params['dataset'], model.d)
    elif problem is not None:
        samples = problem.sample_target(params.get('n_samples', 2000), seed)

    if samples is not None:
        record['nll'] = model.nll(samples)
    if problem is not None:
        record['kl'] = _kl_record(model.kl_estimate(problem.target_logdensity, grid_resolution))
        record['negentropy'] = problem.negentropy()
        record['erm_gap'] = model.erm_gap(problem.target_logdensity, record['negentropy'], samples, grid_resolution)

    n_points = params.get('trajectory_points', 0)
    if n_points and samples is not None:
        tape = integrate(model.field, model.schedule, samples[:n_points])
        frames = []
        for point in range(tape.states.shape[1]):
            frame = tape.to_frame(point)
            frame.insert(0, 'point', point)
            frames.append(frame)
        write_csv(pd.concat(frames, ignore_index=True), os.path.join(out, 'trajectory.csv'), seed=seed)

    write_json(record, os.path.join(out, 'evaluation.json'), seed=seed)
    return EXIT_OK


def run_beckmann(config):
    params = config.params
    out = run_folder(config)
    problem = load_problem(params.get('problem', DEFAULT_PROBLEM))
    schedule = FlowSchedule(params.get('steps', 64), params.get('guard_mode', 'empirical'))

    radii = np.linspace(0.01, 0.49, params.get('residual_points', 100))
    residuals = [problem.continuity_residual(r, 0.5) for r in radii]
    estimate = verify_transport(problem, schedule, params.get('grid_resolution', 256))
    record = {
        'problem': problem.name,
        'kappa': problem.kappa,
        'boundary_flux': problem.radial_flux(0.5),
        'max_continuity_residual': max(residuals),
        'steps': schedule.steps,
        'kl': _kl_record(estimate),
        'radial_kl': problem.radial_kl(),
        'negentropy': problem.negentropy(),
    }
    t = params.get('field_grid_t', 0.0)
    write_csv(problem.export_field_grid(t, params.get('field_grid_n', 41)), os.path.join(out, 'field_grid.csv'),
              seed=config.seed)
    write_json(record, os.path.join(out, 'beckmann.json'), seed=config.seed)
    return EXIT_OK


def bounds_record(params):
    """Ledger, step-map constants and, when requested, the PAC schedule and sample size."""
    d, L, W = params['d'], params['L'], params['W']
    R0 = params.get('R0', R0_DEFAULT)
    h = params.get('h')
    k = params.get('k', 4)
    p = params.get('p')
    ledger = capacity_ledger(d, L, W, h=h, R0=R0, k=k, K=params.get('K'), n=params.get('n'), p=p,
                             exponent=params.get('exponent', 5))
    record = {'schema_version': SCHEMA_VERSION, 'ledger': ledger.to_dict()}
    if h is not None:
        record['step_map'] = step_lipschitz(h, ledger.log_lambda)

    warnings = []
    if params.get('n') is not None and p is not None:
        schedule = pac_schedule(params['n'], p, d, R0)
        record['pac_schedule'] = schedule.to_dict()
        if not schedule.feasible:
            warnings.append('infeasible schedule: L_n < 1 for n=%d' % params['n'])
        elif not schedule.guard_ok:
            warnings.append('schedule violates the step-size guard for n=%d' % params['n'])
    if params.get('eps') is not None and params.get('delta') is not None and p is not None:
        size = pac_sample_size(params['eps'], params['delta'], p, d, k, params.get('log_c_h', 0.0),
                               params.get('log_c_hat_h', 0.0), params.get('n_tilde', 0), R0)
        record['pac_sample_size'] = size.to_dict()
    if warnings:
        record['warning'] = '; '.join(warnings)
    return record


def run_bounds(config):
    record = bounds_record(config.params)
    for warning in record.get('warning', '').split('; '):
        if warning:
            logger.warning(warning)
    print(json.dumps(to_builtin(record), indent=2))
    if config.out:
        write_json(record, os.path.join(config.out, 'bounds.json'))
    return EXIT_OK


def run_verify(config):
    params = config.params
    report = run_suite(config.seed, quick=params.get('quick', False),
                       inject_flux_defect=params.get('inject_flux_defect', False), checks=params.get('checks'))
    validate_report(report)
    write_json(report, os.path.join(run_folder(config), 'verify_report.json'))
    failed = [c['name'] for c in report['checks'] if c['status'] != 'pass']
    if failed:
        logger.error('%d of %d checks failed: %s', len(failed), len(report['checks']), ', '.join(failed))
        return EXIT_VERIFY_FAILED
    logger.info('all %d checks passed', len(report['checks']))
    return EXIT_OK


COMMAND_FUNCTIONS = {
    'train': run_train,
    'sample': run_sample,
    'evaluate': run_evaluate,
    'beckmann': run_beckmann,
    'bounds': run_bounds,
    'verify': run_verify,
}


#### ENTRY POINT

def build_parser():
    parser = argparse.ArgumentParser(prog='run.py', description=__doc__.splitlines()[0])
    subparsers = parser.add_subparsers(dest='command', required=True)
    for command in COMMANDS:
        sub = subparsers.add_parser(command)
        sub.add_argument('--config', help='YAML or JSON experiment config')
        sub.add_argument('--seed', type=int, help='unsigned 64-bit seed, overrides the config')
        sub.add_argument('--out', help='output folder, overrides the config')
        sub.add_argument('--threads', type=int, help='TensorFlow thread count (fallback: $LIOUVILLE_FLOW_THREADS)')
        sub.add_argument('--verbose', action='store_true')
    return parser


def configure_tensorflow(threads=None):
    tf.config.experimental.enable_op_determinism()
    if threads:
        try:
            tf.config.threading.set_intra_op_parallelism_threads(threads)
            tf.config.threading.set_inter_op_parallelism_threads(threads)
        except RuntimeError as exc:
            # thread pools are fixed once the TensorFlow runtime is up
            logger.warning('cannot set %d threads: %s', threads, exc)


def emit_error(kind, message, out=None):
    record = {'schema_version': SCHEMA_VERSION, 'error': kind, 'message': message}
    print(json.dumps(record))
    if out:
        write_json(record, os.path.join(out, 'error.json'))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(name)s %(levelname)s: %(message)s', stream=sys.stderr)

    config = None
    try:
        config = load_config(args.command, args.config, seed=args.seed, out=args.out, threads=args.threads,
                             verbose=args.verbose)
        configure_tensorflow(config.threads)
        return COMMAND_FUNCTIONS[config.command](config)
    except CommandError as exc:
        kind, message, code = exc.kind, str(exc), exc.exit_code
    except ConfigError as exc:
        kind, message, code = 'config_invalid', str(exc), EXIT_USAGE
    except GuardViolation as exc:
        kind, message, code = 'guard_violation', str(exc), EXIT_USAGE
    except InversionError as exc:
        kind, message, code = 'inversion_failed', str(exc), EXIT_USAGE
    except NonFiniteStateError as exc:
        kind, message, code = 'non_finite_state', str(exc), EXIT_USAGE
    except (ValueError, FileNotFoundError) as exc:
        kind, message, code = 'invalid_input', str(exc), EXIT_USAGE

    logger.error('%s: %s', kind, message)
    emit_error(kind, message, config.out if config is not None else None)
    return code


if __name__ == '__main__':
    sys.exit(main())
