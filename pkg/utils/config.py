"""Experiment configuration: YAML/JSON files validated per subcommand."""

import os
from dataclasses import dataclass, field

import jsonschema
import yaml

COMMANDS = ('train', 'sample', 'evaluate', 'beckmann', 'bounds', 'verify')
STOCHASTIC_COMMANDS = ('train', 'sample', 'evaluate', 'verify')
THREADS_ENV = 'LIOUVILLE_FLOW_THREADS'

_SEED = {'type': 'integer', 'minimum': 0, 'maximum': 2 ** 64 - 1}
_POSITIVE_INT = {'type': 'integer', 'minimum': 1}
_PROBLEM = {
    'type': 'object',
    'properties': {
        'family': {'enum': ['bump', 'uniform']},
        'd': {'type': 'integer', 'minimum': 1, 'maximum': 2},
        'beta': {'type': 'number', 'exclusiveMinimum': -1, 'exclusiveMaximum': 1},
        'quadrature_n': {'type': 'integer', 'minimum': 16},
        'flux_defect': {'type': 'number'},
    },
    'additionalProperties': False,
}
_PROBLEM_REF = {'oneOf': [{'type': 'string'}, _PROBLEM]}
_COMMON = {
    'command': {'enum': list(COMMANDS)},
    'seed': _SEED,
    'out': {'type': 'string'},
    'threads': _POSITIVE_INT,
    'verbose': {'type': 'boolean'},
}


def _schema(properties, required=()):
    return {
        'type': 'object',
        'properties': dict(_COMMON, **properties),
        'required': list(required),
        'additionalProperties': False,
    }


SCHEMAS = {
    'train': _schema({
        'dataset': {'type': 'string'},
        'problem': _PROBLEM_REF,
        'n_samples': _POSITIVE_INT,
        'widths': {'type': 'array', 'items': _POSITIVE_INT, 'minItems': 1},
        'K': _POSITIVE_INT,
        'k': {'type': 'integer', 'minimum': 4},
        'steps': _POSITIVE_INT,
        'init_scale': {'type': 'number', 'minimum': 0, 'maximum': 1},
        'learning_rate': {'type': 'number', 'exclusiveMinimum': 0},
        'iterations': {'type': 'integer', 'minimum': 0},
        'batch_size': {'type': 'integer', 'minimum': 0},
        'guard_mode': {'enum': ['empirical', 'formula']},
        'fd_fallback': {'type': 'boolean'},
        'optimiser': {'enum': ['sgd', 'adam']},
        'print_every_n_batches': {'type': 'integer', 'minimum': 0},
        'grid_resolution': _POSITIVE_INT,
    }),
    'sample': _schema({
        'checkpoint': {'type': 'string'},
        'n': _POSITIVE_INT,
    }, required=['checkpoint']),
    'evaluate': _schema({
        'checkpoint': {'type': 'string'},
        'problem': _PROBLEM_REF,
        'dataset': {'type': 'string'},
        'n_samples': _POSITIVE_INT,
        'grid_resolution': _POSITIVE_INT,
        'trajectory_points': {'type': 'integer', 'minimum': 0},
    }, required=['checkpoint']),
    'beckmann': _schema({
        'problem': _PROBLEM_REF,
        'steps': _POSITIVE_INT,
        'guard_mode': {'enum': ['empirical', 'formula']},
        'grid_resolution': _POSITIVE_INT,
        'residual_points': _POSITIVE_INT,
        'field_grid_n': {'type': 'integer', 'minimum': 2},
        'field_grid_t': {'type': 'number', 'minimum': 0, 'maximum': 1},
    }),
    'bounds': _schema({
        'd': _POSITIVE_INT,
        'L': _POSITIVE_INT,
        'W': _POSITIVE_INT,
        'h': {'type': 'number', 'exclusiveMinimum': 0, 'maximum': 1},
        'R0': {'type': 'number', 'minimum': 1},
        'k': {'type': 'integer', 'minimum': 2},
        'K': {'type': 'integer', 'minimum': 0},
        'n': {'type': 'integer', 'minimum': 3},
        'eps': {'type': 'number', 'exclusiveMinimum': 0, 'exclusiveMaximum': 1},
        'delta': {'type': 'number', 'exclusiveMinimum': 0, 'maximum': 1},
        'p': {'type': 'number', 'exclusiveMinimum': 0, 'exclusiveMaximum': 1},
        'log_c_h': {'type': 'number'},
        'log_c_hat_h': {'type': 'number'},
        'n_tilde': {'type': 'integer', 'minimum': 0},
        'exponent': {'enum': [5, 6]},
    }, required=['d', 'L', 'W']),
    'verify': _schema({
        'quick': {'type': 'boolean'},
        'inject_flux_defect': {'type': 'boolean'},
        'checks': {'type': 'array', 'items': {'type': 'string'}},
    }),
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    command: str
    seed: int = None
    out: str = None
    threads: int = None
    verbose: bool = False
    params: dict = field(default_factory=dict)

    def get(self, key, default=None):
        return self.params.get(key, default)


def read_config_file(filepath):
    """A mapping from a YAML or JSON file (JSON parses as YAML)."""
    if not os.path.exists(filepath):
        raise ConfigError('config file not found: %s' % filepath)
    with open(filepath) as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as exc:
            raise ConfigError('cannot parse %s: %s' % (filepath, exc))
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError('config %s must be a mapping, got %s' % (filepath, type(data).__name__))
    return data


def resolve_threads(threads=None):
    if threads is not None:
        return threads
    value = os.environ.get(THREADS_ENV)
    if value in (None, ''):
        return None
    try:
        threads = int(value)
    except ValueError:
        raise ConfigError('%s must be a positive integer, got %r' % (THREADS_ENV, value))
    if threads < 1:
        raise ConfigError('%s must be a positive integer, got %r' % (THREADS_ENV, value))
    return threads


def build_config(command, data=None, seed=None, out=None, threads=None, verbose=False):
    """Merge file contents with command-line flags (flags win) and validate."""
    if command not in COMMANDS:
        raise ConfigError('unknown command %r' % (command,))
    data = dict(data or {})
    if data.get('command', command) != command:
        raise ConfigError('config is for command %r, not %r' % (data['command'], command))
    data['command'] = command
    for key, value in (('seed', seed), ('out', out), ('threads', threads)):
        if value is not None:
            data[key] = value
    if verbose:
        data['verbose'] = True

    try:
        jsonschema.validate(data, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        path = '.'.join(str(p) for p in exc.absolute_path) or '<root>'
        raise ConfigError('invalid %s config at %s: %s' % (command, path, exc.message))

    if command in STOCHASTIC_COMMANDS and 'seed' not in data:
        raise ConfigError('a seed is required for the %s command (--seed or "seed" in the config)' % command)
    if command == 'train' and 'dataset' in data and 'problem' in data:
        raise ConfigError('train takes either a dataset or a problem, not both')
    if command == 'train' and 'dataset' not in data and 'problem' not in data:
        raise ConfigError('train needs a dataset CSV or a problem family to sample from')

    reserved = ('command', 'seed', 'out', 'threads', 'verbose')
    return ExperimentConfig(command=command,
                            seed=data.get('seed'),
                            out=data.get('out'),
                            threads=resolve_threads(data.get('threads')),
                            verbose=bool(data.get('verbose', False)),
                            params={k: v for k, v in data.items() if k not in reserved})


def load_config(command, filepath=None, **flags):
    data = read_config_file(filepath) if filepath else {}
    return build_config(command, data, **flags)
