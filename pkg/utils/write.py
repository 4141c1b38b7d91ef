import json
import os

import numpy as np

from utils.rng import RNG_NAME

SCHEMA_VERSION = 1


def _ensure_folder(filepath):
    folder = os.path.dirname(filepath)
    if folder and not os.path.exists(folder):
        os.makedirs(folder)


def header_line(seed=None, **extra):
    fields = ['schema_version=%d' % SCHEMA_VERSION, 'rng=%s' % RNG_NAME, 'seed=%s' % ('none' if seed is None else int(seed))]
    fields += ['%s=%s' % (key, value) for key, value in extra.items()]
    return '# ' + ' '.join(fields)


def write_csv(frame, filepath, seed=None, **extra):
    """CSV with a '#' provenance header and %.17g floats."""
    _ensure_folder(filepath)
    with open(filepath, 'w', newline='') as f:
        f.write(header_line(seed, **extra) + '\n')
        frame.to_csv(f, index=False, float_format='%.17g', lineterminator='\n')


def to_builtin(obj):
    """numpy scalars and arrays to plain Python; non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(key): to_builtin(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_builtin(value) for value in obj]
    if isinstance(obj, np.ndarray):
        return to_builtin(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if np.isfinite(value) else None
    return obj


def write_json(record, filepath, seed=None):
    _ensure_folder(filepath)
    record = dict(record)
    record.setdefault('schema_version', SCHEMA_VERSION)
    if seed is not None:
        record.setdefault('rng', RNG_NAME)
        record.setdefault('seed', int(seed))
    with open(filepath, 'w') as f:
        json.dump(to_builtin(record), f, indent=2, allow_nan=False)
        f.write('\n')
