import json
import os

import numpy as np
import pandas as pd


def load_dataset(filepath, d=None):
    """Samples from a CSV of d numeric columns (header row optional, '#' lines skipped)."""
    if not os.path.exists(filepath):
        raise FileNotFoundError('dataset not found: %s' % filepath)
    frame = pd.read_csv(filepath, comment='#', header=None)
    if pd.to_numeric(frame.iloc[0], errors='coerce').isna().any():
        frame = frame.iloc[1:]
    try:
        data = frame.apply(pd.to_numeric).to_numpy(dtype=np.float64)
    except ValueError:
        raise ValueError('dataset %s has non-numeric entries' % filepath)
    if data.shape[0] == 0:
        raise ValueError('dataset %s holds no samples' % filepath)
    if d is not None and data.shape[1] != d:
        raise ValueError('dataset %s has %d columns, expected d=%d' % (filepath, data.shape[1], d))
    if not np.all(np.isfinite(data)):
        raise ValueError('dataset %s contains non-finite values' % filepath)
    return data


def load_json(filepath):
    if not os.path.exists(filepath):
        raise FileNotFoundError('file not found: %s' % filepath)
    with open(filepath) as f:
        return json.load(f)


def load_model(folder):
    from models.FlowDensity import FlowDensityModel

    filepath = folder if folder.endswith('.json') else os.path.join(folder, 'checkpoint.json')
    return FlowDensityModel.from_checkpoint(load_json(filepath))


def load_problem(spec):
    """A RadialBeckmannProblem from a spec dict or a JSON file holding one."""
    from models.Beckmann import problem_from_spec

    if isinstance(spec, str):
        spec = load_json(spec)
    return problem_from_spec(spec)
