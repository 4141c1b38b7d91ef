"""Named counter-based random streams.

Every stochastic piece of the package draws from numpy's Philox4x64 generator keyed
by ``(seed, stream)``. The key fixes the stream and the counter starts at zero, so a
given (seed, stream) pair reproduces the same draws on every platform.
"""

import numpy as np

RNG_NAME = 'philox4x64'

STREAMS = {
    'init': 0,
    'data': 1,
    'batch': 2,
    'sample': 3,
    'probe': 4,
    'verify': 5,
}

_MASK64 = (1 << 64) - 1


def make_rng(seed, stream='init', jump=0):
    if seed is None:
        raise ValueError('a seed is required for a reproducible stream')
    seed = int(seed)
    if seed < 0 or seed > _MASK64:
        raise ValueError('seed must be an unsigned 64-bit integer, got %d' % seed)
    if stream not in STREAMS:
        raise ValueError('unknown random stream %r' % (stream,))
    bit_generator = np.random.Philox(key=np.array([seed, STREAMS[stream]], dtype=np.uint64))
    if jump:
        # non-overlapping substream of the same key
        bit_generator = bit_generator.jumped(jump)
    return np.random.Generator(bit_generator)


def uniform_ball(rng, n, d, radius=0.5):
    """Rejection sampling from the bounding cube of the centred ball."""
    accepted = []
    count = 0
    while count < n:
        batch = rng.uniform(-radius, radius, size=(max(2 * (n - count), 16), d))
        batch = batch[np.sum(batch ** 2, axis=1) < radius ** 2]
        accepted.append(batch)
        count += batch.shape[0]
    return np.concatenate(accepted, axis=0)[:n]
