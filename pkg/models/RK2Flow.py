import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import pandas as pd
import scipy.linalg
import tensorflow as tf

from utils.rng import make_rng, uniform_ball

logger = logging.getLogger(__name__)

GUARD_MODES = ('empirical', 'formula')
MAX_STEPS = 4096


class FlowError(RuntimeError):
    pass


class GuardViolation(FlowError):
    pass


class InversionError(FlowError):
    pass


class NonFiniteStateError(FlowError):
    pass


def _batch(y):
    y = tf.convert_to_tensor(y, dtype=tf.float64)
    if len(y.shape) == 1:
        return y[None, :], True
    return y, False


def _evaluate(field, y, t):
    return tf.convert_to_tensor(field(y, t), dtype=tf.float64)


def _jacobian(field, y, t):
    return tf.convert_to_tensor(field.spatial_jacobian(y, t), dtype=tf.float64)


def guard_step_size(h, lipschitz, threshold=0.5):
    """True iff h * Lambda stays below the guard threshold."""
    return h * lipschitz < threshold


def step_contracts(h, lipschitz, threshold=0.5):
    """True iff the RK2 increment has Lipschitz bound h Lambda (1 + h Lambda / 2) below threshold."""
    return h * lipschitz * (1.0 + 0.5 * h * lipschitz) < threshold


def empirical_lipschitz(field, points=None, n_probes=256, n_times=5, seed=0):
    """Largest spectral norm of the spatial Jacobian over a seeded probe set.

    Probes are uniform draws from the disc at n_times equally spaced times, extended by
    the given points. A sampled lower estimate of the true constant.
    """
    probes = uniform_ball(make_rng(seed, 'probe'), n_probes, field.d)
    if points is not None:
        points = np.asarray(points, dtype=np.float64).reshape(-1, field.d)
        probes = np.concatenate([probes, points[:4 * n_probes]], axis=0)
    largest = 0.0
    for t in np.linspace(0.0, 1.0, n_times):
        singular_values = tf.linalg.svd(_jacobian(field, probes, t), compute_uv=False)
        largest = max(largest, float(tf.reduce_max(singular_values[:, 0])))
    return largest


@dataclass(frozen=True)
class FlowSchedule:
    """m uniform RK2 steps of size h = 1/m on [0, 1] plus the invertibility guard."""

    steps: int
    guard_mode: str = 'empirical'
    guard_threshold: float = 0.5

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError('steps must be a positive integer, got %r' % (self.steps,))
        if self.guard_mode not in GUARD_MODES:
            raise ValueError('guard mode must be one of %s, got %r' % (GUARD_MODES, self.guard_mode))

    @property
    def h(self):
        return 1.0 / self.steps

    def time(self, k):
        return k / self.steps

    def refined(self):
        return replace(self, steps=2 * self.steps)

    def guard_lipschitz(self, field, points=None):
        if self.guard_mode == 'formula':
            return field.lipschitz_bound()
        return empirical_lipschitz(field, points)

    def check_guard(self, field, points=None):
        lipschitz = self.guard_lipschitz(field, points)
        if not guard_step_size(self.h, lipschitz, self.guard_threshold):
            raise GuardViolation('step-size guard violated: h*Lambda = %.6g >= %.6g (m=%d, Lambda=%.6g, %s)'
                                 % (self.h * lipschitz, self.guard_threshold, self.steps, lipschitz, self.guard_mode))
        return lipschitz


@dataclass
class TrajectoryTape:
    """States y_0..y_m, per-step log|det| increments and optional step Jacobians.

    Arrays are batched over points: states (m+1, N, d), increments (m, N),
    jacobians (m, N, d, d).
    """

    times: np.ndarray
    states: np.ndarray
    increments: np.ndarray
    jacobians: Optional[np.ndarray] = None

    @property
    def endpoint(self):
        return self.states[-1]

    @property
    def logdet(self):
        return np.sum(self.increments, axis=0)

    def to_frame(self, point=0):
        d = self.states.shape[-1]
        frame = pd.DataFrame({'step': np.arange(len(self.times)), 't': self.times})
        for i in range(d):
            frame['y_%d' % (i + 1)] = self.states[:, point, i]
        increments = np.concatenate([[0.0], self.increments[:, point]])
        frame['logdet_increment'] = increments
        frame['logdet_cum'] = np.cumsum(increments)
        return frame


def _increment(field, t, h, y):
    mid = y + 0.5 * h * _evaluate(field, y, t)
    return h * _evaluate(field, mid, t + 0.5 * h)


def _step_with_jacobian(field, t, h, y):
    k1 = _evaluate(field, y, t)
    mid = y + 0.5 * h * k1
    k2 = _evaluate(field, mid, t + 0.5 * h)
    eye = tf.eye(y.shape[-1], dtype=tf.float64)
    inner = eye + 0.5 * h * _jacobian(field, y, t)
    jac = eye + h * tf.linalg.matmul(_jacobian(field, mid, t + 0.5 * h), inner)
    return y + h * k2, jac


def rk2_step(field, t, h, y):
    """Explicit midpoint step y + h xi(y + h/2 xi(y, t), t + h/2)."""
    if h <= 0:
        raise ValueError('step size must be positive, got %r' % (h,))
    y, single = _batch(y)
    out = y + _increment(field, t, h, y)
    return out[0] if single else out


def step_jacobian(field, t, h, y):
    """Exact derivative I + h Dxi(mid) (I + h/2 Dxi(y)) of rk2_step."""
    y, single = _batch(y)
    _, jac = _step_with_jacobian(field, t, h, y)
    return jac[0] if single else jac


def push_forward(field, steps, y):
    """Endpoint and accumulated log|det| of m RK2 steps; pure TensorFlow, differentiable."""
    h = 1.0 / steps
    logdet = tf.zeros(tf.shape(y)[:1], dtype=tf.float64)
    for k in range(steps):
        y, jac = _step_with_jacobian(field, k / steps, h, y)
        logdet = logdet + tf.linalg.slogdet(jac)[1]
    return y, logdet


def integrate(field, schedule, y0, keep_jacobians=False, check_guard=True):
    y, _ = _batch(y0)
    if check_guard:
        schedule.check_guard(field, y.numpy())

    h = schedule.h
    states = [y.numpy()]
    increments = []
    jacobians = []
    for k in range(schedule.steps):
        y, jac = _step_with_jacobian(field, schedule.time(k), h, y)
        sign, logabs = tf.linalg.slogdet(jac)
        if not np.all(np.isfinite(y.numpy())):
            raise NonFiniteStateError('non-finite state after step %d of %d' % (k + 1, schedule.steps))
        if not np.all(np.isfinite(logabs.numpy())) or np.any(sign.numpy() == 0):
            raise NonFiniteStateError('singular step Jacobian at step %d of %d' % (k + 1, schedule.steps))
        states.append(y.numpy())
        increments.append(logabs.numpy())
        if keep_jacobians:
            jacobians.append(jac.numpy())

    times = np.arange(schedule.steps + 1) / schedule.steps
    return TrajectoryTape(times=times,
                          states=np.stack(states),
                          increments=np.stack(increments) if increments else np.zeros((0, y.shape[0])),
                          jacobians=np.stack(jacobians) if keep_jacobians and jacobians else None)


def invert_step(field, t, h, y_next, tol=1e-12, max_iter=200, check_guard=True):
    """Fixed point of x -> y_next - psi(x), psi the RK2 increment.

    With check_guard the increment must be a contraction for the empirical Lipschitz
    estimate; invert_flow checks its own guard once and skips this.
    """
    target, single = _batch(y_next)
    if check_guard:
        lipschitz = empirical_lipschitz(field, target.numpy())
        if not step_contracts(h, lipschitz):
            raise GuardViolation('step map is not a contraction: h*Lambda*(1 + h*Lambda/2) = %.6g >= 0.5 (h=%.6g)'
                                 % (h * lipschitz * (1.0 + 0.5 * h * lipschitz), h))
    x = target
    delta = np.inf
    for i in range(max_iter):
        x_new = target - _increment(field, t, h, x)
        delta = float(tf.reduce_max(tf.norm(x_new - x, axis=-1)))
        x = x_new
        if not np.isfinite(delta):
            break
        if delta < tol:
            return x[0] if single else x
    raise InversionError('step inversion at t=%.6g did not converge in %d iterations (last update %.3g)' % (t, max_iter, delta))


def invert_flow(field, schedule, z, check_guard=True, tol=1e-12, max_iter=200):
    z, single = _batch(z)
    if check_guard:
        schedule.check_guard(field, z.numpy())
    x = z
    for k in reversed(range(schedule.steps)):
        x = invert_step(field, schedule.time(k), schedule.h, x, tol=tol, max_iter=max_iter, check_guard=False)
    return x[0] if single else x


def liouville_logdet_reference(field, y0, fine_m):
    """RK2 on the augmented system (y, l)' = (xi(y, t), div xi(y, t)); returns l(1)."""
    if fine_m < 1:
        raise ValueError('fine_m must be at least 1, got %r' % (fine_m,))
    y, single = _batch(y0)
    h = 1.0 / fine_m
    ell = tf.zeros(tf.shape(y)[:1], dtype=tf.float64)
    for k in range(fine_m):
        t = k / fine_m
        mid = y + 0.5 * h * _evaluate(field, y, t)
        ell = ell + h * tf.linalg.trace(_jacobian(field, mid, t + 0.5 * h))
        y = y + h * _evaluate(field, mid, t + 0.5 * h)
    return ell[0] if single else ell


#### ANALYTIC FIELDS

class ConstantField():
    def __init__(self, a):
        self.a = np.atleast_1d(np.asarray(a, dtype=np.float64))
        self.d = self.a.shape[0]
        self.trainable_variables = []

    def __call__(self, y, t):
        y, _ = _batch(y)
        return tf.zeros_like(y) + self.a

    def spatial_jacobian(self, y, t):
        y, _ = _batch(y)
        return tf.zeros([tf.shape(y)[0], self.d, self.d], dtype=tf.float64)

    def divergence(self, y, t):
        return tf.linalg.trace(self.spatial_jacobian(y, t))

    def lipschitz_bound(self):
        return 0.0


class LinearField():
    """xi(y, t) = A y, optionally modulated in time by sin(t)."""

    def __init__(self, A, modulated=False):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.d = self.A.shape[0]
        self.modulated = modulated
        self.trainable_variables = []

    def _scale(self, t, n):
        t = tf.broadcast_to(tf.reshape(tf.convert_to_tensor(t, dtype=tf.float64), [-1]), [n])
        return tf.sin(t) if self.modulated else tf.ones_like(t)

    def __call__(self, y, t):
        y, _ = _batch(y)
        return self._scale(t, tf.shape(y)[0])[:, None] * tf.linalg.matmul(y, self.A, transpose_b=True)

    def spatial_jacobian(self, y, t):
        y, _ = _batch(y)
        scale = self._scale(t, tf.shape(y)[0])
        return scale[:, None, None] * tf.constant(self.A)[None, :, :]

    def divergence(self, y, t):
        return tf.linalg.trace(self.spatial_jacobian(y, t))

    def lipschitz_bound(self):
        return float(np.linalg.norm(self.A, 2))

    def exact_flow(self, y0, t=1.0):
        """Phi_{0,t}(y0) = exp(tau A) y0 with tau = t or 1 - cos t."""
        tau = 1.0 - np.cos(t) if self.modulated else t
        return np.asarray(y0, dtype=np.float64) @ scipy.linalg.expm(tau * self.A).T


class SmoothTestField():
    """Smooth non-autonomous planar field.

    xi_1 = -c y_2 + a sin(t) y_1^2,  xi_2 = c y_1 + a cos(t) y_1 y_2.
    """

    def __init__(self, a=0.5, c=0.8):
        self.a = a
        self.c = c
        self.d = 2
        self.trainable_variables = []

    def _trig(self, t, n):
        t = tf.broadcast_to(tf.reshape(tf.convert_to_tensor(t, dtype=tf.float64), [-1]), [n])
        return tf.sin(t), tf.cos(t)

    def __call__(self, y, t):
        y, _ = _batch(y)
        sin_t, cos_t = self._trig(t, tf.shape(y)[0])
        y1, y2 = y[:, 0], y[:, 1]
        return tf.stack([-self.c * y2 + self.a * sin_t * y1 ** 2,
                         self.c * y1 + self.a * cos_t * y1 * y2], axis=1)

    def spatial_jacobian(self, y, t):
        y, _ = _batch(y)
        sin_t, cos_t = self._trig(t, tf.shape(y)[0])
        y1, y2 = y[:, 0], y[:, 1]
        row1 = tf.stack([2.0 * self.a * sin_t * y1, -self.c * tf.ones_like(y1)], axis=1)
        row2 = tf.stack([self.c + self.a * cos_t * y2, self.a * cos_t * y1], axis=1)
        return tf.stack([row1, row2], axis=1)

    def divergence(self, y, t):
        return tf.linalg.trace(self.spatial_jacobian(y, t))

    def lipschitz_bound(self):
        # Frobenius bound of the Jacobian over |y| <= 1/2
        return float(np.sqrt(1.25 * self.a ** 2 + self.c ** 2 + (self.c + 0.5 * self.a) ** 2))
