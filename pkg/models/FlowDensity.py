import json
import logging
import os
from dataclasses import dataclass

import numpy as np
import tensorflow as tf
from tensorflow.keras.optimizers import SGD, Adam

from models.ReQUNet import CutoffField, ReQUNetwork, field_from_config
from models.RK2Flow import GUARD_MODES, MAX_STEPS, FlowSchedule, GuardViolation, guard_step_size, invert_flow, push_forward
from utils.quadrature import RADIUS, KLEstimate, log_ball_volume, polar_grid
from utils.rng import make_rng, uniform_ball
from utils.write import write_json

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DIRECTION = 'data_to_base'
OPTIMISERS = ('sgd', 'adam')


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    iterations: int = 500
    batch_size: int = 0
    seed: int = 0
    guard_mode: str = 'empirical'
    fd_fallback: bool = False
    optimiser: str = 'sgd'
    print_every_n_batches: int = 50

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError('learning rate must be positive, got %r' % (self.learning_rate,))
        if self.iterations < 0:
            raise ValueError('iterations must be non-negative, got %r' % (self.iterations,))
        if self.batch_size < 0:
            raise ValueError('batch size must be non-negative (0 is full batch), got %r' % (self.batch_size,))
        if self.guard_mode not in GUARD_MODES:
            raise ValueError('guard mode must be one of %s, got %r' % (GUARD_MODES, self.guard_mode))
        if self.optimiser not in OPTIMISERS:
            raise ValueError('optimiser must be one of %s, got %r' % (OPTIMISERS, self.optimiser))


class FlowDensityModel():
    """Density on the disc pulled back from the uniform base through the discrete RK2 flow.

    Data x is mapped to base z = Psi^h(x), so
    log f(x) = -log vol(Omega_d) + sum_k log|det step_jacobian_k(x)|.
    Sampling inverts the flow from uniform base draws.
    """

    def __init__(self, field, schedule):

        self.name = 'flow_density'
        self.field = field
        self.schedule = schedule
        self.d = field.d
        self.direction = DIRECTION
        # uniform base: constant on the closed disc, so drift past the boundary reads the boundary value
        self.log_base = float(-log_ball_volume(self.d))

        self.losses = []
        self.guard_history = []
        self.iteration = 0
        self.optimizer = None
        self._train_step = None

    @classmethod
    def build(cls, d, widths, K, k=4, steps=16, seed=0, init_scale=None, guard_mode='empirical'):
        network = ReQUNetwork(d, widths, seed=seed, init_scale=init_scale)
        return cls(CutoffField(network, K, k), FlowSchedule(steps, guard_mode))

    @property
    def trainable_variables(self):
        return self.field.trainable_variables

    def _points(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.d:
            raise ValueError('dimension mismatch: model has d=%d, points have %d columns' % (self.d, x.shape[1]))
        if np.any(np.linalg.norm(x, axis=1) >= RADIUS):
            raise ValueError('points must lie in the open disc of radius %g' % RADIUS)
        return x, single

    def _logdensity(self, x, steps):
        _, logdet = push_forward(self.field, steps, x)
        return self.log_base + logdet

    def _loss_and_gradient(self, x, steps):
        with tf.GradientTape() as tape:
            loss = -tf.reduce_mean(self._logdensity(x, steps))
        return loss, tape.gradient(loss, self.trainable_variables)

    def guard_lipschitz(self, points=None):
        return self.schedule.guard_lipschitz(self.field, points)

    def model_logdensity(self, x):
        x, single = self._points(x)
        self.schedule.check_guard(self.field, x)
        out = self._logdensity(tf.constant(x), self.schedule.steps).numpy()
        return out[0] if single else out

    def nll(self, samples):
        return float(-np.mean(self.model_logdensity(samples)))

    def nll_gradient(self, samples):
        """Reverse-mode gradient of nll, one array per trainable variable."""
        x, _ = self._points(samples)
        self.schedule.check_guard(self.field, x)
        _, grads = self._loss_and_gradient(tf.constant(x), self.schedule.steps)
        return [g.numpy() for g in grads]

    def nll_gradient_fd(self, samples, eps=1e-5):
        """Central finite differences of nll, entry by entry."""
        x, _ = self._points(samples)
        x = tf.constant(x)
        grads = []
        for variable in self.trainable_variables:
            base = variable.numpy()
            grad = np.zeros_like(base)
            for index in np.ndindex(base.shape):
                values = []
                for sign in (1.0, -1.0):
                    shifted = base.copy()
                    shifted[index] += sign * eps
                    variable.assign(shifted)
                    values.append(float(-tf.reduce_mean(self._logdensity(x, self.schedule.steps))))
                grad[index] = (values[0] - values[1]) / (2.0 * eps)
            variable.assign(base)
            grads.append(grad)
        return grads

    def get_opti(self, lr):
        if self.optimiser == 'adam':
            return Adam(learning_rate=lr)
        return SGD(learning_rate=lr)

    def compile(self, learning_rate, optimiser='sgd'):
        self.learning_rate = learning_rate
        self.optimiser = optimiser
        self.optimizer = self.get_opti(learning_rate)
        self._train_step = tf.function(self._loss_and_gradient)

    def _ensure_guard(self, points):
        lipschitz = self.guard_lipschitz(points)
        while not guard_step_size(self.schedule.h, lipschitz, self.schedule.guard_threshold):
            refined = self.schedule.refined()
            if refined.steps > MAX_STEPS:
                raise GuardViolation('guard unrecoverable: h*Lambda = %.6g with m=%d at the step cap %d'
                                     % (self.schedule.h * lipschitz, self.schedule.steps, MAX_STEPS))
            logger.warning('guard violated (h*Lambda = %.4g), halving h: m %d -> %d',
                           self.schedule.h * lipschitz, self.schedule.steps, refined.steps)
            self.schedule = refined
        return lipschitz

    def train_erm(self, samples, config, callbacks=None):
        """Projected first-order descent (SGD or Adam) on the empirical negative log-likelihood."""
        x, _ = self._points(samples)
        if self.schedule.guard_mode != config.guard_mode:
            self.schedule = FlowSchedule(self.schedule.steps, config.guard_mode, self.schedule.guard_threshold)
        if self.optimizer is None or (self.learning_rate, self.optimiser) != (config.learning_rate, config.optimiser):
            self.compile(config.learning_rate, config.optimiser)

        rng = make_rng(config.seed, 'batch')
        n = x.shape[0]
        full_batch = config.batch_size == 0 or config.batch_size >= n
        callback_list = tf.keras.callbacks.CallbackList(callbacks or [])
        callback_list.on_train_begin()

        for iteration in range(config.iterations):
            lipschitz = self._ensure_guard(x)
            self.guard_history.append(lipschitz)
            batch = x if full_batch else x[rng.choice(n, size=config.batch_size, replace=False)]

            if config.fd_fallback:
                loss = self.nll(batch)
                grads = [tf.constant(g) for g in self.nll_gradient_fd(batch)]
            else:
                loss, grads = self._train_step(tf.constant(batch), self.schedule.steps)
                loss = float(loss)

            self.losses.append(loss)
            callback_list.on_epoch_end(iteration, {'nll': loss, 'guard_lipschitz': lipschitz,
                                                   'h': self.schedule.h, 'steps': self.schedule.steps})

            self.optimizer.apply_gradients(zip(grads, self.trainable_variables))
            self.field.project_params()
            self.iteration += 1

        if config.iterations > 0:
            self._ensure_guard(x)
        callback_list.on_train_end()
        return self, list(self.losses)

    def sample(self, n, seed):
        z = uniform_ball(make_rng(seed, 'sample'), n, self.d)
        return invert_flow(self.field, self.schedule, z).numpy()

    def kl_estimate(self, target_logdensity, grid_resolution=256):
        points, weights = polar_grid(self.d, grid_resolution)
        log_target = np.asarray(target_logdensity(points))
        log_model = self.model_logdensity(points)
        return KLEstimate.from_raw(np.sum(weights * np.exp(log_target) * (log_target - log_model)))

    def density_mass(self, grid_resolution=256):
        points, weights = polar_grid(self.d, grid_resolution)
        return float(np.sum(weights * np.exp(self.model_logdensity(points))))

    def erm_gap(self, target_logdensity, negentropy, samples, grid_resolution=128):
        """|KL(mu | model) - (nll + int f_mu log f_mu)|, a pure Monte Carlo error of the sample mean."""
        kl = self.kl_estimate(target_logdensity, grid_resolution)
        return abs(kl.raw - (self.nll(samples) + negentropy))

    def to_checkpoint(self):
        return {
            'schema_version': SCHEMA_VERSION,
            'field': self.field.get_config(),
            'm': self.schedule.steps,
            'guard_mode': self.schedule.guard_mode,
            'direction': self.direction,
        }

    @classmethod
    def from_checkpoint(cls, checkpoint):
        if checkpoint.get('direction', DIRECTION) != DIRECTION:
            raise ValueError('unsupported direction convention %r' % (checkpoint['direction'],))
        field = field_from_config(checkpoint['field'])
        return cls(field, FlowSchedule(checkpoint['m'], checkpoint.get('guard_mode', 'empirical')))

    def save(self, folder):
        write_json(self.to_checkpoint(), os.path.join(folder, 'checkpoint.json'))

    def load_weights(self, filepath):
        with open(filepath) as f:
            config = json.load(f)['field']
        values = []
        for i, kernel in enumerate(config['weights']):
            values.append(kernel)
            if i < len(config['biases']):
                values.append(config['biases'][i])
        for variable, value in zip(self.trainable_variables, values):
            variable.assign(np.asarray(value, dtype=np.float64).reshape(variable.shape))


def model_logdensity(model, x):
    return model.model_logdensity(x)


def nll(model, samples):
    return model.nll(samples)


def nll_gradient(model, samples):
    return model.nll_gradient(samples)


def train_erm(model, samples, config, callbacks=None):
    return model.train_erm(samples, config, callbacks)


def sample(model, n, seed):
    return model.sample(n, seed)


def kl_estimate(model, target_logdensity, grid_resolution=256):
    return model.kl_estimate(target_logdensity, grid_resolution)
