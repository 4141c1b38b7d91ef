import json

import numpy as np
import tensorflow as tf

from models.layers.layers import BoxConstraint, cutoff_gradient_bound, radial_cutoff, requ
from utils.rng import make_rng
from utils.write import write_json


def _as_batch(y, d):
    y = tf.convert_to_tensor(y, dtype=tf.float64)
    single = len(y.shape) == 1
    if single:
        y = y[None, :]
    if y.shape[-1] != d:
        raise ValueError('dimension mismatch: field expects %d spatial coordinates, got %s' % (d, y.shape[-1]))
    return y, single


def _time_column(t, y):
    t = tf.convert_to_tensor(t, dtype=tf.float64)
    return tf.broadcast_to(tf.reshape(t, [-1, 1]), [tf.shape(y)[0], 1])


class ReQUNetwork(tf.keras.layers.Layer):
    """Fully connected ReQU field eta_theta(y, t) on R^d x [0, 1].

    Layer i maps width widths[i-1] to widths[i] (widths[-1] == d, input width d + 1
    for the time coordinate). Hidden layers apply ReQU, the last layer is linear with
    no bias. Parameters live in [-1, 1].
    """

    def __init__(self, d, widths, seed=0, init_scale=None, weights=None, biases=None):
        super().__init__(name='requ_network', dtype='float64')

        self.d = int(d)
        self.widths = [int(w) for w in widths]
        self.depth = len(self.widths)
        self.seed = seed
        self.constraint = BoxConstraint(-1.0, 1.0)

        if self.depth < 1 or min(self.widths) < 1:
            raise ValueError('widths must be a non-empty list of positive integers, got %s' % (widths,))
        if self.widths[-1] != self.d:
            raise ValueError('the output width %d must equal d=%d' % (self.widths[-1], self.d))

        self.width = max(self.widths)
        self.init_scale = 0.5 / self.width if init_scale is None else float(init_scale)

        self._build(weights, biases)
        self.built = True

    def _build(self, weights, biases):
        rng = make_rng(self.seed, 'init') if weights is None else None
        fan_in = [self.d + 1] + list(self.widths[:-1])
        s = self.init_scale

        self.kernels = []
        self.biases = []
        for i, (n_out, n_in) in enumerate(zip(self.widths, fan_in)):
            if weights is None:
                w = rng.uniform(-s, s, size=(n_out, n_in))
            else:
                w = np.asarray(weights[i], dtype=np.float64).reshape(n_out, n_in)
            self.kernels.append(self._parameter('kernel_%d' % i, w))

            if i == self.depth - 1:
                continue
            if biases is None or weights is None:
                b = rng.uniform(-s, s, size=(n_out,)) if weights is None else np.zeros(n_out)
            else:
                b = np.asarray(biases[i], dtype=np.float64).reshape(n_out)
            self.biases.append(self._parameter('bias_%d' % i, b))

    def _parameter(self, name, value):
        variable = self.add_weight(name=name, shape=value.shape, dtype=tf.float64, initializer='zeros',
                                   constraint=self.constraint, trainable=True)
        variable.assign(value)
        return variable

    def _inputs(self, y, t):
        return tf.concat([y, _time_column(t, y)], axis=1)

    def preactivations(self, y, t):
        y, _ = _as_batch(y, self.d)
        z = self._inputs(y, t)
        out = []
        for kernel, bias in zip(self.kernels[:-1], self.biases):
            a = tf.linalg.matmul(z, kernel, transpose_b=True) + bias
            out.append(a)
            z = requ(a)
        return out

    def call(self, y, t):
        y, single = _as_batch(y, self.d)
        z = self._inputs(y, t)
        for kernel, bias in zip(self.kernels[:-1], self.biases):
            z = requ(tf.linalg.matmul(z, kernel, transpose_b=True) + bias)
        out = tf.linalg.matmul(z, self.kernels[-1], transpose_b=True)
        return out[0] if single else out

    def forward(self, y, t):
        return self(y, t)

    def spatial_jacobian(self, y, t):
        """Product of the layer Jacobians 2 diag(relu(w z + b)) w, y-columns only."""
        y, single = _as_batch(y, self.d)
        z = self._inputs(y, t)
        columns = tf.eye(self.d + 1, num_columns=self.d, dtype=tf.float64)
        jac = tf.broadcast_to(columns, [tf.shape(y)[0], self.d + 1, self.d])
        for kernel, bias in zip(self.kernels[:-1], self.biases):
            a = tf.linalg.matmul(z, kernel, transpose_b=True) + bias
            jac = 2.0 * tf.nn.relu(a)[:, :, None] * tf.einsum('ij,njk->nik', kernel, jac)
            z = requ(a)
        jac = tf.einsum('ij,njk->nik', self.kernels[-1], jac)
        return jac[0] if single else jac

    def divergence(self, y, t):
        return tf.linalg.trace(self.spatial_jacobian(y, t))

    def project_params(self):
        for variable in self.trainable_variables:
            variable.assign(self.constraint(variable))
        return self

    def lipschitz_bound(self, R0=None):
        """Formula Lipschitz constant exp(log Lambda) of the capacity ledger."""
        from utils.bounds import R0_DEFAULT, capacity_ledger
        ledger = capacity_ledger(self.d, self.depth, self.width, h=None, R0=R0_DEFAULT if R0 is None else R0)
        return float(np.exp(ledger.log_lambda))

    def output_bound(self, R0=None):
        """sup |eta| over inputs of norm at most R0, from the current parameters.

        Uses |requ(a)| <= |a|^2 layer by layer.
        """
        from utils.bounds import R0_DEFAULT
        norm = R0_DEFAULT if R0 is None else R0
        for kernel, bias in zip(self.kernels[:-1], self.biases):
            norm = (np.linalg.norm(kernel.numpy(), 2) * norm + np.linalg.norm(bias.numpy())) ** 2
        return float(np.linalg.norm(self.kernels[-1].numpy(), 2) * norm)

    def get_config(self):
        return {
            'd': self.d,
            'L': self.depth,
            'widths': list(self.widths),
            'weights': [k.numpy().tolist() for k in self.kernels],
            'biases': [b.numpy().tolist() for b in self.biases],
            'cutoff': None,
        }

    @classmethod
    def from_config(cls, config):
        if config['L'] != len(config['widths']):
            raise ValueError('config depth %d does not match %d widths' % (config['L'], len(config['widths'])))
        return cls(config['d'], config['widths'], weights=config['weights'], biases=config['biases'])


class CutoffField(tf.keras.layers.Layer):
    """chi_K(y) * eta_theta(y, t): a ReQU field forced to vanish for |y| >= 1/2."""

    def __init__(self, network, K, k=4):
        super().__init__(name='cutoff_field', dtype='float64')

        self.network = network
        self.d = network.d
        self.K = int(K)
        self.k = int(k)

        if self.k < 4:
            raise ValueError('spline order k must be at least 4, got %d' % self.k)
        if self.K <= 2 * (self.k + 1):
            raise ValueError('spline resolution K=%d must exceed 2(k+1)=%d' % (self.K, 2 * (self.k + 1)))
        self.built = True

    def call(self, y, t):
        y, single = _as_batch(y, self.d)
        chi, _ = radial_cutoff(y, self.K, self.k)
        out = chi[:, None] * self.network(y, t)
        return out[0] if single else out

    def forward(self, y, t):
        return self(y, t)

    def spatial_jacobian(self, y, t):
        y, single = _as_batch(y, self.d)
        chi, grad_chi = radial_cutoff(y, self.K, self.k)
        jac = chi[:, None, None] * self.network.spatial_jacobian(y, t) + self.network(y, t)[:, :, None] * grad_chi[:, None, :]
        return jac[0] if single else jac

    def divergence(self, y, t):
        return tf.linalg.trace(self.spatial_jacobian(y, t))

    def project_params(self):
        self.network.project_params()
        return self

    def lipschitz_bound(self, R0=None):
        """Product rule: chi <= 1 times Lambda plus sup|eta| sup|grad chi|."""
        return self.network.lipschitz_bound(R0) + self.network.output_bound(R0) * cutoff_gradient_bound(self.K, self.k)

    def get_config(self):
        config = self.network.get_config()
        config['cutoff'] = {'K': self.K, 'k': self.k}
        return config


def forward(net, y, t):
    return net(y, t)


def spatial_jacobian(net, y, t):
    return net.spatial_jacobian(y, t)


def divergence(net, y, t):
    return net.divergence(y, t)


def project_params(net):
    return net.project_params()


def cutoff_value(K, k, y):
    """chi_K(y) for a single point or a batch."""
    if K <= 2 * (k + 1):
        raise ValueError('spline resolution K=%d must exceed 2(k+1)=%d' % (K, 2 * (k + 1)))
    y = tf.convert_to_tensor(y, dtype=tf.float64)
    single = len(y.shape) == 1
    chi, _ = radial_cutoff(y[None, :] if single else y, K, k)
    return chi[0] if single else chi


def field_from_config(config):
    network = ReQUNetwork.from_config(config)
    if config.get('cutoff') is None:
        return network
    return CutoffField(network, config['cutoff']['K'], config['cutoff']['k'])


def save_field(field, filepath):
    write_json(field.get_config(), filepath)


def load_field(filepath):
    with open(filepath) as f:
        return field_from_config(json.load(f))
