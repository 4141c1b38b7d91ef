import numpy as np
import tensorflow as tf


def requ(x):
    """Rectified quadratic unit max(0, x)^2."""
    return tf.square(tf.nn.relu(x))


def requ_derivative(x):
    return 2.0 * tf.nn.relu(x)


class BoxConstraint(tf.keras.constraints.Constraint):
    """Clips every parameter entry into [lower, upper]."""

    def __init__(self, lower=-1.0, upper=1.0):
        self.lower = lower
        self.upper = upper

    def __call__(self, w):
        return tf.clip_by_value(w, self.lower, self.upper)

    def get_config(self):
        return {'lower': self.lower, 'upper': self.upper}


def uniform_knots(K, k):
    """Knots (i - k)/K for i = 0..K+k: spacing 1/K, k ghost knots left of zero.

    The K degree-k B-splines on this vector sum to one on [0, (K-k)/K] and vanish
    from 1 onwards.
    """
    return np.arange(-k, K + 1, dtype=np.float64) / K


def bspline_basis(s, K, k):
    """Cox-de Boor recursion on the uniform knots, batched over s.

    Returns a list whose entry p holds the degree-p basis, shape (N, K + k - p).
    Interval indicators carry no gradient, the polynomial pieces do.
    """
    s = tf.reshape(tf.convert_to_tensor(s, dtype=tf.float64), [-1, 1])
    knots = tf.constant(uniform_knots(K, k), dtype=tf.float64)
    basis = tf.cast(tf.logical_and(s >= knots[:-1], s < knots[1:]), tf.float64)
    levels = [basis]
    for p in range(1, k + 1):
        n = K + k - p
        left = (s - knots[:n]) / (knots[p:p + n] - knots[:n])
        right = (knots[p + 1:p + 1 + n] - s) / (knots[p + 1:p + 1 + n] - knots[1:n + 1])
        basis = left * basis[:, :n] + right * basis[:, 1:n + 1]
        levels.append(basis)
    return levels


def radial_cutoff(y, K, k):
    """chi_K(y) and its gradient for a batch y of shape (N, d).

    chi is the sum of all degree-k splines at s = 4|y|^2; on the uniform knots its
    derivative telescopes to -K times the last degree-(k-1) spline.
    """
    s = 4.0 * tf.reduce_sum(tf.square(y), axis=-1)
    levels = bspline_basis(s, K, k)
    chi = tf.reduce_sum(levels[k], axis=-1)
    dchi_ds = -K * levels[k - 1][:, K]
    grad = (8.0 * dchi_ds)[:, None] * y
    return chi, grad


def cutoff_gradient_bound(K, k):
    """Upper bound on |grad chi_K| over the disc.

    |grad chi| = 8 |y| K B(s) <= 4 K max B, with B the last degree-(k-1) spline, whose
    maximum sits at the midpoint 1 - k / 2K of its support.
    """
    centre = 1.0 - 0.5 * k / K
    peak = float(bspline_basis([centre], K, k)[k - 1][0, K])
    return 4.0 * K * peak
