from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

RADIUS = 0.5


def log_ball_volume(d, radius=RADIUS):
    """log vol of the d-ball, pi^{d/2} r^d / Gamma(d/2 + 1)."""
    return 0.5 * d * np.log(np.pi) + d * np.log(radius) - gammaln(0.5 * d + 1.0)


def log_sphere_area(d):
    """log of the unit (d-1)-sphere area, 2 pi^{d/2} / Gamma(d/2)."""
    return np.log(2.0) + 0.5 * d * np.log(np.pi) - gammaln(0.5 * d)


def polar_grid(d, resolution, radius=RADIUS):
    """Tensor Gauss grid over the open ball.

    d=1 uses Gauss-Legendre nodes on (-radius, radius); d=2 uses Gauss-Legendre in the
    radius (weighted by r) times a uniform midpoint rule in the angle. Returns
    ``(points, weights)`` with points of shape (N, d).
    """
    nodes, gauss_weights = np.polynomial.legendre.leggauss(resolution)
    if d == 1:
        points = radius * nodes[:, None]
        weights = radius * gauss_weights
        return points, weights
    if d == 2:
        r = 0.5 * radius * (nodes + 1.0)
        w_r = 0.5 * radius * gauss_weights * r
        theta = (np.arange(resolution) + 0.5) * (2.0 * np.pi / resolution)
        rr, tt = np.meshgrid(r, theta, indexing='ij')
        points = np.stack([rr * np.cos(tt), rr * np.sin(tt)], axis=-1).reshape(-1, 2)
        weights = np.repeat(w_r, resolution) * (2.0 * np.pi / resolution)
        return points, weights
    raise ValueError('polar quadrature is implemented for d in {1, 2}, got d=%d' % d)


def radial_nodes(resolution, radius=RADIUS):
    """Gauss-Legendre nodes and weights on (0, radius)."""
    nodes, gauss_weights = np.polynomial.legendre.leggauss(resolution)
    return 0.5 * radius * (nodes + 1.0), 0.5 * radius * gauss_weights


@dataclass
class KLEstimate:
    """Quadrature KL divergence clipped at zero, next to the raw value."""

    value: float
    raw: float

    @classmethod
    def from_raw(cls, raw):
        raw = float(raw)
        return cls(value=max(raw, 0.0), raw=raw)
