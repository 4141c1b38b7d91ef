"""Radial Beckmann transport between two densities on the ball of radius 1/2.

For radial data the flux w solving div w = f_nu - f_mu with zero normal flux is
w(r) x/|x| with w(r) = r^{1-d} int_0^r s^{d-1} (f_nu - f_mu)(s) ds. Along the linear
interpolation f_t = (1-t) f_nu + t f_mu the field xi = w / f_t transports nu to mu.
"""

import logging

import numpy as np
import pandas as pd
from scipy import integrate
from scipy.interpolate import CubicSpline

from models.RK2Flow import GuardViolation, empirical_lipschitz, guard_step_size
from models.RK2Flow import integrate as integrate_flow
from utils.quadrature import RADIUS, KLEstimate, log_ball_volume, log_sphere_area, polar_grid
from utils.rng import make_rng

logger = logging.getLogger(__name__)

QUAD_TOL = 1e-12
FD_STEP = 1e-5
NORMALIZATION_TOL = 1e-10


def uniform_density(d):
    value = float(np.exp(-log_ball_volume(d)))

    def density(r):
        return np.full_like(np.asarray(r, dtype=np.float64), value)
    return density


def bump_density(beta, d=2):
    """f_nu (1 + beta (1 - 8 r^2)); integrates to one on the disc for every beta."""
    base = uniform_density(d)

    def density(r):
        r = np.asarray(r, dtype=np.float64)
        return base(r) * (1.0 + beta * (1.0 - 8.0 * r ** 2))
    return density


class RadialBeckmannProblem():

    def __init__(self, d, f_mu, f_nu=None, quadrature_n=2048, flux_defect=0.0, name='custom'):

        self.name = name
        self.d = int(d)
        self.f_mu = f_mu
        self.f_nu = uniform_density(self.d) if f_nu is None else f_nu
        self.quadrature_n = int(quadrature_n)
        self.flux_defect = float(flux_defect)
        self.sphere_area = float(np.exp(log_sphere_area(self.d)))

        if self.d < 1:
            raise ValueError('d must be at least 1, got %d' % self.d)
        if self.quadrature_n < 16:
            raise ValueError('quadrature_n must be at least 16, got %d' % self.quadrature_n)

        self._build()

    def _radial_integral(self, fn, a, b):
        value, _ = integrate.quad(lambda s: s ** (self.d - 1) * fn(s), a, b,
                                  epsabs=QUAD_TOL, epsrel=QUAD_TOL, limit=200)
        return value

    def _build(self):
        for label, density in (('source', self.f_nu), ('target', self.f_mu)):
            mass = self.sphere_area * self._radial_integral(density, 0.0, RADIUS)
            if abs(mass - 1.0) > NORMALIZATION_TOL:
                raise ValueError('%s density integrates to %.12g, not 1' % (label, mass))

        self.grid = np.linspace(0.0, RADIUS, self.quadrature_n + 1)
        self.kappa = float(min(np.min(self.f_nu(self.grid)), np.min(self.f_mu(self.grid))))
        if self.kappa <= 0:
            raise ValueError('densities must stay positive on the disc, min is %.6g' % self.kappa)

        difference = lambda s: self.f_nu(s) - self.f_mu(s)
        pieces = [self._radial_integral(difference, a, b) for a, b in zip(self.grid[:-1], self.grid[1:])]
        cumulative = np.concatenate([[0.0], np.cumsum(pieces)])
        flux = np.zeros_like(self.grid)
        flux[1:] = self.grid[1:] ** (1 - self.d) * cumulative[1:]
        flux = flux + self.flux_defect * self.grid
        self.flux_spline = CubicSpline(self.grid, flux)
        self.nu_spline = CubicSpline(self.grid, self.f_nu(self.grid))
        self.mu_spline = CubicSpline(self.grid, self.f_mu(self.grid))

        target_pieces = [self._radial_integral(self.f_mu, a, b) for a, b in zip(self.grid[:-1], self.grid[1:])]
        self.target_mass = self.sphere_area * np.concatenate([[0.0], np.cumsum(target_pieces)])

        logger.debug('beckmann problem %s: kappa=%.6g, sup|w|=%.6g', self.name, self.kappa, np.max(np.abs(flux)))

    def radial_flux(self, r):
        """w(r) by adaptive quadrature; 0 at r = 0."""
        r = float(r)
        if r < 0 or r > RADIUS:
            raise ValueError('r must lie in [0, 1/2], got %r' % r)
        if r == 0:
            return 0.0
        difference = lambda s: self.f_nu(s) - self.f_mu(s)
        return r ** (1 - self.d) * self._radial_integral(difference, 0.0, r) + self.flux_defect * r

    def interpolated_density(self, r, t):
        return (1.0 - t) * self.f_nu(r) + t * self.f_mu(r)

    def radial_speed(self, r, t):
        """g = w / f_t and dg/dr from the tabulated flux."""
        r = np.clip(np.asarray(r, dtype=np.float64), 0.0, RADIUS)
        f_t = (1.0 - t) * self.nu_spline(r) + t * self.mu_spline(r)
        df_t = (1.0 - t) * self.nu_spline(r, 1) + t * self.mu_spline(r, 1)
        w = self.flux_spline(r)
        dw = self.flux_spline(r, 1)
        return w / f_t, (dw * f_t - w * df_t) / f_t ** 2

    def beckmann_field(self, y, t):
        y = np.asarray(y, dtype=np.float64)
        single = y.ndim == 1
        y = np.atleast_2d(y)
        r = np.linalg.norm(y, axis=1)
        g, _ = self.radial_speed(r, t)
        g = np.where(r >= RADIUS, 0.0, g)
        scale = np.divide(g, r, out=np.zeros_like(r), where=r > 0)
        out = scale[:, None] * y
        return out[0] if single else out

    def field_jacobian(self, y, t):
        """g' u u^T + (g/r)(I - u u^T), u = y/|y|; g'(0) I at the origin."""
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        r = np.linalg.norm(y, axis=1)
        g, dg = self.radial_speed(r, t)
        _, dg0 = self.radial_speed(np.zeros(1), t)
        tiny = r < 1e-12
        safe_r = np.where(tiny, 1.0, r)
        u = y / safe_r[:, None]
        radial = np.einsum('ni,nj->nij', u, u)
        eye = np.eye(self.d)[None, :, :]
        g_over_r = np.where(tiny, dg0[0] if np.ndim(dg0) else dg0, g / safe_r)
        dg = np.where(tiny, g_over_r, dg)
        jac = dg[:, None, None] * radial + g_over_r[:, None, None] * (eye - radial)
        return np.where((r >= RADIUS)[:, None, None], 0.0, jac)

    def continuity_residual(self, r, t):
        """|(f_mu - f_nu) + div w| with div w = w' + (d-1) w / r, w' by central differences."""
        if not 0.0 < t < 1.0:
            raise ValueError('t must lie in (0, 1), got %r' % t)
        if not FD_STEP < r < RADIUS - FD_STEP:
            raise ValueError('r must be interior, got %r' % r)
        dw = (self.radial_flux(r + FD_STEP) - self.radial_flux(r - FD_STEP)) / (2.0 * FD_STEP)
        div = dw + (self.d - 1) * self.radial_flux(r) / r
        return float(abs(self.f_mu(r) - self.f_nu(r) + div))

    def target_logdensity(self, x):
        return np.log(self.f_mu(np.linalg.norm(np.atleast_2d(x), axis=1)))

    def source_logdensity(self, x):
        return np.log(self.f_nu(np.linalg.norm(np.atleast_2d(x), axis=1)))

    def negentropy(self):
        """int f_mu log f_mu over the disc."""
        return self.sphere_area * self._radial_integral(lambda s: self.f_mu(s) * np.log(self.f_mu(s)), 0.0, RADIUS)

    def radial_kl(self):
        """KL(mu | nu) = int f_mu log(f_mu / f_nu) by radial quadrature."""
        return self.sphere_area * self._radial_integral(
            lambda s: self.f_mu(s) * (np.log(self.f_mu(s)) - np.log(self.f_nu(s))), 0.0, RADIUS)

    def sample_target(self, n, seed):
        """Radial inverse-CDF draws from mu, uniform directions."""
        rng = make_rng(seed, 'data')
        u = rng.uniform(0.0, 1.0, size=n)
        r = np.interp(u, self.target_mass / self.target_mass[-1], self.grid)
        direction = rng.standard_normal(size=(n, self.d))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        return np.minimum(r, RADIUS * (1.0 - 1e-12))[:, None] * direction

    def export_field_grid(self, t=0.0, n=41):
        """The field sampled on a Cartesian grid inside the disc."""
        axis = np.linspace(-RADIUS, RADIUS, n)
        mesh = np.stack(np.meshgrid(*([axis] * self.d), indexing='ij'), axis=-1).reshape(-1, self.d)
        mesh = mesh[np.linalg.norm(mesh, axis=1) <= RADIUS]
        values = self.beckmann_field(mesh, t)
        frame = pd.DataFrame(mesh, columns=['x_%d' % (i + 1) for i in range(self.d)])
        frame['t'] = t
        for i in range(self.d):
            frame['xi_%d' % (i + 1)] = values[:, i]
        return frame


class BeckmannField():
    """Adapter exposing a problem's transport field to the RK2 flow."""

    def __init__(self, problem):
        self.problem = problem
        self.d = problem.d
        self.trainable_variables = []

    def __call__(self, y, t):
        return self.problem.beckmann_field(np.asarray(y), np.asarray(t))

    def spatial_jacobian(self, y, t):
        return self.problem.field_jacobian(np.asarray(y), np.asarray(t))

    def divergence(self, y, t):
        return np.trace(self.spatial_jacobian(y, t), axis1=-2, axis2=-1)

    def lipschitz_bound(self):
        """max(|g'|, |g/r|) over the flux table and eleven equally spaced times."""
        r = self.problem.grid[1:]
        largest = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            g, dg = self.problem.radial_speed(r, t)
            largest = max(largest, float(np.max(np.abs(dg))), float(np.max(np.abs(g / r))))
        return largest


def bump_problem(beta, d=2, quadrature_n=2048, flux_defect=0.0):
    if d != 2:
        raise ValueError('the bump family is defined for d=2, got d=%d' % d)
    if not abs(beta) < 1:
        raise ValueError('bump amplitude must satisfy |beta| < 1, got %r' % beta)
    return RadialBeckmannProblem(d, bump_density(beta, d), quadrature_n=quadrature_n,
                                 flux_defect=flux_defect, name='bump(beta=%g)' % beta)


def problem_from_spec(spec):
    family = spec.get('family', 'bump')
    if family == 'bump':
        return bump_problem(spec['beta'], d=spec.get('d', 2), quadrature_n=spec.get('quadrature_n', 2048),
                            flux_defect=spec.get('flux_defect', 0.0))
    if family == 'uniform':
        d = spec.get('d', 2)
        return RadialBeckmannProblem(d, uniform_density(d), quadrature_n=spec.get('quadrature_n', 2048),
                                     flux_defect=spec.get('flux_defect', 0.0), name='uniform')
    raise ValueError('unknown density family %r' % (family,))


def radial_flux(problem, r):
    return problem.radial_flux(r)


def interpolated_density(problem, r, t):
    return problem.interpolated_density(r, t)


def beckmann_field(problem, y, t):
    return problem.beckmann_field(y, t)


def continuity_residual(problem, r, t):
    return problem.continuity_residual(r, t)


def verify_transport(problem, schedule, grid_resolution=256):
    """KL(mu | Psi_* nu) of the discrete Beckmann flow by polar quadrature.

    With y = Psi(x), f_push(y) = f_nu(x) / |det DPsi(x)|, so the KL integral pulled back
    to the source grid is int f_mu(Psi x) |det DPsi| (log f_mu(Psi x) + logdet - log f_nu(x)) dx.
    """
    field = BeckmannField(problem)
    lipschitz = schedule.guard_lipschitz(field) if schedule.guard_mode == 'formula' else empirical_lipschitz(field)
    if not guard_step_size(schedule.h, lipschitz, schedule.guard_threshold):
        raise GuardViolation('Beckmann field violates the step-size guard: h*Lambda = %.6g' % (schedule.h * lipschitz))

    points, weights = polar_grid(problem.d, grid_resolution)
    tape = integrate_flow(field, schedule, points, check_guard=False)
    radius = np.linalg.norm(tape.endpoint, axis=1)
    log_target = np.log(problem.f_mu(radius))
    log_source = np.log(problem.f_nu(np.linalg.norm(points, axis=1)))
    integrand = np.exp(log_target + tape.logdet) * (log_target + tape.logdet - log_source)
    estimate = KLEstimate.from_raw(np.sum(weights * integrand))
    logger.info('verify_transport %s: m=%d, grid=%d, KL=%.3e (raw %.3e)', problem.name, schedule.steps,
                grid_resolution, estimate.value, estimate.raw)
    return estimate
