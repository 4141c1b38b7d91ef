"""Invariant suite behind the verify command.

Each check draws from its own substream of the 'verify' random stream, returns the
measured value next to its threshold and never raises: an exception inside a check
is reported as a failure carrying the message.
"""

import json
import logging
import os
import time
from collections import OrderedDict

import jsonschema
import numpy as np
import tensorflow as tf

from models.Beckmann import bump_problem, verify_transport
from models.FlowDensity import FlowDensityModel, TrainConfig
from models.ReQUNet import CutoffField, ReQUNetwork, cutoff_value
from models.RK2Flow import (FlowError, FlowSchedule, GuardViolation, LinearField, SmoothTestField, guard_step_size,
                            integrate, invert_flow, liouville_logdet_reference, push_forward, rk2_step)
from utils.bounds import R0_DEFAULT, capacity_ledger, log_r_closed_form, log_r_sequence
from utils.quadrature import polar_grid
from utils.rng import RNG_NAME, make_rng, uniform_ball
from utils.write import SCHEMA_VERSION, to_builtin

logger = logging.getLogger(__name__)

SCHEMA_PATH = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
                           'schemas', 'verify_report.schema.json')

CHECKS = OrderedDict()


def check(name):
    def register(fn):
        CHECKS[name] = fn
        return fn
    return register


def _result(measured, threshold, passed, **detail):
    out = {'measured': measured, 'threshold': threshold, 'status': 'pass' if passed else 'fail'}
    if detail:
        out['detail'] = detail
    return out


def central_difference_jacobian(fn, y, eps=1e-5):
    """(N, out, d) central-difference Jacobian of a batched map fn: (N, d) -> (N, out)."""
    y = np.asarray(y, dtype=np.float64)
    columns = []
    for i in range(y.shape[1]):
        shift = np.zeros(y.shape[1])
        shift[i] = eps
        columns.append((np.asarray(fn(y + shift)) - np.asarray(fn(y - shift))) / (2.0 * eps))
    return np.stack(columns, axis=-1)


def random_network(rng, d, L, W, scale=1.0):
    widths = [W] * (L - 1) + [d]
    fan_in = [d + 1] + widths[:-1]
    weights = [rng.uniform(-scale, scale, size=(n_out, n_in)) for n_out, n_in in zip(widths, fan_in)]
    biases = [rng.uniform(-scale, scale, size=(n_out,)) for n_out in widths[:-1]]
    return ReQUNetwork(d, widths, weights=weights, biases=biases)


def random_cutoff_field(seed, d=2, widths=(8, 2), K=12, k=4, init_scale=0.5):
    return CutoffField(ReQUNetwork(d, list(widths), seed=seed, init_scale=init_scale), K, k)


def guarded_schedule(field, steps, points=None):
    """The first of steps, 2 steps, 4 steps, ... that satisfies the empirical guard."""
    schedule = FlowSchedule(steps)
    lipschitz = schedule.guard_lipschitz(field, points)
    while not guard_step_size(schedule.h, lipschitz, schedule.guard_threshold):
        schedule = schedule.refined()
    return schedule


def min_trajectory_preactivation(field, steps, x):
    """Smallest |pre-activation| met by the RK2 stages along the trajectories of x."""
    network = field.network
    y = tf.constant(x, dtype=tf.float64)
    h = 1.0 / steps
    smallest = np.inf
    for k in range(steps):
        t = k / steps
        mid = y + 0.5 * h * field(y, t)
        for point, time_ in ((y, t), (mid, t + 0.5 * h)):
            for a in network.preactivations(point, time_):
                smallest = min(smallest, float(tf.reduce_min(tf.abs(a))))
        y = y + h * field(mid, t + 0.5 * h)
    return smallest


def away_from_kinks(network, points, t, tol=1e-3):
    """Rows of points whose pre-activations all stay at least tol away from zero."""
    keep = np.ones(len(points), dtype=bool)
    for a in network.preactivations(points, t):
        keep &= np.min(np.abs(a.numpy()), axis=1) >= tol
    return points[keep]


def _max_quotient(fn, a, b):
    numerator = np.linalg.norm(np.asarray(fn(a)) - np.asarray(fn(b)), axis=-1)
    denominator = np.linalg.norm(a - b, axis=-1)
    return float(np.max(numerator / denominator))


def _input_pairs(rng, d, n, near=1e-4):
    """Pairs of points (y, t) in Omega_d x [0, 1], half of them close together."""
    a = np.concatenate([uniform_ball(rng, n, d), rng.uniform(0.0, 1.0, size=(n, 1))], axis=1)
    b = np.concatenate([uniform_ball(rng, n, d), rng.uniform(0.0, 1.0, size=(n, 1))], axis=1)
    close = a + near * rng.standard_normal(size=a.shape)
    close[:, :d] *= np.minimum(1.0, 0.499 / np.linalg.norm(close[:, :d], axis=1))[:, None]
    close[:, d] = np.clip(close[:, d], 0.0, 1.0)
    return np.concatenate([a, a]), np.concatenate([b, close])


#### REQU NETWORK

@check('requ_jacobian_fd')
def check_requ_jacobian(rng, options):
    n_nets = 20 if options['quick'] else 100
    worst = 0.0
    accepted = 0
    while accepted < n_nets:
        d = int(rng.integers(1, 3))
        net = random_network(rng, d, int(rng.integers(1, 4)), int(rng.integers(2, 7)))
        y = uniform_ball(rng, 1, d)
        t = float(rng.uniform())
        # a central difference straddling a ReQU kink is not a derivative
        if len(away_from_kinks(net, y, t)) == 0:
            continue
        accepted += 1
        jac = net.spatial_jacobian(y, t).numpy()[0]
        fd = central_difference_jacobian(lambda p: net(p, t).numpy(), y)[0]
        worst = max(worst, float(np.max(np.abs(jac - fd)) / (1.0 + np.max(np.abs(jac)))))
    return _result(worst, 1e-6, worst < 1e-6, networks=n_nets)


@check('divergence_is_trace')
def check_divergence(rng, options):
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(1, 3))
        net = random_network(rng, d, int(rng.integers(1, 4)), int(rng.integers(1, 7)))
        y = uniform_ball(rng, 16, d)
        t = rng.uniform(size=16)
        trace = np.trace(net.spatial_jacobian(y, t).numpy(), axis1=1, axis2=2)
        worst = max(worst, float(np.max(np.abs(net.divergence(y, t).numpy() - trace))))
    return _result(worst, 0.0, worst == 0.0)


@check('cutoff_partition_of_unity')
def check_cutoff(rng, options):
    K, k = 12, 4
    inner = np.sqrt((K - k) / K) / 2.0
    y = uniform_ball(rng, 512, 2, radius=inner)
    interior = float(np.max(np.abs(cutoff_value(K, k, y).numpy() - 1.0)))
    outside = float(np.max(np.abs(cutoff_value(K, k, np.array([[0.5, 0.0], [0.0, 0.5], [0.3, 0.4]])).numpy())))
    radii = np.linspace(inner, 0.5, 200)
    band = cutoff_value(K, k, np.stack([radii, np.zeros_like(radii)], axis=1)).numpy()
    monotone = bool(np.all(np.diff(band) <= 1e-15))
    worst = max(interior, outside)
    return _result(worst, 1e-12, worst < 1e-12 and monotone, monotone=monotone)


#### FLOW

@check('rk2_order')
def check_rk2_order(rng, options):
    field = LinearField([[1.0]], modulated=True)
    y0 = np.array([[0.3]])
    exact = field.exact_flow(y0)
    errors = [float(np.max(np.abs(integrate(field, FlowSchedule(m), y0, check_guard=False).endpoint - exact)))
              for m in (8, 16, 32, 64)]
    ratios = [errors[i] / errors[i + 1] for i in range(3)]
    return _result(ratios, [3.5, 4.5], all(3.5 <= r <= 4.5 for r in ratios), errors=errors)


@check('discrete_logdet_fd')
def check_discrete_logdet(rng, options):
    field = random_cutoff_field(int(rng.integers(2 ** 31)))
    steps = 32
    x = uniform_ball(rng, 50, 2)
    _, logdet = push_forward(field, steps, tf.constant(x))
    endpoint = lambda p: push_forward(field, steps, tf.constant(p))[0].numpy()
    fd = central_difference_jacobian(endpoint, x, eps=1e-6)
    _, reference = np.linalg.slogdet(fd)
    worst = float(np.max(np.abs(logdet.numpy() - reference)))
    return _result(worst, 1e-5, worst < 1e-5)


@check('liouville_gap_order')
def check_liouville_gap(rng, options):
    field = SmoothTestField()
    y0 = np.array([[0.3, 0.2]])
    reference = float(liouville_logdet_reference(field, y0, 2048 if options['quick'] else 4096).numpy()[0])
    steps = [8, 16, 32, 64, 128]
    gaps = [abs(float(integrate(field, FlowSchedule(m), y0, check_guard=False).logdet[0]) - reference)
            for m in steps]
    slope = float(np.polyfit(np.log(1.0 / np.array(steps)), np.log(gaps), 1)[0])
    return _result(slope, [1.7, 2.3], abs(slope - 2.0) <= 0.3, gaps=gaps)


@check('bijectivity_round_trip')
def check_round_trip(rng, options):
    field = random_cutoff_field(int(rng.integers(2 ** 31)))
    x = uniform_ball(rng, 200 if options['quick'] else 1000, 2)
    schedule = guarded_schedule(field, 16, x)
    z = integrate(field, schedule, x).endpoint
    worst = float(np.max(np.abs(invert_flow(field, schedule, z).numpy() - x)))
    return _result(worst, 1e-8, worst < 1e-8, steps=schedule.steps)


@check('guard_violation_detected')
def check_guard_violation(rng, options):
    steps = 8
    # h * Lambda = 2, four times the guard threshold
    field = LinearField(16.0 * np.eye(2))
    schedule = FlowSchedule(steps, guard_mode='formula')
    z = uniform_ball(rng, 16, 2)
    ratio = schedule.h * field.lipschitz_bound() / schedule.guard_threshold
    guard_raised = False
    try:
        invert_flow(field, schedule, z)
    except GuardViolation:
        guard_raised = True
    inversion_failed = False
    try:
        invert_flow(field, schedule, z, check_guard=False)
    except FlowError:
        inversion_failed = True
    return _result(ratio, 4.0, guard_raised and inversion_failed,
                   guard_raised=guard_raised, unguarded_inversion_failed=inversion_failed)


#### BECKMANN

def _bump(options):
    key = 'bump_problem'
    if key not in options:
        options[key] = bump_problem(0.5, flux_defect=0.1 if options['inject_flux_defect'] else 0.0)
    return options[key]


@check('beckmann_continuity')
def check_continuity(rng, options):
    problem = _bump(options)
    worst = max(problem.continuity_residual(r, 0.5) for r in np.linspace(0.01, 0.49, 100))
    return _result(worst, 1e-6, worst < 1e-6)


@check('beckmann_boundary_flux')
def check_boundary_flux(rng, options):
    value = abs(_bump(options).radial_flux(0.5))
    return _result(value, 1e-10, value < 1e-10)


@check('beckmann_normalization')
def check_beckmann_normalization(rng, options):
    problem = _bump(options)
    points, weights = polar_grid(2, 256)
    radius = np.linalg.norm(points, axis=1)
    worst = max(abs(float(np.sum(weights * density(radius))) - 1.0) for density in (problem.f_mu, problem.f_nu))
    return _result(worst, 1e-10, worst < 1e-10)


@check('beckmann_transport_kl')
def check_transport(rng, options):
    estimate = verify_transport(_bump(options), FlowSchedule(64), 128 if options['quick'] else 256)
    return _result(estimate.value, 1e-4, estimate.value < 1e-4, raw=estimate.raw)


#### DENSITY ERM

@check('nll_gradient_fd')
def check_nll_gradient(rng, options):
    problem = _bump(options)
    n_configs = 3 if options['quick'] else 20
    worst = 0.0
    accepted = 0
    while accepted < n_configs:
        seed = int(rng.integers(2 ** 31))
        model = FlowDensityModel.build(2, [3, 2], K=12, steps=4, seed=seed, init_scale=0.5)
        samples = problem.sample_target(8, seed)
        if min_trajectory_preactivation(model.field, model.schedule.steps, samples) < 1e-3:
            continue
        accepted += 1
        exact = np.concatenate([g.ravel() for g in model.nll_gradient(samples)])
        fd = np.concatenate([g.ravel() for g in model.nll_gradient_fd(samples)])
        scale = np.maximum(np.abs(fd), max(1e-3 * float(np.max(np.abs(fd))), 1e-12))
        worst = max(worst, float(np.max(np.abs(exact - fd) / scale)))
    return _result(worst, 1e-4, worst < 1e-4, configs=n_configs)


@check('model_normalization')
def check_model_normalization(rng, options):
    problem = _bump(options)
    seed = int(rng.integers(2 ** 31))
    model = FlowDensityModel.build(2, [8, 2], K=12, steps=8, seed=seed)
    model.train_erm(problem.sample_target(500, seed),
                    TrainConfig(learning_rate=0.05, iterations=5 if options['quick'] else 20, seed=seed))
    mass = model.density_mass(128 if options['quick'] else 256)
    return _result(abs(mass - 1.0), 2e-3, abs(mass - 1.0) < 2e-3, mass=mass)


#### BOUNDS

@check('ledger_closed_form')
def check_closed_form(rng, options):
    worst = 0.0
    for L in range(1, 7):
        for W in (1, 2, 4, 16):
            for R0 in (1.0, R0_DEFAULT, 2.0):
                for l, value in enumerate(log_r_sequence(L, W, R0)):
                    closed = log_r_closed_form(l, W, R0)
                    worst = max(worst, abs(value - closed) / max(1.0, abs(closed)))
    return _result(worst, 1e-12, worst <= 1e-12)


@check('ledger_lambda_example')
def check_lambda_example(rng, options):
    error = abs(capacity_ledger(1, 1, 2).log_lambda - np.log(8.0 * np.sqrt(5.0)))
    return _result(float(error), 1e-12, error <= 1e-12)


@check('ledger_power_inequalities')
def check_power_inequalities(rng, options):
    margin = -np.inf
    for L in range(1, 5):
        for W in range(1, 9):
            ledger = capacity_ledger(1, L, W)
            margin = max(margin, ledger.log_lam_eta_theta - 2.0 * ledger.log_lambda,
                         ledger.log_lam_deta_theta - 4.0 * ledger.log_lambda)
    return _result(float(margin), 0.0, margin <= 0.0)


@check('lipschitz_domination')
def check_lipschitz_domination(rng, options):
    margin = -np.inf
    for _ in range(20 if options['quick'] else 100):
        d = int(rng.integers(1, 3))
        net = random_network(rng, d, int(rng.integers(1, 4)), int(rng.integers(1, 5)))
        a, b = _input_pairs(rng, d, 64)
        quotient = _max_quotient(lambda z: net(z[:, :d], z[:, d]).numpy(), a, b)
        margin = max(margin, np.log(quotient) - capacity_ledger(d, net.depth, net.width).log_lambda)
    return _result(float(margin), 0.0, margin <= 0.0)


@check('step_lipschitz_domination')
def check_step_domination(rng, options):
    h = 1.0 / 32
    margin = -np.inf
    for _ in range(10 if options['quick'] else 40):
        d = int(rng.integers(1, 3))
        net = random_network(rng, d, int(rng.integers(1, 3)), int(rng.integers(1, 4)))
        t = float(rng.uniform(0.0, 1.0 - h))
        a = uniform_ball(rng, 64, d)
        b = np.concatenate([uniform_ball(rng, 32, d), a[:32] + 1e-4 * rng.standard_normal(size=(32, d))])
        quotient = _max_quotient(lambda y: rk2_step(net, t, h, y).numpy(), a, b)
        margin = max(margin, np.log(quotient) - capacity_ledger(d, net.depth, net.width, h=h).log_lam_psi_omega)
    return _result(float(margin), 0.0, margin <= 0.0)


@check('z_lipschitz_domination')
def check_z_domination(rng, options):
    problem = _bump(options)
    margin = -np.inf
    for _ in range(3 if options['quick'] else 10):
        seed = int(rng.integers(2 ** 31))
        model = FlowDensityModel.build(2, [3, 2], K=12, steps=4, seed=seed, init_scale=0.5)
        train = problem.sample_target(32, seed)
        population = problem.sample_target(256, seed + 1)

        def z_value():
            return model.nll(population) - model.nll(train)

        base = [v.numpy() for v in model.trainable_variables]
        z0 = z_value()
        shifts = [1e-3 * rng.standard_normal(size=v.shape) for v in base]
        for variable, value, shift in zip(model.trainable_variables, base, shifts):
            variable.assign(value + shift)
        quotient = abs(z_value() - z0) / np.sqrt(sum(float(np.sum(s ** 2)) for s in shifts))
        for variable, value in zip(model.trainable_variables, base):
            variable.assign(value)
        ledger = capacity_ledger(2, model.field.network.depth, model.field.network.width, h=model.schedule.h)
        margin = max(margin, np.log(max(quotient, 1e-300)) - ledger.log_lambda_z)
    return _result(float(margin), 0.0, margin <= 0.0)


#### SUITE

def run_suite(seed, quick=False, inject_flux_defect=False, checks=None):
    names = list(CHECKS) if not checks else list(checks)
    unknown = [name for name in names if name not in CHECKS]
    if unknown:
        raise ValueError('unknown checks %s; available: %s' % (unknown, ', '.join(CHECKS)))

    options = {'quick': quick, 'inject_flux_defect': inject_flux_defect}
    results = []
    for name in names:
        index = list(CHECKS).index(name)
        rng = make_rng(seed, 'verify', jump=index + 1)
        start = time.time()
        try:
            result = CHECKS[name](rng, options)
        except Exception as exc:
            logger.exception('check %s raised', name)
            result = {'measured': None, 'threshold': None, 'status': 'fail',
                      'detail': {'error': type(exc).__name__, 'message': str(exc)}}
        logger.info('%-28s %s  measured=%s  (%.1fs)', name, result['status'], result['measured'], time.time() - start)
        results.append(dict(name=name, **result))

    return {
        'schema_version': SCHEMA_VERSION,
        'rng': RNG_NAME,
        'seed': int(seed),
        'quick': bool(quick),
        'inject_flux_defect': bool(inject_flux_defect),
        'passed': all(r['status'] == 'pass' for r in results),
        'checks': results,
    }


def load_report_schema():
    with open(SCHEMA_PATH) as f:
        return json.load(f)


def validate_report(report):
    jsonschema.validate(to_builtin(report), load_report_schema())
    return report
