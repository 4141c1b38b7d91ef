"""Capacity, generalization and PAC constants of discretized ReQU flows.

Every constant is carried as its natural logarithm: products are sums and a factor
e^Lambda becomes an additive Lambda. Constants of the form exp(Lambda) with a huge
Lambda also carry a log-log value, which stays finite where the log itself does not.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
from scipy.special import gammaln, logsumexp

R0_DEFAULT = math.sqrt(5.0) / 2.0
NEG_INF = -np.inf


def _exp(log_value):
    with np.errstate(over='ignore'):
        return float(np.exp(log_value))


def log_expm1(y):
    """log(e^y - 1) without overflow for large y."""
    if y <= 0:
        return NEG_INF
    if y > 50.0:
        return y + math.log1p(-math.exp(-y))
    return math.log(math.expm1(y))


def log_of_linear_plus_exp(log_lambda, offset):
    """log(offset + Lambda) given log Lambda, for offset of moderate size."""
    if not np.isfinite(log_lambda):
        return log_lambda
    lam = _exp(log_lambda)
    if np.isfinite(lam):
        return math.log(lam + offset) if lam + offset > 0 else float('nan')
    return log_lambda + math.log1p(offset * math.exp(-log_lambda))


def log_r_sequence(L, W, R0=R0_DEFAULT):
    """log R_l for l = 0..L-1 from R_l = (2W)^2 R_{l-1}^2."""
    log_r = [math.log(R0)]
    for _ in range(1, L):
        log_r.append(2.0 * math.log(2.0 * W) + 2.0 * log_r[-1])
    return log_r


def log_r_closed_form(l, W, R0=R0_DEFAULT):
    return (2.0 ** (l + 1) - 2.0) * math.log(2.0 * W) + 2.0 ** l * math.log(R0)


def K_of_W(W, d):
    """floor((1/3) (W / (48 (d+1)))^{1/(d+1)}), settled in exact integer arithmetic."""
    if W < 1:
        raise ValueError('W must be at least 1, got %r' % (W,))
    W = int(W)
    K = int(math.floor((W / (48.0 * (d + 1))) ** (1.0 / (d + 1)) / 3.0))
    while 48 * (d + 1) * (3 * (K + 1)) ** (d + 1) <= W:
        K += 1
    while K > 0 and 48 * (d + 1) * (3 * K) ** (d + 1) > W:
        K -= 1
    return K


def subgaussian_constant(d, log_lambda, exponent=5):
    """log Lambda_Z = d (log 8d + exponent log Lambda + Lambda).

    exponent 5 gives the sub-Gaussian constant, 6 the one used for the learnability rate.
    """
    if exponent not in (5, 6):
        raise ValueError('exponent must be 5 or 6, got %r' % (exponent,))
    return d * (math.log(8.0 * d) + exponent * log_lambda + _exp(log_lambda))


def subgaussian_loglog(d, log_lambda, exponent=5):
    """log log Lambda_Z, finite even when log Lambda_Z overflows."""
    offset = math.log(8.0 * d) + exponent * log_lambda
    inner = log_of_linear_plus_exp(log_lambda, offset)
    return math.log(d) + inner


def expected_gen_bound(L, W, log_lambda_z, n):
    """log of 48 L W^2 Lambda_Z / sqrt(n)."""
    if n < 1:
        raise ValueError('n must be at least 1, got %r' % (n,))
    return math.log(48.0 * L * W ** 2) + log_lambda_z - 0.5 * math.log(n)


def log_mcdiarmid_diameter(d, log_lambda):
    """log D with D = (4 d Lambda^2)^d."""
    return d * (math.log(4.0 * d) + 2.0 * log_lambda)


def mcdiarmid_tail(eps, n, d, log_lambda):
    """log of exp(-eps^2 n / (4 D^2))."""
    if eps <= 0:
        raise ValueError('eps must be positive, got %r' % (eps,))
    log_d = log_mcdiarmid_diameter(d, log_lambda)
    return -0.25 * eps ** 2 * n * math.exp(-2.0 * log_d)


def logdet_discretization_bound(log_c, h, d):
    """log of (1/h) ((2 h^3 C + 1)^d - 1)."""
    if not 0.0 < h < 1.0:
        raise ValueError('h must lie in (0, 1), got %r' % (h,))
    if log_c == NEG_INF:
        return NEG_INF
    log_x = math.log(2.0) + 3.0 * math.log(h) + log_c
    return log_expm1(d * float(np.logaddexp(0.0, log_x))) - math.log(h)


def model_error_bound(log_c_xi, log_c_hat_xi, K, h, k):
    """log of C_xi / K^{k-1} + C^_xi h^2."""
    if K < 1:
        raise ValueError('K must be at least 1, got %r' % (K,))
    if not 0.0 < h < 1.0:
        raise ValueError('h must lie in (0, 1), got %r' % (h,))
    return float(np.logaddexp(log_c_xi - (k - 1) * math.log(K), log_c_hat_xi + 2.0 * math.log(h)))


def rk2_global_error_bound(h, log_c2_norm, lip_dxi, p=2, span=1.0):
    """log of h^p (C / Lip(D xi)) (e^{Lip(D xi) span} - 1) with C = 2 |xi|_{C^2}.

    Lip(D xi) = 0 gives the limit h^p C span.
    """
    log_c = math.log(2.0) + log_c2_norm
    if lip_dxi == 0:
        growth = math.log(span)
    else:
        growth = log_expm1(lip_dxi * span) - math.log(lip_dxi)
    return p * math.log(h) + log_c + growth


def c_dk_xi(d, k, log_norm_ck):
    """log of (1 + 9^{(d+1)(k-2)} (2k-1)^{2d+5}) (sqrt(2) e (d+1))^k 2 |xi|_{C^k}."""
    log_poly = float(np.logaddexp(0.0, (d + 1) * (k - 2) * math.log(9.0) + (2 * d + 5) * math.log(2 * k - 1)))
    return log_poly + k * (0.5 * math.log(2.0) + 1.0 + math.log(d + 1)) + math.log(2.0) + log_norm_ck


def c_xi(d, k, log_c, lip_xi, lip_dxi, lip_dk1_xi):
    """log C_xi of the endpoint approximation error."""
    if lip_xi == 0:
        growth = lip_dxi
    else:
        growth = lip_dxi * math.expm1(lip_xi) / lip_xi
    terms = [math.log(d) + math.log(growth + 1.0 + 2.0 * k ** 2) + log_c]
    if lip_dk1_xi > 0:
        terms.append(math.log(lip_dk1_xi) + (k - 1) * math.log(k + 1))
        terms.append(math.log(2.0 * k ** 2 * lip_dk1_xi) + k * math.log(k + 1))
    return float(logsumexp(terms))


def c_hat_xi(d, log_c_tilde):
    """log of d d! C~^d."""
    return math.log(d) + float(gammaln(d + 1)) + d * log_c_tilde


def uniform_gamma_bounds(d, a0, a1, a2, a3):
    """Uniform upper bounds (log Gamma_1, log Gamma_2) from field norms a_m = |D^m eta|."""
    grow = math.exp(d * a1)
    gamma1 = d * (a2 * (d * a0 + 1.0) + a1 ** 2) * grow
    gamma2 = (d * a0 + 1.0) * ((d ** 2 * a0 + 1.0) * a3 * grow + d * a1 * a2 * (3.0 * grow + 1.0)) + d * a1 ** 3 * grow
    return _log(gamma1), _log(gamma2)


def logdet_constant(d, h, log_gamma1, log_gamma2, eta_c1, eta_c2, c_theta):
    """log C(theta, d) of the discretized log-determinant bound."""
    half = 0.5 * h * d * eta_c1
    terms = [log_gamma2 - math.log(24.0),
             math.log(d / 8.0) + log_gamma1 + _log(eta_c1),
             _log(eta_c2 * d * c_theta / 4.0 * (1.0 + half)),
             _log(((1.0 + half) ** 2 + half) * c_theta * math.expm1(eta_c2))]
    return float(logsumexp(terms))


def approximation_architecture(d, k, K, log_norm_ck):
    """Width and depth of the ReQU network that realizes the spline approximant."""
    width = int(math.ceil(12 * (d + 1) * (3 * K) ** (d + 1)))
    log2_log2_norm = max(0.0, math.log2(max(log_norm_ck / math.log(2.0), 1.0)))
    depth = (6 + 2 * ((k - 1) - 2) + int(math.ceil(math.log2(d + 1)))
             + 2 * (int(math.ceil(math.log2((d + 1) * (2 * k - 1)) + log2_log2_norm)) + 1))
    return width, depth


def theta_diameter(L, W):
    return 2.0 * W ** 2 * L


def log_covering_number(q, eps):
    """log of (1 + 2 sqrt(q) / eps)^q."""
    return q * math.log1p(2.0 * math.sqrt(q) / eps)


def step_lipschitz(h, log_lambda):
    """log of h Lambda (1 + h Lambda / 2) and the sharper invertibility test h Lambda < sqrt(3) - 1."""
    log_x = math.log(h) + log_lambda
    value = log_x + float(np.logaddexp(0.0, log_x - math.log(2.0)))
    return {'log_step_lipschitz': value, 'sharp_invertible': bool(log_x < math.log(math.sqrt(3.0) - 1.0))}


def _log(x):
    return math.log(x) if x > 0 else NEG_INF


@dataclass
class BoundLedger:
    d: int
    L: int
    W: int
    R0: float
    h: Optional[float] = None
    m: Optional[int] = None
    k: int = 4
    K: int = 0
    n: Optional[int] = None
    p: Optional[float] = None
    exponent: int = 5
    log_r: List[float] = field(default_factory=list)
    log_lambda: float = 0.0
    log_lam_eta_theta: float = 0.0
    log_lam_eta_omega: float = 0.0
    log_lam_deta_theta: float = 0.0
    log_lam_deta_omega: float = 0.0
    log_lam_psi_omega: Optional[float] = None
    log_lam_psi_theta: Optional[float] = None
    log_lam_rk_theta: Optional[float] = None
    loglog_lam_rk_theta: Optional[float] = None
    log_lambda_z: float = 0.0
    loglog_lambda_z: Optional[float] = None
    log_D: float = 0.0
    log_gen_bound: Optional[float] = None
    theta_diameter: float = 0.0
    parameter_count: int = 0
    log_c_theta: Optional[float] = None
    log_c_xi: Optional[float] = None
    log_c_hat_xi: Optional[float] = None
    log_gamma1: Optional[float] = None
    log_gamma2: Optional[float] = None
    gamma_source: Optional[str] = None

    LOG_FIELDS = ('log_lambda', 'log_lam_eta_theta', 'log_lam_eta_omega', 'log_lam_deta_theta',
                  'log_lam_deta_omega', 'log_lam_psi_omega', 'log_lam_psi_theta', 'log_lam_rk_theta',
                  'log_lambda_z', 'log_D', 'log_gen_bound', 'log_c_theta', 'log_c_xi', 'log_c_hat_xi',
                  'log_gamma1', 'log_gamma2')

    def to_dict(self):
        out = {key: value for key, value in asdict(self).items() if not key.startswith('log')}
        out['log_r'] = [_log_entry(v) for v in self.log_r]
        constants = {}
        for name in self.LOG_FIELDS:
            value = getattr(self, name)
            if value is None:
                continue
            entry = _log_entry(value)
            loglog = getattr(self, 'log' + name, None)
            if loglog is not None:
                entry['loglog'] = loglog
                if not np.isfinite(value):
                    entry['decimal'] = 'exp(exp(%.6f))' % loglog
            constants[name[len('log_'):]] = entry
        out['constants'] = constants
        return out


def _log_entry(value):
    if np.isfinite(value):
        return {'log': value, 'decimal': 'exp(%.6f)' % value}
    return {'log': None, 'decimal': 'exp(%s)' % ('inf' if value > 0 else '-inf')}


def capacity_ledger(d, L, W, h=None, R0=R0_DEFAULT, k=4, K=None, n=None, p=None, exponent=5):
    """Evaluate the Lipschitz and capacity constants of Theta_{L,W} in log domain."""
    if L < 1 or W < 1:
        raise ValueError('L and W must be at least 1, got L=%r W=%r' % (L, W))
    if R0 < 1:
        raise ValueError('R0 must be at least 1, got %r' % (R0,))
    if h is not None and not 0.0 < h <= 1.0:
        raise ValueError('h must lie in (0, 1], got %r' % (h,))

    log_2w = math.log(2.0 * W)
    log_w = math.log(W)
    log_r = log_r_sequence(L, W, R0)
    log_r_last = log_r[-1]
    log_base = 2.0 * log_2w + log_r_last

    ledger = BoundLedger(d=d, L=L, W=W, R0=R0, h=h, k=k, n=n, p=p, exponent=exponent, log_r=log_r)
    ledger.m = None if h is None else int(round(1.0 / h))
    ledger.K = K_of_W(W, d) if K is None else K

    ledger.log_lambda = L * log_base
    ledger.log_lam_eta_theta = math.log(4.0 * L) + (2 * L - 1) * log_2w + (L + 1) * log_r_last
    ledger.log_lam_eta_omega = 2 * L * log_2w + sum(log_r)
    ledger.log_lam_deta_theta = math.log(L) + (L - 1) * log_base + float(logsumexp([
        math.log(8.0) + 2.0 * log_w + log_r_last,
        math.log(2.0) + 2.0 * log_w + ledger.log_lam_eta_theta,
        math.log(2.0) + log_w + float(np.logaddexp(log_r_last, 0.0)),
    ]))
    ledger.log_lam_deta_omega = math.log(L) + (L - 1) * log_base + 2.0 * log_w + ledger.log_lambda

    if h is not None:
        log_x = math.log(h) + ledger.log_lam_eta_omega
        ledger.log_lam_psi_omega = float(logsumexp([0.0, log_x, 2.0 * log_x - math.log(2.0)]))
        ledger.log_lam_psi_theta = ledger.log_lam_eta_theta + float(np.logaddexp(0.0, log_x - math.log(2.0)))
        ledger.log_lam_rk_theta = ledger.log_lam_psi_theta + _exp(ledger.log_lam_eta_omega)
        ledger.loglog_lam_rk_theta = log_of_linear_plus_exp(ledger.log_lam_eta_omega, ledger.log_lam_psi_theta)

    ledger.log_lambda_z = subgaussian_constant(d, ledger.log_lambda, exponent)
    ledger.loglog_lambda_z = subgaussian_loglog(d, ledger.log_lambda, exponent)
    ledger.log_D = log_mcdiarmid_diameter(d, ledger.log_lambda)
    ledger.theta_diameter = theta_diameter(L, W)
    ledger.parameter_count = L * (W + 1) * W
    if n is not None:
        ledger.log_gen_bound = expected_gen_bound(L, W, ledger.log_lambda_z, n)
    return ledger


@dataclass
class PacSchedule:
    n: int
    p: float
    d: int
    h_inv: int
    h: float
    W: int
    K: int
    L: int
    feasible: bool
    guard_ok: bool
    log_lambda_n: Optional[float]
    n_omega: float

    def to_dict(self):
        return asdict(self)


def pac_schedule(n, p, d, R0=R0_DEFAULT):
    """Architecture and step size prescribed for PAC learning from n samples."""
    if not 0.0 < p < 1.0:
        raise ValueError('p must lie in (0, 1), got %r' % (p,))
    if n < 3:
        raise ValueError('n must be at least 3, got %r' % (n,))
    log_n = math.log(n)
    ln_term = (1.0 - p) / (8.0 * d) * log_n
    h_inv = max(1, int(math.ceil(2.0 * ln_term)))
    W_n = max(1, int(math.ceil((p / (2.0 * d)) * log_n / (2.0 * math.sqrt(R0)))))
    K_n = K_of_W(W_n, d)
    log_omega = math.log(2.0 * math.sqrt(R0) * W_n)

    L_n = 0
    if ln_term > 1.0 and log_omega > 0.0:
        ratio = math.log(ln_term) / log_omega
        if ratio > 0.0:
            L_n = int(math.floor(math.log(ratio) / math.log(4.0)))
    feasible = L_n >= 1

    log_lambda_n = None
    guard_ok = False
    if feasible:
        log_lambda_n = L_n * 2.0 ** L_n * log_omega
        guard_ok = log_lambda_n < math.log(h_inv / 2.0)

    n_omega = (2.0 * d / p) ** ((1.0 - p) / (4.0 * d - (1.0 - p)))
    return PacSchedule(n=n, p=p, d=d, h_inv=h_inv, h=1.0 / h_inv, W=W_n, K=K_n, L=max(L_n, 0),
                       feasible=feasible, guard_ok=guard_ok, log_lambda_n=log_lambda_n, n_omega=n_omega)


@dataclass
class PacSampleSize:
    log_n: float
    n: Optional[int]
    log_terms: List[float]

    def to_dict(self):
        return {'log_n': self.log_n if np.isfinite(self.log_n) else None,
                'n': self.n,
                'decimal': _log_entry(self.log_n)['decimal'],
                'log_terms': [v if np.isfinite(v) else None for v in self.log_terms]}


def pac_sample_size(eps, delta, p, d, k, log_c_h, log_c_hat_h, n_tilde, R0=R0_DEFAULT):
    """Sample size n(eps, delta) for PAC learning, in log domain."""
    for name, value in (('eps', eps), ('delta', delta), ('p', p)):
        if not 0.0 < value <= 1.0 or (name != 'delta' and value == 1.0):
            raise ValueError('%s must lie in (0, 1), got %r' % (name, value))

    rate = min(2.0, (k - 1.0) / (d + 1.0))
    log_c1 = ((k - 1) * math.log(3.0)
              + (k - 1.0) / (d + 1.0) * math.log(192.0 * d * (d + 1) * math.sqrt(R0) / p)
              + log_c_h)
    log_c2 = math.log(0.25) + 2.0 * math.log(8.0 * d / (1.0 - p)) + log_c_hat_h
    log_c = float(np.logaddexp(log_c1, log_c2))

    log_term1 = math.log(n_tilde) if n_tilde > 0 else NEG_INF
    log_term2 = _exp((math.log(2.0) + log_c - math.log(eps)) / rate)
    log_denominator = float(np.logaddexp(2.0 * math.log(eps) - math.log(16.0) - 2.0 * d * math.log(4.0 * d),
                                         2.0 * d * math.log(2.0)))
    log_log_delta = math.log(math.log(1.0 / delta)) if delta < 1.0 else NEG_INF
    log_term3 = (log_log_delta - log_denominator) / p

    terms = [log_term1, log_term2, log_term3]
    log_n = max(terms)
    n = None
    if log_n < 700.0:
        n = int(math.ceil(math.exp(log_n))) if np.isfinite(log_n) else 0
    return PacSampleSize(log_n=log_n, n=n, log_terms=terms)


def empirical_gamma(field, samples, fine_m=128, start_times=(0.0, 0.25, 0.5)):
    """Sampled (Gamma_1, Gamma_2): sup of the first two time derivatives of Deta(Phi) DPhi.

    Trajectories start at every sample for every start time s; DPhi is the product of the
    exact RK2 step Jacobians and the time derivatives are central differences. The result
    is a lower estimate of the true sup.
    """
    import tensorflow as tf

    from models.RK2Flow import _jacobian, _step_with_jacobian

    samples = tf.convert_to_tensor(np.asarray(samples, dtype=np.float64).reshape(-1, field.d))
    gamma1 = 0.0
    gamma2 = 0.0
    for s in start_times:
        dt = (1.0 - s) / fine_m
        y = samples
        dphi = tf.broadcast_to(tf.eye(field.d, dtype=tf.float64), [samples.shape[0], field.d, field.d])
        entries = []
        for j in range(fine_m + 1):
            tau = s + j * dt
            entries.append(tf.linalg.matmul(_jacobian(field, y, tau), dphi).numpy())
            if j < fine_m:
                y, jac = _step_with_jacobian(field, tau, dt, y)
                dphi = tf.linalg.matmul(jac, dphi)
        entries = np.stack(entries)
        first = (entries[2:] - entries[:-2]) / (2.0 * dt)
        second = (entries[2:] - 2.0 * entries[1:-1] + entries[:-2]) / dt ** 2
        gamma1 = max(gamma1, float(np.max(np.abs(first))))
        gamma2 = max(gamma2, float(np.max(np.abs(second))))
    return gamma1, gamma2
