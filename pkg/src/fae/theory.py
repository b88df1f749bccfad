"""Numerical checks of the small-noise expansion of the symmetric-noise loss.

For a map ``f``, a corrupted point ``x_hat`` and its clean target ``x``::

    E ||f(x_hat + eps) - (x + eps)||^2
        = ||r||^2 + sigma^2 (||J - I||_F^2 + r^T lap f) + O(sigma^4)

with ``r = f(x_hat) - x``, ``J`` the Jacobian and ``lap f`` the
component-wise Laplacian at ``x_hat``. Any object with ``forward(X)`` on
(n, d) batches, ``jacobian(x)`` and ``laplacian(x)`` can be checked: trained
networks (``ParamVector``) and the analytic fixtures below alike.

Monte-Carlo estimates use antithetic pairs ``(+eps, -eps)``; a pair's mean
loss is one sample.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from ._validation import ContractError, as_rng
from .network import Dense, Network, NetworkConfig, ParamVector

_CHUNK = 1 << 16  # max rows * d evaluated at once


class AffineMap:
    """``f(v) = A v + b``."""

    def __init__(self, A, b):
        self.A = np.asarray(A, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.dim = len(self.b)

    def forward(self, X):
        X = np.asarray(X, dtype=np.float64)
        return X @ self.A.T + self.b

    def jacobian(self, x):
        return self.A.copy()

    def laplacian(self, x):
        return np.zeros(self.dim)


class ElementwisePolynomial:
    """``f(v)_k = sum_j coefs[j] * v_k ** j`` applied to every coordinate."""

    def __init__(self, coefs, dim):
        self.coefs = np.asarray(coefs, dtype=np.float64)
        self.dim = int(dim)
        self._p = np.polynomial.Polynomial(self.coefs)

    @classmethod
    def cubic(cls, c, dim):
        """``v + c v^3``."""
        return cls([0.0, 1.0, 0.0, c], dim)

    @classmethod
    def quartic(cls, c, dim):
        """``v + c v^4``."""
        return cls([0.0, 1.0, 0.0, 0.0, c], dim)

    def forward(self, X):
        return self._p(np.asarray(X, dtype=np.float64))

    def jacobian(self, x):
        return np.diag(self._p.deriv(1)(np.asarray(x, dtype=np.float64)))

    def laplacian(self, x):
        return self._p.deriv(2)(np.asarray(x, dtype=np.float64))


def affine_network(rng, d, scale=0.3):
    """A one-layer dense network ``d -> d`` with identity output and random weights."""
    cfg = NetworkConfig((d, 1, 1), ({"type": "dense", "units": d},
                                    {"type": "act", "fn": "identity"}))
    net = Network(cfg)
    A = np.eye(d) + scale * rng.standard_normal((d, d))
    b = scale * rng.standard_normal(d)
    return ParamVector(net, np.concatenate([A.T.ravel(), b]))


def affine_parts(params):
    """``(A, b)`` of a single dense layer network (``f(v) = A v + b``)."""
    layer = params.network.layers[0]
    if not isinstance(layer, Dense) or len(params.network.layers) > 2:
        raise ContractError("not a single dense layer network")
    (a0, a1, s), (b0, b1, _) = params.network.offsets[0]
    return params.theta[a0:a1].reshape(s).T, params.theta[b0:b1]


def _forward(model, X):
    return np.asarray(model.forward(X), dtype=np.float64)


def _chunks(n, d):
    step = max(_CHUNK // max(d, 1), 1)
    for a in range(0, n, step):
        yield a, min(a + step, n)


def _pair_losses(model, x_hat, x, Z, sigma, clean_target=False):
    """Antithetic pair means of the loss for noise ``sigma * Z``."""
    out = np.empty(len(Z))
    for a, b in _chunks(len(Z), len(x_hat)):
        E = sigma * Z[a:b]
        if clean_target:
            gp = _forward(model, x_hat + E) - x
            gm = _forward(model, x_hat - E) - x
        else:
            gp = _forward(model, x_hat + E) - (x + E)
            gm = _forward(model, x_hat - E) - (x - E)
        out[a:b] = 0.5 * (np.einsum("ij,ij->i", gp, gp) + np.einsum("ij,ij->i", gm, gm))
    return out


def _mean_stderr(v):
    v = np.asarray(v, dtype=np.float64)
    if len(v) < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v)))


def _vec(a):
    return np.asarray(a, dtype=np.float64).ravel()


def mc_fae_loss(params, x_hat, x, sigma, samples, rng=None):
    """Antithetic Monte-Carlo estimate of ``E ||f(x_hat+eps) - (x+eps)||^2``.

    ``samples`` counts antithetic pairs. Returns ``(mean, stderr)``; for
    ``sigma == 0`` the deterministic loss with zero stderr.
    """
    if samples < 2:
        raise ContractError("need at least 2 samples")
    if sigma < 0:
        raise ContractError("sigma must be non-negative")
    x_hat, x = _vec(x_hat), _vec(x)
    if sigma == 0:
        r = _forward(model=params, X=x_hat[None])[0] - x
        return float(r @ r), 0.0
    Z = as_rng(rng).standard_normal((samples, len(x_hat)))
    return _mean_stderr(_pair_losses(params, x_hat, x, Z, sigma))


@dataclass
class ExpansionReport:
    sigma: float
    mc_loss: float
    mc_stderr: float
    term_r2: float
    term_jac: float
    term_curv: float
    samples: int = 0

    @property
    def expansion_value(self):
        return self.term_r2 + self.sigma ** 2 * (self.term_jac + self.term_curv)

    @property
    def remainder(self):
        return self.mc_loss - self.expansion_value

    def row(self):
        return [self.sigma, self.mc_loss, self.mc_stderr, self.term_r2, self.term_jac,
                self.term_curv, self.expansion_value, self.remainder, self.samples]


REPORT_HEADER = ["sigma", "mc_loss", "mc_stderr", "term_r2", "term_jac", "term_curv",
                 "expansion_value", "remainder", "samples"]


def expansion_terms(params, x_hat, x):
    """``(||r||^2, ||J - I||_F^2, r^T lap f)`` at ``x_hat``."""
    x_hat, x = _vec(x_hat), _vec(x)
    r = _forward(params, x_hat[None])[0] - x
    J = np.asarray(params.jacobian(x_hat))
    lap = np.asarray(params.laplacian(x_hat))
    M = J - np.eye(len(x_hat))
    return float(r @ r), float(np.sum(M * M)), float(r @ lap)


def expansion_report(params, x_hat, x, sigma, samples, rng=None):
    """Plain antithetic estimate next to the analytic expansion terms."""
    mean, se = mc_fae_loss(params, x_hat, x, sigma, samples, rng)
    return ExpansionReport(sigma, mean, se, *expansion_terms(params, x_hat, x), samples)


def _second_directional(model, x_hat, Z, f0, tau=1e-3):
    """``D^2 f(x_hat)[z, z]`` per row of ``Z`` by a central second difference."""
    out = np.empty_like(Z)
    for a, b in _chunks(len(Z), len(x_hat)):
        z = Z[a:b]
        norm = np.linalg.norm(z, axis=1, keepdims=True)
        h = tau / np.maximum(norm, 1e-300)
        fp = _forward(model, x_hat + h * z)
        fm = _forward(model, x_hat - h * z)
        out[a:b] = (fp + fm - 2.0 * f0) / (h * h)
    return out


class _TaylorControl:
    """Per-sample second-order Taylor term ``||M z||^2 + r^T D^2 f[z, z]``.

    Its expectation over ``z ~ N(0, I)`` is ``||J - I||_F^2 + r^T lap f``, so
    subtracting ``sigma^2`` times it from each pair leaves a zero-mean
    quadratic part and isolates the higher-order remainder.
    """

    def __init__(self, model, x_hat, x):
        self.model, self.x_hat, self.x = model, x_hat, x
        self.f0 = _forward(model, x_hat[None])[0]
        self.r = self.f0 - x
        self.M = np.asarray(model.jacobian(x_hat)) - np.eye(len(x_hat))
        self.q = np.empty(0)

    def extend(self, Z):
        mz = Z @ self.M.T
        q = np.einsum("ij,ij->i", mz, mz) + _second_directional(
            self.model, self.x_hat, Z, self.f0) @ self.r
        self.q = np.concatenate([self.q, q])


def mc_remainder(params, x_hat, x, sigma, Z, control=None):
    """Remainder ``L(sigma) - ||r||^2 - sigma^2 E[q]`` with its stderr.

    Uses the Taylor control variate on the noise draws ``Z`` (rows are
    standard normal vectors shared across sigma values).
    """
    x_hat, x = _vec(x_hat), _vec(x)
    if control is None:
        control = _TaylorControl(params, x_hat, x)
        control.extend(Z)
    pairs = _pair_losses(params, x_hat, x, Z, sigma)
    r2 = float(control.r @ control.r)
    return _mean_stderr(pairs - r2 - sigma ** 2 * control.q[:len(Z)])


@dataclass
class SlopeFit:
    sigmas: list
    remainders: list
    stderrs: list
    slope: float
    intercept: float
    r_squared: float
    status: str  # "ok", "exact" or "inconclusive"
    samples: int
    reports: list = field(default_factory=list)

    @property
    def log_remainders(self):
        return [float(np.log(abs(r))) if r != 0 else float("-inf") for r in self.remainders]


def fit_loglog(sigmas, values):
    """Least-squares line through ``(log sigma, log |value|)``."""
    lx = np.log(np.asarray(sigmas, dtype=np.float64))
    ly = np.log(np.abs(np.asarray(values, dtype=np.float64)))
    A = np.vstack([lx, np.ones_like(lx)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, ly, rcond=None)
    pred = A @ np.array([slope, intercept])
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def remainder_slope(params, x_hat, x, sigmas, samples=100_000, rng=None,
                    max_samples=1_600_000, rel_precision=0.2):
    """Fit the log-log slope of the expansion remainder against sigma.

    The same noise draws are used for every sigma. Samples double until each
    remainder's stderr is below ``rel_precision * |remainder|`` or
    ``max_samples`` is reached. If every remainder is indistinguishable from
    zero the expansion is exact (affine maps) and ``status == "exact"``;
    if precision is not reached otherwise, ``status == "inconclusive"``.
    """
    sigmas = [float(s) for s in sigmas]
    if len(sigmas) < 3:
        raise ContractError("need at least 3 sigma values")
    if any(b >= a for a, b in zip(sigmas, sigmas[1:])) or sigmas[-1] <= 0:
        raise ContractError("sigmas must be positive and strictly decreasing")
    rng = as_rng(rng)
    x_hat, x = _vec(x_hat), _vec(x)
    d = len(x_hat)
    control = _TaylorControl(params, x_hat, x)
    Z = rng.standard_normal((samples, d))
    control.extend(Z)
    terms = expansion_terms(params, x_hat, x)
    while True:
        est = [mc_remainder(params, x_hat, x, s, Z, control) for s in sigmas]
        rem = [e[0] for e in est]
        se = [e[1] for e in est]
        scale = max(1.0, terms[0])
        exact = all(abs(m) <= max(3.0 * s, 1e-9 * scale * sig ** 2)
                    for m, s, sig in zip(rem, se, sigmas))
        precise = all(s < rel_precision * abs(m) for m, s in zip(rem, se))
        if exact or precise or len(Z) >= max_samples:
            break
        extra = rng.standard_normal((min(len(Z), max_samples - len(Z)), d))
        control.extend(extra)
        Z = np.vstack([Z, extra])
    reports = []
    for s, m, e in zip(sigmas, rem, se):
        exp_val = terms[0] + s * s * (terms[1] + terms[2])
        reports.append(ExpansionReport(s, exp_val + m, e, *terms, len(Z)))
    if exact:
        return SlopeFit(sigmas, rem, se, float("nan"), float("nan"), float("nan"),
                        "exact", len(Z), reports)
    slope, intercept, r2 = fit_loglog(sigmas, rem)
    status = "ok" if precise else "inconclusive"
    return SlopeFit(sigmas, rem, se, slope, intercept, r2, status, len(Z), reports)


@dataclass
class BishopReport:
    sigma: float
    mc_loss: float
    mc_stderr: float
    residual_sq: float
    jacobian_sq: float       # ||J||_F^2, pulls J toward zero
    anchored_sq: float       # ||J - I||_F^2, pulls J toward the identity
    curvature: float

    @property
    def prediction(self):
        return self.residual_sq + self.sigma ** 2 * (self.jacobian_sq + self.curvature)

    @property
    def agrees(self):
        return abs(self.mc_loss - self.prediction) <= 3.0 * self.mc_stderr + 1e-12

    @property
    def anchored_smaller(self):
        return self.anchored_sq <= self.jacobian_sq


def bishop_terms(params, x, y, sigma, samples, rng=None):
    """Noisy input, clean target: ``E ||f(x + eps) - y||^2`` versus
    ``||f(x) - y||^2 + sigma^2 (||J||_F^2 + r^T lap f)``."""
    x, y = _vec(x), _vec(y)
    if samples < 2:
        raise ContractError("need at least 2 samples")
    r = _forward(params, x[None])[0] - y
    J = np.asarray(params.jacobian(x))
    lap = np.asarray(params.laplacian(x))
    if sigma == 0:
        mean, se = float(r @ r), 0.0
    else:
        Z = as_rng(rng).standard_normal((samples, len(x)))
        mean, se = _mean_stderr(_pair_losses(params, x, y, Z, sigma, clean_target=True))
    M = J - np.eye(len(x))
    return BishopReport(sigma, mean, se, float(r @ r), float(np.sum(J * J)),
                        float(np.sum(M * M)), float(r @ lap))


@dataclass
class OddMomentReport:
    sigma: float
    mean: float
    stderr: float
    antithetic_max_abs: float

    @property
    def passed(self):
        return abs(self.mean) <= 3.0 * self.stderr or self.mean == 0.0


def odd_moment_check(params, x_hat, sigma, samples, rng=None):
    """Estimate ``E[eps^T (J - I)^T D^2 f[eps, eps]]``, which vanishes by symmetry.

    Reports the plain Monte-Carlo mean with its stderr and the largest
    absolute antithetic pair sum (zero by construction).
    """
    x_hat = _vec(x_hat)
    Z = as_rng(rng).standard_normal((samples, len(x_hat)))
    f0 = _forward(params, x_hat[None])[0]
    M = np.asarray(params.jacobian(x_hat)) - np.eye(len(x_hat))
    A = sigma ** 2 * _second_directional(params, x_hat, Z, f0)
    A_neg = sigma ** 2 * _second_directional(params, x_hat, -Z, f0)
    phi = np.einsum("ij,ij->i", (sigma * Z) @ M.T, A)
    phi_neg = np.einsum("ij,ij->i", (-sigma * Z) @ M.T, A_neg)
    mean, se = _mean_stderr(phi)
    return OddMomentReport(sigma, mean, se, float(np.max(np.abs(phi + phi_neg))))


@dataclass
class MomentReport:
    d: int
    sigma: float
    mean: float
    stderr: float

    @property
    def expected(self):
        return (self.d ** 2 + 2 * self.d) * self.sigma ** 4

    @property
    def passed(self):
        return abs(self.mean - self.expected) <= 3.0 * self.stderr


def gaussian_moment_check(d, sigma, samples, rng=None):
    """Monte-Carlo ``E ||eps||^4`` for ``eps ~ N(0, sigma^2 I_d)``."""
    if samples < 10_000:
        raise ContractError("need at least 1e4 samples")
    if sigma == 0:
        return MomentReport(d, 0.0, 0.0, 0.0)
    rng = as_rng(rng)
    vals = np.empty(samples)
    for a, b in _chunks(samples, d):
        e = sigma * rng.standard_normal((b - a, d))
        vals[a:b] = np.einsum("ij,ij->i", e, e) ** 2
    return MomentReport(d, sigma, *_mean_stderr(vals))


@dataclass
class IdempotencyReport:
    gap: float            # ||f(f(x_hat)) - f(x_hat)||
    bias: float           # ||f(x) - x||
    distance_sq: float    # ||f(x_hat) - x||^2
    jacobian_term: float  # ||(J(x) - I)(f(x_hat) - x)||
    lipschitz: float      # probed Lipschitz constant of J along the segment

    @property
    def bound(self):
        return self.bias + self.jacobian_term + self.lipschitz * self.distance_sq

    @property
    def holds(self):
        if not np.isfinite(self.bound):
            return None
        return self.gap <= self.bound * (1 + 1e-9) + 1e-12


def idempotency_gap(params, x_hat, x, probes=(0.25, 0.5, 0.75, 1.0), with_bound=True):
    """Idempotency gap with its first-order decomposition.

    Expanding ``f`` at ``x`` gives ``f(f(x_hat)) - f(x_hat) = (f(x) - x)
    + (J(x) - I) u + R`` with ``u = f(x_hat) - x`` and ``||R|| <= L ||u||^2``.
    ``L`` is estimated from Jacobian differences at ``probes`` along ``u``.
    """
    x_hat, x = _vec(x_hat), _vec(x)
    fx_hat = _forward(params, x_hat[None])[0]
    ffx_hat = _forward(params, fx_hat[None])[0]
    fx = _forward(params, x[None])[0]
    u = fx_hat - x
    gap = float(np.linalg.norm(ffx_hat - fx_hat))
    bias = float(np.linalg.norm(fx - x))
    dist_sq = float(u @ u)
    jac_term = lip = float("nan")
    if with_bound:
        J0 = np.asarray(params.jacobian(x))
        jac_term = float(np.linalg.norm((J0 - np.eye(len(x))) @ u))
        un = np.sqrt(dist_sq)
        lip = 0.0
        if un > 0:
            for t in probes:
                Jt = np.asarray(params.jacobian(x + t * u))
                lip = max(lip, float(np.linalg.norm(Jt - J0, 2)) / (t * un))
    return IdempotencyReport(gap, bias, dist_sq, jac_term, lip)


def rcae_penalty(params, x):
    """``(||f(x) - x||^2, ||J(x)||_F^2)``: the two terms of the contractive loss."""
    x = _vec(x)
    r = _forward(params, x[None])[0] - x
    J = np.asarray(params.jacobian(x))
    return float(r @ r), float(np.sum(J * J))


def write_reports_csv(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for rep in reports:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in rep.row()])
