"""
Single-level trust-region machinery.

Subproblem solvers (Cauchy point, L-SR1 solved with the orthonormal basis method),
the limited-memory SR1 secant store in compact form, and the radius control used at
every level of the multilevel driver.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
import scipy.linalg

from .exceptions import ConfigurationError, PropagationDiverged

logger = logging.getLogger(__name__)

CAUCHY_POINT = 'CP'
LSR1 = 'LSR1'
MODES = (CAUCHY_POINT, LSR1)

SR1_SKIP_TOLERANCE = 1e-8
GAMMA_MIN = 1e-6
GAMMA_MAX = 1e6
GAMMA_SCALE = 0.9
CONDITION_LIMIT = 1e12
MODEL_DECREASE_GUARD = 1e-15
BOUNDARY_TOLERANCE = 1e-12
NEWTON_MAX_ITERATIONS = 100


@dataclass(frozen=True)
class TrustRegionState:
    delta: float = 1.0
    delta_max: float = 100.0
    eta1: float = 0.1
    eta2: float = 0.75
    gamma1: float = 0.5
    gamma2: float = 2.0

    def __post_init__(self):
        errors = {}
        if not 0 < self.eta1 <= self.eta2 < 1:
            errors['eta'] = ['Require 0 < eta1 <= eta2 < 1.']
        if not 0 < self.gamma1 < 1 < self.gamma2:
            errors['gamma'] = ['Require 0 < gamma1 < 1 < gamma2.']
        if not 0 < self.delta <= self.delta_max:
            errors['delta'] = ['Require 0 < delta <= delta_max.']
        if errors:
            raise ConfigurationError(errors)

    def accepts(self, rho):
        return rho > self.eta1

    def with_delta(self, delta):
        return replace(self, delta=delta)


def conv_control(rho, theta, s, state):
    """
    Accept theta + s iff rho > eta1, then update the radius:
    gamma1*delta below eta1, unchanged on [eta1, eta2], gamma2*delta above eta2 (capped).
    """
    theta_next = theta + s if state.accepts(rho) else theta
    if rho < state.eta1:
        delta = state.gamma1 * state.delta
    elif rho > state.eta2:
        delta = min(state.gamma2 * state.delta, state.delta_max)
    else:
        delta = state.delta
    return theta_next, state.with_delta(delta)


def cauchy_point(g, B, delta):
    """
    Minimizer of the quadratic model along -g inside the ball of radius delta.

    Args:
        g: model gradient
        B: callable v -> B v, or None for the identity
        delta: trust-region radius
    """
    g = np.asarray(g, dtype=np.float64)
    g_norm = np.linalg.norm(g)
    if g_norm == 0.0:
        return np.zeros_like(g)
    curvature = g @ (g if B is None else B(g))
    t_boundary = delta / g_norm
    if curvature <= 0.0:
        t = t_boundary
    else:
        t = min(g_norm ** 2 / curvature, t_boundary)
    return -t * g


class SecantMemory:
    """
    Bounded store of secant pairs (s, z) with the compact L-SR1 representation

        B = gamma I + Psi M Psi^T,  Psi = Z - gamma S,  M = (D + L + L^T - gamma S^T S)^-1

    where D and L are the diagonal and strictly lower part of S^T Z.
    """

    def __init__(self, capacity=1, gamma_min=GAMMA_MIN, gamma_max=GAMMA_MAX, skip_tolerance=SR1_SKIP_TOLERANCE):
        if capacity < 1:
            raise ConfigurationError({'memory': ['Secant memory capacity must be at least 1.']})
        self.capacity = int(capacity)
        self.gamma_min = gamma_min
        self.gamma_max = gamma_max
        self.skip_tolerance = skip_tolerance
        self._s = []
        self._z = []
        self.gamma = 1.0
        self._psi = None
        self._middle = None

    def __len__(self):
        return len(self._s)

    @property
    def S(self):
        return np.column_stack(self._s) if self._s else None

    @property
    def Z(self):
        return np.column_stack(self._z) if self._z else None

    def pairs(self):
        return list(zip(self._s, self._z))

    def factors(self):
        """(Psi, M) of the compact form, or (None, None) for B = gamma I."""
        return self._psi, self._middle

    def apply(self, v):
        v = np.asarray(v, dtype=np.float64)
        out = self.gamma * v
        if self._psi is not None:
            out = out + self._psi @ (self._middle @ (self._psi.T @ v))
        return out

    def dense(self, n):
        """Explicit n x n matrix; small problems and tests only."""
        return np.column_stack([self.apply(e) for e in np.eye(n)])

    def fallback_gamma(self):
        """
        z^T z / s^T z of the newest pair with positive curvature, clamped to the gamma range.
        Keeps the current gamma when every stored pair has s^T z <= 0.
        """
        for s, z in zip(reversed(self._s), reversed(self._z)):
            sz = s @ z
            if sz > 0.0:
                return float(np.clip(z @ z / sz, self.gamma_min, self.gamma_max))
        return self.gamma

    def init_gamma(self):
        """
        gamma = 0.9 * smallest eigenvalue of the pencil (sym(S^T Z), S^T S), clamped to
        [gamma_min, gamma_max]; this keeps D + L + L^T - gamma S^T S positive definite
        whenever the pencil is. Degenerate or indefinite pencils use ``fallback_gamma``.
        """
        if not self._s:
            return 1.0
        S, Z = self.S, self.Z
        gram = S.T @ S
        cross = S.T @ Z
        if np.linalg.cond(gram) > CONDITION_LIMIT:
            logger.warning(f"Secant directions nearly dependent ({len(self)} pairs); using fallback gamma")
            return self.fallback_gamma()
        try:
            eigenvalues = scipy.linalg.eigh(0.5 * (cross + cross.T), gram, eigvals_only=True)
        except (np.linalg.LinAlgError, ValueError):
            logger.warning('Generalized eigenproblem for gamma failed; using fallback gamma')
            return self.fallback_gamma()
        smallest = eigenvalues[0]
        if not smallest > 0.0:
            logger.debug(f"Pencil has non-positive eigenvalue {smallest:.3e}; using fallback gamma")
            return self.fallback_gamma()
        return float(np.clip(GAMMA_SCALE * smallest, self.gamma_min, self.gamma_max))

    def _refresh(self):
        """Recompute gamma and the compact factors; False when the middle matrix is ill-conditioned."""
        self.gamma = self.init_gamma()
        if not self._s:
            self._psi = self._middle = None
            return True
        S, Z = self.S, self.Z
        cross = S.T @ Z
        lower = np.tril(cross, -1)
        inverse_middle = np.diag(np.diag(cross)) + lower + lower.T - self.gamma * (S.T @ S)
        if np.linalg.cond(inverse_middle) > CONDITION_LIMIT:
            return False
        self._psi = Z - self.gamma * S
        self._middle = scipy.linalg.inv(inverse_middle)
        return True

    def push(self, s, z):
        """
        Append (s, z) if it passes the SR1 safeguard |s^T (z - B s)| >= r ||s|| ||z - B s||.

        Evicts the oldest pair beyond capacity. Returns True when the pair was stored.
        """
        s = np.array(s, dtype=np.float64)
        z = np.array(z, dtype=np.float64)
        s_norm = np.linalg.norm(s)
        if s_norm == 0.0:
            return False
        residual = z - self.apply(s)
        denominator = abs(s @ residual)
        if denominator == 0.0 or denominator < self.skip_tolerance * s_norm * np.linalg.norm(residual):
            logger.debug(f"SR1 safeguard skipped pair (|s^T r| = {denominator:.3e})")
            return False
        saved = (list(self._s), list(self._z), self.gamma, self._psi, self._middle)
        self._s.append(s)
        self._z.append(z)
        while len(self._s) > self.capacity:
            self._s.pop(0)
            self._z.pop(0)
        if not self._refresh():
            self._s, self._z, self.gamma, self._psi, self._middle = saved
            logger.debug('Compact middle matrix ill-conditioned after append; pair reverted')
            return False
        return True

    def clear(self):
        self._s.clear()
        self._z.clear()
        self.gamma = 1.0
        self._psi = self._middle = None

    def resize(self, capacity):
        if capacity < 1:
            raise ConfigurationError({'memory': ['Secant memory capacity must be at least 1.']})
        self.capacity = int(capacity)
        if len(self._s) > self.capacity:
            self._s = self._s[-self.capacity:]
            self._z = self._z[-self.capacity:]
            if not self._refresh():
                self.clear()

    def __repr__(self):
        return f"SecantMemory(pairs={len(self)}/{self.capacity}, gamma={self.gamma:.4g})"


def lsr1_update(mem, s, z):
    """Returns (mem, stored); a skipped pair leaves the memory unchanged."""
    return mem, mem.push(s, z)


def init_gamma(mem):
    return mem.init_gamma()


class SubproblemSolution(NamedTuple):
    step: np.ndarray
    sigma: float
    on_boundary: bool
    hard_case: bool = False


def _secular_coefficients(a, lam, sigma):
    shifted = lam + sigma
    with np.errstate(divide='ignore', invalid='ignore'):
        c = np.where(a == 0.0, 0.0, -a / shifted)
    return c


def _orthogonal_complement_direction(P, n):
    """Unit vector orthogonal to the orthonormal columns of P."""
    leverage = np.einsum('ij,ij->i', P, P)
    e = np.zeros(n)
    e[int(np.argmin(leverage))] = 1.0
    v = e - P @ (P.T @ e)
    return v / np.linalg.norm(v)


def obs_solve(g, mem, delta):
    """
    Exact minimizer of g^T s + 1/2 s^T B s over ||s|| <= delta for the L-SR1 matrix in ``mem``.

    The compact form is diagonalized through an economic QR of Psi and an eigen
    decomposition of R M R^T, giving B = P diag(gamma + Lambda, gamma) P^T. The
    multiplier sigma solves the secular equation 1/||s(sigma)|| = 1/delta by Newton's
    method from a lower bound; the hard case adds a multiple of the leftmost eigenvector.
    """
    g = np.asarray(g, dtype=np.float64)
    n = g.size
    gamma = mem.gamma
    psi, middle = mem.factors()
    if psi is None:
        P = np.zeros((n, 0))
        lam_parallel = np.zeros(0)
    else:
        Q, R = scipy.linalg.qr(psi, mode='economic')
        Lambda, U = scipy.linalg.eigh(R @ middle @ R.T)
        P = Q @ U
        lam_parallel = gamma + Lambda
    g_parallel = P.T @ g
    g_perp = g - P @ g_parallel
    has_perp = P.shape[1] < n
    g_perp_norm = np.linalg.norm(g_perp) if has_perp else 0.0

    a = np.append(g_parallel, g_perp_norm) if has_perp else g_parallel
    lam = np.append(lam_parallel, gamma) if has_perp else lam_parallel

    def assemble(c, sigma, include_perp=True):
        step = P @ c[:P.shape[1]]
        if include_perp and has_perp and g_perp_norm > 0.0:
            step = step - g_perp / (gamma + sigma)
        return step

    lam_min = float(lam.min())
    scale = max(1.0, float(np.abs(lam).max()))
    a_tol = 1e-10 * max(1.0, float(np.linalg.norm(g)))
    leftmost = lam - lam_min <= 1e-10 * scale

    if lam_min > 1e-10 * scale:
        c = _secular_coefficients(a, lam, 0.0)
        if np.linalg.norm(c) <= delta:
            return SubproblemSolution(assemble(c, 0.0), 0.0, False)

    sigma_floor = max(0.0, -lam_min)
    if lam_min <= 1e-10 * scale and np.all(np.abs(a[leftmost]) <= a_tol):
        masked = np.where(leftmost, 0.0, a)
        c = _secular_coefficients(masked, np.where(leftmost, 1.0, lam), sigma_floor)
        c_norm = np.linalg.norm(c)
        if c_norm <= delta:
            if lam_min >= -1e-10 * scale:
                return SubproblemSolution(assemble(c, 0.0), 0.0, False)
            index = int(np.flatnonzero(leftmost)[0])
            if index < P.shape[1]:
                u = P[:, index]
            else:
                u = _orthogonal_complement_direction(P, n)
            alpha = np.sqrt(max(delta ** 2 - c_norm ** 2, 0.0))
            step = assemble(c, sigma_floor, include_perp=not (has_perp and leftmost[-1])) + alpha * u
            logger.debug(f"OBS hard case: sigma={sigma_floor:.3e}, alpha={alpha:.3e}")
            return SubproblemSolution(step, sigma_floor, True, True)
        a = masked

    with np.errstate(divide='ignore', invalid='ignore'):
        bounds = np.where(a == 0.0, -np.inf, np.abs(a) / delta - lam)
    sigma = max(sigma_floor, float(bounds.max()))
    for _ in range(NEWTON_MAX_ITERATIONS):
        c = _secular_coefficients(a, lam, sigma)
        c_norm = np.linalg.norm(c)
        if abs(c_norm - delta) <= BOUNDARY_TOLERANCE * delta:
            break
        with np.errstate(divide='ignore', invalid='ignore'):
            cubic = np.where(a == 0.0, 0.0, a ** 2 / (lam + sigma) ** 3)
        phi = 1.0 / c_norm - 1.0 / delta
        phi_prime = cubic.sum() / c_norm ** 3
        if phi_prime <= 0.0:
            break
        sigma_next = sigma - phi / phi_prime
        if sigma_next <= sigma:
            break
        sigma = sigma_next
    c = _secular_coefficients(a, lam, sigma)
    step = assemble(c, sigma)
    step_norm = np.linalg.norm(step)
    if step_norm > delta:
        step *= delta / step_norm
    return SubproblemSolution(step, sigma, True)


def model_decrease(g, s, Bs):
    """m(0) - m(s) for m(s) = g^T s + 1/2 s^T B s."""
    return -(g @ s + 0.5 * (s @ Bs))


class GradientDifferencePairs:
    """
    Secant pairs from gradient differences of one objective after every accepted step.

    Bound to the objective being minimized this reuses cached gradients, so it costs
    no extra evaluations; bound to an overlap objective it realizes overlap pairs.
    """

    def __init__(self, objective=None):
        self.objective = objective

    def prepare(self, objective, theta, memory):
        pass

    def after_accept(self, objective, theta_old, theta_new, memory):
        source = self.objective or objective
        s = theta_new - theta_old
        if not np.any(s):
            return False
        z = source.gradient(theta_new) - source.gradient(theta_old)
        return memory.push(s, z)


class IterateResult(NamedTuple):
    theta: np.ndarray
    state: TrustRegionState
    memory: SecantMemory
    reduction: float
    grad_calls: int


def _gradient_count(objective):
    counts = getattr(objective, 'counts', None)
    return counts.gradients if counts is not None else 0


def tr_iterate(objective, theta, state, memory=None, mu=1, mode=LSR1, pairs=None):
    """
    Run ``mu`` trust-region iterations on ``objective``.

    Args:
        objective: object exposing value(theta), gradient(theta) and, for sampled pairs, hvp(theta, v)
        theta: starting iterate (flat array)
        state: TrustRegionState
        memory: SecantMemory used in LSR1 mode; a fresh one-pair memory when omitted
        mu: iteration count, >= 0
        mode: 'CP' (Cauchy point, B = I) or 'LSR1' (OBS solve)
        pairs: secant pair source with prepare/after_accept hooks

    Returns:
        IterateResult(theta, state, memory, reduction, grad_calls); ``reduction`` is the
        summed actual decrease over accepted steps.
    """
    if mu < 0:
        raise ValueError(f"Iteration count must be non-negative, got {mu}")
    if mode not in MODES:
        raise ConfigurationError({'hessian': [f"Unknown trust-region mode '{mode}'."]})
    if memory is None:
        memory = SecantMemory()
    if pairs is None:
        pairs = GradientDifferencePairs()
    theta = np.array(theta, dtype=np.float64)
    calls_before = _gradient_count(objective)
    reduction = 0.0

    for iteration in range(mu):
        value = objective.value(theta)
        g = objective.gradient(theta)
        if mode == CAUCHY_POINT:
            s = cauchy_point(g, None, state.delta)
            Bs = s
        else:
            pairs.prepare(objective, theta, memory)
            s = obs_solve(g, memory, state.delta).step
            Bs = memory.apply(s)
        predicted = model_decrease(g, s, Bs)
        trial_value = np.nan
        if predicted <= MODEL_DECREASE_GUARD * (1.0 + abs(value)):
            rho = -np.inf
        else:
            try:
                trial_value = objective.value(theta + s)
            except PropagationDiverged as exc:
                logger.debug(f"Trial point diverged ({exc}); rejecting step")
            rho = (value - trial_value) / predicted if np.isfinite(trial_value) else -np.inf
        theta_next, next_state = conv_control(rho, theta, s, state)
        logger.debug(
            f"TR iteration {iteration}: rho={rho:.4g}, |s|={np.linalg.norm(s):.3e}, "
            f"delta {state.delta:.3e} -> {next_state.delta:.3e}"
        )
        if state.accepts(rho):
            reduction += value - trial_value
            if mode == LSR1:
                pairs.after_accept(objective, theta, theta_next, memory)
        theta, state = theta_next, next_state

    return IterateResult(theta, state, memory, reduction, _gradient_count(objective) - calls_before)
