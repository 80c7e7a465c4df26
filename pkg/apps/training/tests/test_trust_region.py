import numpy as np
from django.test import SimpleTestCase

from apps.training.exceptions import ConfigurationError, PropagationDiverged
from apps.training.trust_region import (
    CAUCHY_POINT,
    GAMMA_MIN,
    LSR1,
    GradientDifferencePairs,
    SecantMemory,
    TrustRegionState,
    cauchy_point,
    conv_control,
    lsr1_update,
    model_decrease,
    obs_solve,
    tr_iterate,
)


class Quadratic:
    """f(x) = 1/2 x^T A x - b^T x"""

    def __init__(self, A, b):
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)

    def value(self, x):
        return 0.5 * x @ self.A @ x - self.b @ x

    def gradient(self, x):
        return self.A @ x - self.b

    def hvp(self, x, v):
        return self.A @ v


class DivergesBeyond(Quadratic):
    def __init__(self, A, b, limit):
        super().__init__(A, b)
        self.limit = limit

    def value(self, x):
        if np.abs(x).max() > self.limit:
            raise PropagationDiverged(0)
        return super().value(x)


def exact_tr_solution(B, g, delta):
    """Dense reference: eigendecomposition and bisection on the multiplier."""
    lam, V = np.linalg.eigh(B)
    a = V.T @ g
    if lam.min() > 0:
        s = -V @ (a / lam)
        if np.linalg.norm(s) <= delta:
            return s

    def norm(sigma):
        return np.linalg.norm(a / (lam + sigma))

    lo = max(0.0, -lam.min())
    if norm(lo + 1e-14) < delta:
        # hard case: fill the leftmost eigendirection up to the boundary
        shifted = lam + lo
        c = np.where(np.abs(shifted) < 1e-12, 0.0, -a / np.where(shifted == 0, 1.0, shifted))
        tau = np.sqrt(max(delta ** 2 - c @ c, 0.0))
        return V @ c + tau * V[:, 0]
    hi = lo + 1.0
    while norm(hi) > delta:
        hi *= 2.0
    lo += 1e-14
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        if norm(mid) > delta:
            lo = mid
        else:
            hi = mid
    return -V @ (a / (lam + hi))


def model_value(g, B, s):
    return g @ s + 0.5 * s @ B @ s


class ConvControlTests(SimpleTestCase):
    def setUp(self):
        self.state = TrustRegionState(delta=1.0, delta_max=3.0)
        self.theta = np.zeros(2)
        self.s = np.ones(2)

    def test_rejects_below_eta1(self):
        theta, state = conv_control(0.05, self.theta, self.s, self.state)
        np.testing.assert_array_equal(theta, self.theta)
        self.assertEqual(state.delta, 0.5)

    def test_keeps_radius_between_thresholds(self):
        theta, state = conv_control(0.5, self.theta, self.s, self.state)
        np.testing.assert_array_equal(theta, self.s)
        self.assertEqual(state.delta, 1.0)

    def test_expands_and_caps(self):
        _, state = conv_control(0.9, self.theta, self.s, self.state)
        self.assertEqual(state.delta, 2.0)
        _, state = conv_control(0.9, self.theta, self.s, state)
        self.assertEqual(state.delta, 3.0)

    def test_invalid_constants(self):
        with self.assertRaises(ConfigurationError):
            TrustRegionState(eta1=0.8, eta2=0.5)
        with self.assertRaises(ConfigurationError):
            TrustRegionState(delta=5.0, delta_max=1.0)


class CauchyPointTests(SimpleTestCase):
    def test_interior_minimizer_with_identity(self):
        np.testing.assert_allclose(cauchy_point(np.array([3.0, 4.0]), None, 10.0), [-3.0, -4.0])

    def test_boundary(self):
        np.testing.assert_allclose(cauchy_point(np.array([3.0, 4.0]), None, 1.0), [-0.6, -0.8])

    def test_negative_curvature_goes_to_boundary(self):
        s = cauchy_point(np.array([1.0, 0.0]), lambda v: -v, 2.0)
        np.testing.assert_allclose(s, [-2.0, 0.0])

    def test_zero_gradient(self):
        np.testing.assert_array_equal(cauchy_point(np.zeros(3), None, 1.0), np.zeros(3))


class SecantMemoryTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(6, 6))
        self.A = X @ X.T + np.eye(6)
        self.rng = rng

    def test_secant_conditions_hold(self):
        memory = SecantMemory(capacity=3)
        S = self.rng.normal(size=(6, 3))
        for j in range(3):
            self.assertTrue(memory.push(S[:, j], self.A @ S[:, j]))
        B = memory.dense(6)
        np.testing.assert_allclose(B @ S, self.A @ S, atol=1e-8)
        np.testing.assert_allclose(B, B.T, atol=1e-10)

    def test_gamma_below_pencil_minimum(self):
        memory = SecantMemory(capacity=2)
        for _ in range(2):
            s = self.rng.normal(size=6)
            memory.push(s, self.A @ s)
        S = memory.S
        pencil = np.linalg.eigvals(np.linalg.solve(S.T @ S, 0.5 * (S.T @ memory.Z + memory.Z.T @ S)))
        self.assertAlmostEqual(memory.gamma, 0.9 * float(np.min(pencil.real)), places=8)

    def test_negative_curvature_pair_keeps_current_gamma(self):
        memory = SecantMemory()
        s = np.array([1.0, 0.0])
        stored = memory.push(s, np.array([-2.0, 0.5]))
        self.assertTrue(stored)
        self.assertEqual(memory.gamma, 1.0)

    def test_indefinite_pencil_falls_back_to_newest_positive_pair(self):
        memory = SecantMemory(capacity=2)
        self.assertTrue(memory.push(np.array([1.0, 0.0]), np.array([2.0, 1.0])))
        self.assertTrue(memory.push(np.array([0.0, 1.0]), np.array([1.0, -1.0])))
        # z^T z / s^T z of the first pair; the second has s^T z = -1
        self.assertAlmostEqual(memory.gamma, 2.5, places=12)
        self.assertGreater(memory.gamma, GAMMA_MIN)

    def test_three_pairs_recover_a_three_by_three_quadratic(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(3, 3))
        A = X @ X.T + np.eye(3)
        memory = SecantMemory(capacity=3)
        for s in rng.normal(size=(3, 3)):
            self.assertTrue(memory.push(s, A @ s))
        self.assertEqual(len(memory), 3)
        B = memory.dense(3)
        for i, e in enumerate(np.eye(3)):
            self.assertLess(np.linalg.norm(B @ e - A @ e), 1e-8, i)

    def test_sr1_safeguard_skips_satisfied_pair(self):
        memory = SecantMemory()
        s = np.array([1.0, 2.0])
        mem, stored = lsr1_update(memory, s, s.copy())
        self.assertIs(mem, memory)
        self.assertFalse(stored)
        self.assertEqual(len(memory), 0)

    def test_capacity_evicts_oldest(self):
        memory = SecantMemory(capacity=2)
        S = self.rng.normal(size=(6, 3))
        for j in range(3):
            memory.push(S[:, j], self.A @ S[:, j])
        self.assertEqual(len(memory), 2)
        np.testing.assert_array_equal(memory.S, S[:, 1:])

    def test_resize_and_clear(self):
        memory = SecantMemory(capacity=3)
        for j in range(3):
            s = self.rng.normal(size=6)
            memory.push(s, self.A @ s)
        memory.resize(1)
        self.assertEqual(len(memory), 1)
        memory.clear()
        self.assertEqual(len(memory), 0)
        self.assertEqual(memory.gamma, 1.0)
        with self.assertRaises(ConfigurationError):
            memory.resize(0)


class ObsSolveTests(SimpleTestCase):
    def test_matches_dense_exact_solver(self):
        rng = np.random.default_rng(42)
        checked = 0
        for trial in range(100):
            n = 5
            X = rng.normal(size=(n, n))
            A = 0.5 * (X + X.T)
            memory = SecantMemory(capacity=int(rng.integers(1, 4)))
            for _ in range(memory.capacity):
                s = rng.normal(size=n)
                memory.push(s, A @ s)
            g = rng.normal(size=n)
            delta = float(rng.uniform(0.1, 3.0))
            B = memory.dense(n)
            solution = obs_solve(g, memory, delta)
            reference = exact_tr_solution(B, g, delta)
            self.assertLessEqual(np.linalg.norm(solution.step), delta * (1 + 1e-10))
            self.assertLess(
                model_value(g, B, solution.step) - model_value(g, B, reference), 1e-6, f"trial {trial}"
            )
            if not solution.hard_case:
                residual = (B + solution.sigma * np.eye(n)) @ solution.step + g
                scale = 1 + np.linalg.norm(g) + np.linalg.norm(B, 2) * np.linalg.norm(solution.step)
                self.assertLess(np.linalg.norm(residual), 1e-8 * scale, f"trial {trial}")
                self.assertGreaterEqual(solution.sigma, 0.0)
            checked += 1
        self.assertEqual(checked, 100)

    def test_interior_newton_step(self):
        memory = SecantMemory(capacity=2)
        A = np.diag([2.0, 3.0, 4.0])
        for s in (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])):
            memory.push(s, A @ s)
        g = np.array([0.2, 0.3, 0.0])
        solution = obs_solve(g, memory, 10.0)
        self.assertFalse(solution.on_boundary)
        self.assertEqual(solution.sigma, 0.0)
        np.testing.assert_allclose(memory.apply(solution.step), -g, atol=1e-10)

    def test_empty_memory_is_scaled_steepest_descent(self):
        g = np.array([3.0, 4.0])
        np.testing.assert_allclose(obs_solve(g, SecantMemory(), 1.0).step, [-0.6, -0.8], atol=1e-10)
        np.testing.assert_allclose(obs_solve(g, SecantMemory(), 10.0).step, [-3.0, -4.0], atol=1e-10)


class TrIterateTests(SimpleTestCase):
    def setUp(self):
        self.objective = Quadratic(np.diag([1.0, 10.0]), np.array([1.0, 1.0]))
        self.theta0 = np.array([3.0, -2.0])

    def test_monotone_decrease(self):
        for mode in (CAUCHY_POINT, LSR1):
            theta, state = self.theta0, TrustRegionState(delta=1.0)
            memory = SecantMemory(capacity=2)
            previous = self.objective.value(theta)
            for _ in range(20):
                result = tr_iterate(self.objective, theta, state, memory, mu=1, mode=mode)
                theta, state = result.theta, result.state
                current = self.objective.value(theta)
                self.assertLessEqual(current, previous + 1e-14)
                previous = current
            self.assertLess(previous, self.objective.value(self.theta0))

    def test_reduction_sums_accepted_decreases(self):
        result = tr_iterate(self.objective, self.theta0, TrustRegionState(), SecantMemory(), mu=5, mode=LSR1)
        self.assertAlmostEqual(
            result.reduction, self.objective.value(self.theta0) - self.objective.value(result.theta), places=10
        )

    def test_zero_iterations(self):
        result = tr_iterate(self.objective, self.theta0, TrustRegionState(), mu=0)
        np.testing.assert_array_equal(result.theta, self.theta0)
        self.assertEqual(result.reduction, 0.0)

    def test_stationary_point_shrinks_radius(self):
        minimizer = np.linalg.solve(self.objective.A, self.objective.b)
        result = tr_iterate(self.objective, minimizer, TrustRegionState(delta=1.0), mu=1, mode=CAUCHY_POINT)
        np.testing.assert_array_equal(result.theta, minimizer)
        self.assertEqual(result.state.delta, 0.5)

    def test_diverged_trial_is_rejected(self):
        objective = DivergesBeyond(np.eye(2), np.array([10.0, 0.0]), limit=0.5)
        result = tr_iterate(objective, np.zeros(2), TrustRegionState(delta=1.0), mu=1, mode=CAUCHY_POINT)
        np.testing.assert_array_equal(result.theta, np.zeros(2))
        self.assertEqual(result.state.delta, 0.5)

    def test_pairs_only_after_accepted_steps(self):
        memory = SecantMemory(capacity=3)
        objective = DivergesBeyond(np.eye(2), np.array([10.0, 0.0]), limit=0.5)
        tr_iterate(objective, np.zeros(2), TrustRegionState(delta=1.0), memory, mu=1, mode=LSR1,
                   pairs=GradientDifferencePairs())
        self.assertEqual(len(memory), 0)

    def test_unknown_mode(self):
        with self.assertRaises(ConfigurationError):
            tr_iterate(self.objective, self.theta0, TrustRegionState(), mode='BFGS')


class ModelDecreaseTests(SimpleTestCase):
    def test_value(self):
        g = np.array([1.0, 0.0])
        s = np.array([-1.0, 0.0])
        self.assertEqual(model_decrease(g, s, s), 0.5)
