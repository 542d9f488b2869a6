import math

import numpy as np
import pytest

from cdlab.ode import integrate, rk4_step


def oscillator(z, t):
    return np.array([z[1], -z[0]])


def oscillator_error(step: float, t_end: float = 10.0) -> float:
    times = np.linspace(0.1, t_end, 100)
    out = integrate(oscillator, np.array([0.0, 1.0]), 0.0, times, step)
    exact = np.stack([np.sin(times), np.cos(times)], axis=1)
    return float(np.abs(np.stack(out) - exact).max())


class TestRK4Step:
    def test_exponential_decay(self):
        z = rk4_step(lambda z, t: -z, np.array([1.0]), 0.0, 0.1)
        assert abs(z[0] - math.exp(-0.1)) < 1e-7
        assert z[0] == pytest.approx(0.9048374, abs=1e-6)

    def test_zero_derivative_leaves_state_unchanged(self):
        z0 = np.array([1.5, -2.0, 3.25])
        z = rk4_step(lambda z, t: np.zeros_like(z), z0, 0.0, 0.3)
        np.testing.assert_array_equal(z, z0)

    def test_harmonic_oscillator_1000_steps(self):
        z = np.array([0.0, 1.0])
        err = 0.0
        for i in range(1000):
            z = rk4_step(oscillator, z, i * 0.01, 0.01)
            t = (i + 1) * 0.01
            err = max(err, abs(z[0] - math.sin(t)), abs(z[1] - math.cos(t)))
        assert err < 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            rk4_step(lambda z, t: np.zeros(3), np.zeros(2), 0.0, 0.1)

    def test_nonpositive_step(self):
        with pytest.raises(ValueError):
            rk4_step(lambda z, t: z, np.zeros(2), 0.0, 0.0)


class TestIntegrate:
    def test_query_at_start_returns_initial_state(self):
        z0 = np.array([2.0])
        (out,) = integrate(lambda z, t: -z, z0, 0.3, [0.3])
        assert out is z0

    def test_exponential_queries(self):
        out = integrate(lambda z, t: -z, np.array([1.0]), 0.0, [0.5, 1.0])
        assert abs(out[0][0] - math.exp(-0.5)) < 1e-6
        assert abs(out[1][0] - math.exp(-1.0)) < 1e-6

    def test_unsorted_times_rejected(self):
        with pytest.raises(ValueError, match="ascending"):
            integrate(lambda z, t: z, np.ones(1), 0.0, [0.5, 0.2])

    def test_query_before_start_rejected(self):
        with pytest.raises(ValueError, match="precedes"):
            integrate(lambda z, t: z, np.ones(1), 1.0, [0.5])

    def test_queries_land_on_step_boundaries(self):
        seen = []

        def f(z, t):
            seen.append(t)
            return np.zeros_like(z)

        integrate(f, np.zeros(1), 0.0, [0.13, 0.2], step=0.05)
        # stage-1 evaluations happen at step starts: 0.13 split in 3, 0.07 split in 2
        starts = seen[::4]
        np.testing.assert_allclose(starts, [0.0, 0.13 / 3, 2 * 0.13 / 3, 0.13, 0.165], atol=1e-12)

    def test_joint_equals_continued(self):
        f = lambda z, t: np.array([z[1], -np.sin(z[0])])
        z0 = np.array([1.0, 0.0])
        a, b = integrate(f, z0, 0.0, [0.37, 0.81])
        (first,) = integrate(f, z0, 0.0, [0.37])
        (second,) = integrate(f, first, 0.37, [0.81])
        np.testing.assert_allclose(b, second, atol=1e-10)

    def test_fourth_order_convergence(self):
        e1 = oscillator_error(0.1)
        e2 = oscillator_error(0.05)
        ratio = e1 / e2
        assert 10 <= ratio <= 22
        assert math.log2(ratio) >= 3.7
