"""Fixed-step classical Runge-Kutta integration.

Works on anything supporting ``+`` and scalar ``*`` with a ``shape``
attribute, so both numpy arrays and autodiff nodes integrate the same way.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

DEFAULT_STEP = 0.05


def _checked(f: Callable, z, t: float):
    dz = f(z, t)
    if tuple(dz.shape) != tuple(z.shape):
        raise ValueError(
            f"derivative shape {tuple(dz.shape)} does not match state shape {tuple(z.shape)}"
        )
    return dz


def rk4_step(f: Callable, z, t: float, dt: float):
    if not dt > 0:
        raise ValueError(f"step must be positive, got {dt}")
    k1 = _checked(f, z, t)
    k2 = _checked(f, z + k1 * (dt / 2), t + dt / 2)
    k3 = _checked(f, z + k2 * (dt / 2), t + dt / 2)
    k4 = _checked(f, z + k3 * dt, t + dt)
    return z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)


def integrate(
    f: Callable,
    z0,
    t0: float,
    query_times: Sequence[float],
    step: float = DEFAULT_STEP,
) -> list:
    """States at each of ``query_times`` starting from ``z0`` at ``t0``.

    Each gap between consecutive query times is split into the fewest equal
    steps no longer than ``step``, so every query lands on a step boundary.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    times = [float(t) for t in query_times]
    if times and times[0] < t0:
        raise ValueError(f"query time {times[0]} precedes start time {t0}")
    for a, b in zip(times, times[1:]):
        if not b > a:
            raise ValueError("query times must be strictly ascending")
    out = []
    z, t = z0, float(t0)
    for target in times:
        gap = target - t
        if gap > 0:
            n = max(1, math.ceil(gap / step - 1e-9))
            h = gap / n
            for i in range(n):
                z = rk4_step(f, z, t + i * h, h)
            t = target
        out.append(z)
    return out
