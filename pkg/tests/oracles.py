"""Independent reference computations shared by the test modules."""

import numpy as np

from cdlab.data import ObservationWindow


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def brute_force_edges(window, delta, self_edges=True):
    """Double loop over all state-node pairs."""
    nodes = [
        (v, t)
        for ti, t in enumerate(window.obs_times)
        for v in range(window.n_objects)
        if window.obs_mask[ti, v]
    ]
    edges = set()
    for i, (v, t) in enumerate(nodes):
        for j, (u, q) in enumerate(nodes):
            if i == j:
                continue
            linked = window.adjacency[u, v] or (self_edges and u == v)
            if linked and abs(q - t) < delta:
                edges.add((j, i))
    return nodes, edges


def toy_window(times, adjacency, mask=None):
    times = np.asarray(times, dtype=float)
    n = len(adjacency)
    mask = np.ones((len(times), n), bool) if mask is None else mask
    return ObservationWindow(
        obs_times=times,
        features=np.random.default_rng(0).normal(size=(len(times), n, 4)),
        obs_mask=mask,
        target_times=np.array([times[-1] + 1.0]),
        targets=np.zeros((1, n, 4)),
        target_mask=np.ones((1, n), bool),
        adjacency=np.asarray(adjacency, bool),
        t0=float(times[0]),
        t1=float(times[-1]),
    )


def spring_energy(traj, k):
    kinetic = 0.5 * (traj.velocities**2).sum(axis=(1, 2))
    diff = traj.positions[:, :, None, :] - traj.positions[:, None, :, :]
    # each unordered pair appears twice in the full double sum
    potential = 0.25 * k * (traj.adjacency[None, :, :, None] * diff**2).sum(axis=(1, 2, 3))
    return kinetic + potential
