"""Spring-connected and charged particle simulators (2-D, unit masses).

Leapfrog (kick-drift-kick) integration with elastic reflection at the walls
of the square box ``[-box_size, box_size]^2``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .seeding import derive_seed

SOFTENING = 0.1
INITIAL_SPEED = 0.5


class Kind(str, Enum):
    SPRING = "Spring"
    CHARGED = "Charged"


@dataclass(frozen=True)
class SystemConfig:
    kind: Kind
    n_particles: int = 5
    box_size: float = 5.0
    interaction_strength: float = 0.1
    sim_steps: int = 6000
    sample_every: int = 100
    sim_dt: float = 0.001
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        problems = self.problems()
        if problems:
            raise ValueError("invalid system config: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.n_particles < 1:
            out.append(f"n_particles must be >= 1 (got {self.n_particles})")
        if not self.box_size > 0:
            out.append(f"box_size must be > 0 (got {self.box_size})")
        if not self.interaction_strength > 0:
            out.append(f"interaction_strength must be > 0 (got {self.interaction_strength})")
        if self.sample_every < 1 or self.sim_steps < 1:
            out.append("sim_steps and sample_every must be >= 1")
        elif self.sim_steps % self.sample_every:
            out.append(
                f"sim_steps ({self.sim_steps}) not divisible by sample_every ({self.sample_every})"
            )
        if not self.sim_dt > 0:
            out.append(f"sim_dt must be > 0 (got {self.sim_dt})")
        return out

    @property
    def n_samples(self) -> int:
        return self.sim_steps // self.sample_every

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        return cls(**d)


def _spring(name: str, box: float, k: float) -> SystemConfig:
    return SystemConfig(Kind.SPRING, 5, box, k, name=name)


def _charged(name: str, box: float, c: float) -> SystemConfig:
    return SystemConfig(Kind.CHARGED, 5, box, c, name=name)


SYSTEMS: dict[str, SystemConfig] = {
    cfg.name: cfg
    for cfg in [
        _spring("S1", 10.0, 0.01),
        _spring("S2", 5.0, 0.01),
        _spring("S3", 3.0, 0.01),
        _spring("S4", 1.0, 0.01),
        _spring("S5", 0.5, 0.01),
        _spring("S6", 0.5, 0.1),
        _spring("S7", 0.5, 0.5),
        _spring("S8", 0.5, 1.0),
        _spring("S9", 3.0, 0.1),
        _spring("S10", 1.0, 0.5),
        _charged("C1", 10.0, 0.01),
        _charged("C2", 3.0, 0.1),
        _charged("C3", 1.0, 0.5),
        _charged("C4", 0.5, 1.0),
    ]
}


@dataclass
class Trajectory:
    positions: np.ndarray  # [T, n, 2]
    velocities: np.ndarray  # [T, n, 2]
    adjacency: np.ndarray  # [n, n] bool, symmetric, zero diagonal
    sample_times: np.ndarray  # [T]
    charges: np.ndarray | None = None  # [n] in {-1, +1} for charged systems

    @property
    def n_particles(self) -> int:
        return self.positions.shape[1]


def pair_forces(
    pos: np.ndarray,
    adjacency: np.ndarray,
    charges: np.ndarray | None,
    kind: Kind,
    strength: float,
    check_newton: bool = False,
) -> np.ndarray:
    """Total force on each particle; ``pos`` is ``[..., n, 2]``.

    Summation runs over partners in a fixed order so results do not depend on
    how many systems are batched together.
    """
    n = pos.shape[-2]
    force = np.zeros_like(pos)
    for j in range(n):
        diff = pos - pos[..., j : j + 1, :]
        if kind is Kind.SPRING:
            term = -strength * adjacency[..., :, j, None] * diff
        else:
            dist = np.sqrt((diff * diff).sum(-1, keepdims=True))
            qq = charges[..., :, None] * charges[..., j, None, None]
            term = strength * qq * diff / (dist**3 + SOFTENING)
            term[..., j, :] = 0.0
        force += term
    if check_newton:
        net = np.abs(force.sum(axis=-2)).max()
        scale = max(1.0, np.abs(force).max())
        if net > 1e-12 * scale:
            raise AssertionError(f"pairwise forces do not cancel (residual {net:.3e})")
    return force


def reflect(pos: np.ndarray, vel: np.ndarray, box: float) -> None:
    """Mirror positions back inside the box in place, negating normal velocity."""
    while True:
        high = pos > box
        low = pos < -box
        if not (high.any() or low.any()):
            return
        pos[high] = 2 * box - pos[high]
        pos[low] = -2 * box - pos[low]
        vel[high | low] *= -1.0


def leapfrog(
    pos: np.ndarray,
    vel: np.ndarray,
    adjacency: np.ndarray,
    charges: np.ndarray | None,
    config: SystemConfig,
    check_newton: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate from the given state; returns sampled ``(positions, velocities)``.

    Samples are taken before steps ``0, sample_every, 2*sample_every, ...``.
    Leading batch dimensions are allowed.
    """
    pos = np.array(pos, dtype=np.float64)
    vel = np.array(vel, dtype=np.float64)
    dt = config.sim_dt
    samples_p, samples_v = [], []
    force = pair_forces(pos, adjacency, charges, config.kind, config.interaction_strength, check_newton)
    for step in range(config.sim_steps):
        if step % config.sample_every == 0:
            samples_p.append(pos.copy())
            samples_v.append(vel.copy())
        vel += 0.5 * dt * force
        pos += dt * vel
        reflect(pos, vel, config.box_size)
        force = pair_forces(pos, adjacency, charges, config.kind, config.interaction_strength, check_newton)
        vel += 0.5 * dt * force
    return np.stack(samples_p, axis=-3), np.stack(samples_v, axis=-3)


def initial_state(config: SystemConfig, rng: np.random.Generator):
    """Random ``(pos, vel, adjacency, charges)`` for one trajectory."""
    n = config.n_particles
    half = config.box_size / 2
    pos = rng.uniform(-half, half, size=(n, 2))
    vel = rng.normal(size=(n, 2))
    norms = np.linalg.norm(vel, axis=1, keepdims=True)
    vel = INITIAL_SPEED * vel / np.maximum(norms, 1e-12)
    if config.kind is Kind.SPRING:
        upper = np.triu(rng.random((n, n)) < 0.5, k=1)
        adjacency = upper | upper.T
        charges = None
    else:
        adjacency = ~np.eye(n, dtype=bool)
        charges = rng.choice(np.array([-1.0, 1.0]), size=n)
    return pos, vel, adjacency, charges


def _sample_times(config: SystemConfig) -> np.ndarray:
    return np.arange(config.n_samples) * config.sample_every * config.sim_dt


def simulate(config: SystemConfig, seed: int, check_newton: bool = False) -> Trajectory:
    pos, vel, adjacency, charges = initial_state(config, np.random.default_rng(seed))
    positions, velocities = leapfrog(pos, vel, adjacency, charges, config, check_newton)
    return Trajectory(positions, velocities, adjacency, _sample_times(config), charges)


def generate_dataset(config: SystemConfig, n_trajectories: int, seed: int) -> list[Trajectory]:
    """``n_trajectories`` independent trajectories; trajectory ``i`` uses ``derive_seed(seed, i)``.

    All trajectories are integrated together as one batch. Results match
    :func:`simulate` with the derived seed bit for bit.
    """
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be >= 1")
    states = [
        initial_state(config, np.random.default_rng(derive_seed(seed, i)))
        for i in range(n_trajectories)
    ]
    pos = np.stack([s[0] for s in states])
    vel = np.stack([s[1] for s in states])
    adjacency = np.stack([s[2] for s in states])
    charges = None if config.kind is Kind.SPRING else np.stack([s[3] for s in states])
    positions, velocities = leapfrog(pos, vel, adjacency, charges, config)
    times = _sample_times(config)
    return [
        Trajectory(
            positions[i],
            velocities[i],
            adjacency[i],
            times.copy(),
            None if charges is None else charges[i],
        )
        for i in range(n_trajectories)
    ]
