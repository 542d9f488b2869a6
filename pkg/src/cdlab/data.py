"""Observation windows, spatio-temporal graphs, normalization and dataset files."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .seeding import derive_seed
from .simulate import SystemConfig, Trajectory

DATASET_VERSION = 1
N_FEATURES = 4
DEFAULT_DELTA_STEPS = 5


@dataclass
class Normalizer:
    """Per-feature max-abs scaling fitted on training trajectories."""

    scale: np.ndarray  # [4]

    @classmethod
    def fit(cls, trajectories: Sequence[Trajectory]) -> "Normalizer":
        feats = np.concatenate([_features(t).reshape(-1, N_FEATURES) for t in trajectories])
        scale = np.abs(feats).max(axis=0)
        return cls(np.where(scale > 0, scale, 1.0))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return x / self.scale

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.scale


def _features(traj: Trajectory) -> np.ndarray:
    return np.concatenate([traj.positions, traj.velocities], axis=-1)


@dataclass
class ObservationWindow:
    """Irregular observations on ``[t0, t1]`` plus prediction targets after ``t1``.

    Times are normalized so the full trajectory spans ``[0, 1]``.
    """

    obs_times: np.ndarray  # [To]
    features: np.ndarray  # [To, n, 4]
    obs_mask: np.ndarray  # [To, n] bool
    target_times: np.ndarray  # [Tp]
    targets: np.ndarray  # [Tp, n, 4]
    target_mask: np.ndarray  # [Tp, n] bool
    adjacency: np.ndarray  # [n, n] bool spatial interaction graph
    t0: float
    t1: float

    @property
    def n_objects(self) -> int:
        return self.adjacency.shape[0]

    def split_half(self) -> "ObservationWindow":
        """First half of the observations as input, second half as targets."""
        mid = 0.5 * (self.t0 + self.t1)
        first = self.obs_times <= mid
        second = ~first
        if not self.obs_mask[first].any(axis=0).all():
            raise ValueError(
                "an object has no observation in the first half of the window; widen the window"
            )
        if not self.obs_mask[second].any(axis=0).all():
            raise ValueError(
                "an object has no observation in the second half of the window; widen the window"
            )
        return ObservationWindow(
            obs_times=self.obs_times[first],
            features=self.features[first],
            obs_mask=self.obs_mask[first],
            target_times=self.obs_times[second],
            targets=self.features[second],
            target_mask=self.obs_mask[second],
            adjacency=self.adjacency,
            t0=self.t0,
            t1=mid,
        )


def normalized_times(sample_times: np.ndarray) -> np.ndarray:
    span = sample_times[-1] - sample_times[0]
    return (sample_times - sample_times[0]) / (span if span > 0 else 1.0)


def make_window(
    traj: Trajectory,
    observe_fraction: float = 0.6,
    drop_rate: float = 0.2,
    seed: int = 0,
    normalizer: Normalizer | None = None,
) -> ObservationWindow:
    """Split a trajectory into observed prefix and target suffix.

    Each (object, time) candidate observation is dropped independently with
    probability ``drop_rate``; the earliest candidate is always kept. No
    randomness is consumed when ``drop_rate`` is zero.
    """
    if not 0 < observe_fraction < 1:
        raise ValueError(f"observe_fraction must lie in (0, 1), got {observe_fraction}")
    if not 0 <= drop_rate < 1:
        raise ValueError(f"drop_rate must lie in [0, 1), got {drop_rate}")
    T, n = traj.positions.shape[:2]
    n_obs = int(round(observe_fraction * T))
    if n_obs < 1 or n_obs >= T:
        raise ValueError(
            f"observe_fraction {observe_fraction} leaves {n_obs} of {T} steps observed; "
            "every object needs a candidate observation and at least one target"
        )
    feats = _features(traj)
    if normalizer is not None:
        feats = normalizer.normalize(feats)
    times = normalized_times(np.asarray(traj.sample_times, dtype=np.float64))
    keep = np.ones((n_obs, n), dtype=bool)
    if drop_rate > 0:
        keep = np.random.default_rng(seed).random((n_obs, n)) >= drop_rate
        keep[0] = True
    return ObservationWindow(
        obs_times=times[:n_obs],
        features=feats[:n_obs],
        obs_mask=keep,
        target_times=times[n_obs:],
        targets=feats[n_obs:],
        target_mask=np.ones((T - n_obs, n), dtype=bool),
        adjacency=np.asarray(traj.adjacency, dtype=bool),
        t0=float(times[0]),
        t1=float(times[n_obs - 1]),
    )


def make_windows(
    trajectories: Sequence[Trajectory],
    normalizer: Normalizer,
    observe_fraction: float = 0.6,
    drop_rate: float = 0.2,
    seed: int = 0,
) -> list[ObservationWindow]:
    return [
        make_window(t, observe_fraction, drop_rate, derive_seed(seed, i), normalizer)
        for i, t in enumerate(trajectories)
    ]


@dataclass
class SpatioTemporalGraph:
    node_object: np.ndarray  # [N]
    node_time: np.ndarray  # [N]
    features: np.ndarray  # [N, 4]
    src: np.ndarray  # [E] source state-node
    dst: np.ndarray  # [E] target state-node
    offset: np.ndarray  # [E] source time minus target time

    @property
    def n_nodes(self) -> int:
        return len(self.node_object)

    def edge_set(self) -> set[tuple[int, int]]:
        return set(zip(self.src.tolist(), self.dst.tolist()))


def default_delta(window: ObservationWindow) -> float:
    """Window admitting offsets of fewer than five sampled steps.

    Sits half a step below the fifth step so float rounding in normalized
    times cannot flip edges at exactly five steps.
    """
    if len(window.obs_times) > 1:
        step = float(np.min(np.diff(window.obs_times)))
    else:
        step = float(window.target_times[0] - window.obs_times[0])
    return (DEFAULT_DELTA_STEPS - 0.5) * step


def build_st_graph(
    window: ObservationWindow, delta: float, self_edges: bool = True
) -> SpatioTemporalGraph:
    """State-nodes (time-major) and the edges ``u@q -> v@t`` with ``|q - t| < delta``.

    An edge needs ``u`` and ``v`` to interact; with ``self_edges`` an object
    also links to its own states at other times. A state never links to itself.
    """
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    ti, oi = np.nonzero(window.obs_mask)
    node_time = window.obs_times[ti]
    linked = window.adjacency.copy()
    if self_edges:
        np.fill_diagonal(linked, True)
    close = np.abs(node_time[:, None] - node_time[None, :]) < delta
    ok = close & linked[oi[:, None], oi[None, :]]
    np.fill_diagonal(ok, False)
    dst, src = np.nonzero(ok)
    return SpatioTemporalGraph(
        node_object=oi.astype(np.int64),
        node_time=node_time,
        features=window.features[ti, oi],
        src=src.astype(np.int64),
        dst=dst.astype(np.int64),
        offset=node_time[src] - node_time[dst],
    )


@dataclass
class Batch:
    """Several windows fused into one disjoint graph for a single forward pass."""

    graph: SpatioTemporalGraph  # node_object holds global object ids
    n_windows: int
    n_objects: int
    object_window: np.ndarray  # [n_objects] owning window
    edge_src: np.ndarray  # spatial interaction edges between global objects
    edge_dst: np.ndarray
    t0: float
    t1: float
    target_times: np.ndarray  # [Tp]
    targets: np.ndarray  # [Tp, n_objects, 4]
    target_mask: np.ndarray  # [Tp, n_objects]


def collate(
    windows: Sequence[ObservationWindow], delta: float, self_edges: bool = True
) -> Batch:
    if not windows:
        raise ValueError("cannot collate an empty list of windows")
    t0, t1 = windows[0].t0, windows[0].t1
    if any(w.t0 != t0 or w.t1 != t1 for w in windows):
        raise ValueError("all windows in a batch must share t0 and t1")
    target_times = np.unique(np.concatenate([w.target_times for w in windows]))
    graphs = [build_st_graph(w, delta, self_edges) for w in windows]
    n_total = sum(w.n_objects for w in windows)
    targets = np.zeros((len(target_times), n_total, N_FEATURES))
    target_mask = np.zeros((len(target_times), n_total), dtype=bool)
    parts: dict[str, list] = {k: [] for k in ("obj", "time", "feat", "src", "dst", "off", "es", "ed", "ow")}
    obj_base = node_base = 0
    for k, (w, g) in enumerate(zip(windows, graphs)):
        n = w.n_objects
        rows = np.searchsorted(target_times, w.target_times)
        targets[rows, obj_base : obj_base + n] = w.targets
        target_mask[rows, obj_base : obj_base + n] = w.target_mask
        parts["obj"].append(g.node_object + obj_base)
        parts["time"].append(g.node_time)
        parts["feat"].append(g.features)
        parts["src"].append(g.src + node_base)
        parts["dst"].append(g.dst + node_base)
        parts["off"].append(g.offset)
        es, ed = np.nonzero(w.adjacency)
        parts["es"].append(es + obj_base)
        parts["ed"].append(ed + obj_base)
        parts["ow"].append(np.full(n, k))
        obj_base += n
        node_base += g.n_nodes
    cat = {k: np.concatenate(v) for k, v in parts.items()}
    graph = SpatioTemporalGraph(
        node_object=cat["obj"].astype(np.int64),
        node_time=cat["time"],
        features=cat["feat"],
        src=cat["src"].astype(np.int64),
        dst=cat["dst"].astype(np.int64),
        offset=cat["off"],
    )
    return Batch(
        graph=graph,
        n_windows=len(windows),
        n_objects=n_total,
        object_window=cat["ow"].astype(np.int64),
        edge_src=cat["es"].astype(np.int64),
        edge_dst=cat["ed"].astype(np.int64),
        t0=t0,
        t1=t1,
        target_times=target_times,
        targets=targets,
        target_mask=target_mask,
    )


# ---------------------------------------------------------------------------
# persistence


@dataclass
class DatasetFile:
    config: SystemConfig
    seed: int
    train: list[Trajectory]
    test: list[Trajectory]

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetFile):
            return NotImplemented
        return (
            self.config == other.config
            and self.config.name == other.config.name
            and self.seed == other.seed
            and _same_trajs(self.train, other.train)
            and _same_trajs(self.test, other.test)
        )


def _same_trajs(a: Sequence[Trajectory], b: Sequence[Trajectory]) -> bool:
    if len(a) != len(b):
        return False
    for x, y in zip(a, b):
        if not (
            np.array_equal(x.positions, y.positions)
            and np.array_equal(x.velocities, y.velocities)
            and np.array_equal(x.adjacency, y.adjacency)
            and np.array_equal(x.sample_times, y.sample_times)
        ):
            return False
        if (x.charges is None) != (y.charges is None):
            return False
        if x.charges is not None and not np.array_equal(x.charges, y.charges):
            return False
    return True


def _pack_split(prefix: str, trajs: Sequence[Trajectory], arrays: dict) -> None:
    arrays[f"{prefix}/positions"] = np.stack([t.positions for t in trajs])
    arrays[f"{prefix}/velocities"] = np.stack([t.velocities for t in trajs])
    arrays[f"{prefix}/adjacency"] = np.stack([t.adjacency for t in trajs]).astype(bool)
    if trajs[0].charges is not None:
        arrays[f"{prefix}/charges"] = np.stack([t.charges for t in trajs])


def _unpack_split(prefix: str, arrays: dict, times: np.ndarray) -> list[Trajectory]:
    pos = arrays[f"{prefix}/positions"]
    vel = arrays[f"{prefix}/velocities"]
    adj = arrays[f"{prefix}/adjacency"]
    charges = arrays.get(f"{prefix}/charges")
    return [
        Trajectory(pos[i], vel[i], adj[i], times.copy(), None if charges is None else charges[i])
        for i in range(len(pos))
    ]


def save_dataset(path: str | Path, dataset: DatasetFile) -> None:
    arrays: dict[str, np.ndarray] = {"sample_times": dataset.train[0].sample_times}
    _pack_split("train", dataset.train, arrays)
    _pack_split("test", dataset.test, arrays)
    meta = {
        "content": "dataset",
        "system": dataset.config.to_dict(),
        "seed": dataset.seed,
        "n_train": len(dataset.train),
        "n_test": len(dataset.test),
    }
    container.write(path, DATASET_VERSION, meta, arrays)


def load_dataset(path: str | Path) -> DatasetFile:
    meta, arrays = container.read(path, DATASET_VERSION)
    if meta.get("content") != "dataset":
        raise container.ContainerFormatError(f"{path} does not hold a dataset")
    times = arrays["sample_times"]
    return DatasetFile(
        config=SystemConfig.from_dict(meta["system"]),
        seed=meta["seed"],
        train=_unpack_split("train", arrays, times),
        test=_unpack_split("test", arrays, times),
    )
