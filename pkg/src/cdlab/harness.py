"""Continual-learning engine: ELBO training of masks, sequence orchestration,
mode switching, baselines and the AP/AF metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np

from . import autodiff as ad
from .data import (
    DatasetFile,
    Normalizer,
    ObservationWindow,
    collate,
    default_delta,
    make_windows,
)
from .model import ModelConfig, forward
from .ode import DEFAULT_STEP
from .seeding import derive_seed
from .subnet import (
    Backbone,
    MaskPool,
    MaskTriple,
    Strategy,
    init_backbone,
    init_scores,
    weights_from_masks,
    weights_from_scores,
)

log = logging.getLogger(__name__)

Method = Literal["MSGODE", "FineTune", "Joint"]
Selection = Literal["ModeSwitching", "Oracle"]
METHODS = ("MSGODE", "FineTune", "Joint")
SELECTIONS = ("ModeSwitching", "Oracle")

EVAL_CHUNK = 25


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 10
    lr: float = 5e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    beta_kl: float = 1.0
    sigma_obs: float = 0.1
    dropout: float = 0.0
    strategy: Strategy = field(default_factory=Strategy)
    ode_step: float = DEFAULT_STEP


@dataclass(frozen=True)
class WindowConfig:
    observe_fraction: float = 0.6
    drop_rate: float = 0.2
    delta: float | None = None  # None: five sampled steps


@dataclass
class SystemData:
    """One system of a sequence, ready for training and testing."""

    name: str
    normalizer: Normalizer
    train: list[ObservationWindow]
    test: list[ObservationWindow]
    delta: float


def prepare_system(dataset: DatasetFile, windows: WindowConfig, seed: int) -> SystemData:
    norm = Normalizer.fit(dataset.train)
    train = make_windows(dataset.train, norm, windows.observe_fraction, windows.drop_rate, derive_seed(seed, "train"))
    test = make_windows(dataset.test, norm, windows.observe_fraction, windows.drop_rate, derive_seed(seed, "test"))
    delta = default_delta(train[0]) if windows.delta is None else windows.delta
    return SystemData(dataset.config.name, norm, train, test, delta)


# ---------------------------------------------------------------------------
# objective


def kl_diag_gaussian(mu, sigma) -> ad.Node:
    """KL(N(mu, sigma^2) || N(0, I)) summed over all entries."""
    mu, sigma = ad.const(mu), ad.const(sigma)
    terms = ad.square(sigma) + ad.square(mu) - 1.0 - 2.0 * ad.log(sigma)
    return 0.5 * ad.sum(terms)


def elbo_loss(predictions, targets, mu, sigma, beta_kl=1.0, sigma_obs=0.1, target_mask=None, n_windows=1) -> ad.Node:
    """Negative ELBO under a fixed-variance Gaussian likelihood, averaged over windows."""
    targets = np.asarray(targets, dtype=np.float64)
    resid = ad.square(ad.const(predictions) - targets)
    if target_mask is not None:
        resid = resid * np.asarray(target_mask, dtype=np.float64)[..., None]
    recon = ad.sum(resid) / (2.0 * sigma_obs**2)
    return (recon + beta_kl * kl_diag_gaussian(mu, sigma)) / float(n_windows)


class AdamW:
    """Adaptive moments with decoupled weight decay, updating arrays in place."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1**self.t
        bc2 = 1 - c.beta2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            p *= 1 - c.lr * c.weight_decay
            p -= c.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.eps)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    masks: MaskTriple
    scores: dict[str, np.ndarray]
    epoch_loss: list[float]


def batch_loss(backbone, score_nodes, windows, delta, cfg: TrainConfig, rng) -> ad.Node:
    batch = collate(windows, delta)
    W = weights_from_scores(backbone, score_nodes, cfg.strategy)
    pred = forward(batch, W, backbone.config, "sampled", rng=rng, dropout_rate=cfg.dropout, ode_step=cfg.ode_step)
    return elbo_loss(
        pred.y, batch.targets, pred.mu, pred.sigma, cfg.beta_kl, cfg.sigma_obs, batch.target_mask, batch.n_windows
    )


def train_system(
    backbone: Backbone,
    scores: dict[str, np.ndarray],
    windows: Sequence[tuple[ObservationWindow, float]],
    cfg: TrainConfig,
    seed: int,
    label: str = "",
) -> TrainResult:
    """Optimize ``scores`` (copied, never the backbone) on ``(window, delta)`` pairs.

    Windows are shuffled each epoch; a batch is split by delta so systems with
    different temporal windows can be trained jointly.
    """
    scores = {k: v.copy() for k, v in scores.items()}
    opt = AdamW(scores, cfg)
    rng = np.random.default_rng(seed)
    names = list(scores)
    epoch_loss = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(windows))
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            chunk = [windows[i] for i in order[start : start + cfg.batch_size]]
            nodes = {k: ad.param(scores[k]) for k in names}
            try:
                loss = None
                for delta in sorted({d for _, d in chunk}):
                    part = [w for w, d in chunk if d == delta]
                    term = batch_loss(backbone, nodes, part, delta, cfg, rng) * (len(part) / len(chunk))
                    loss = term if loss is None else loss + term
            except ad.NonFiniteError as exc:
                raise TrainingError(f"{label} epoch {epoch + 1} batch {b + 1}: non-finite loss ({exc})") from exc
            grads = ad.grad(loss, [nodes[k] for k in names])
            opt.step(dict(zip(names, grads)))
            losses.append(float(loss.value))
        epoch_loss.append(float(np.mean(losses)))
        log.info("%s epoch %d loss %.4f", label, epoch + 1, epoch_loss[-1])
    return TrainResult(MaskTriple.from_scores(scores, cfg.strategy), scores, epoch_loss)


# ---------------------------------------------------------------------------
# evaluation and mode switching


def window_errors(
    backbone: Backbone,
    masks: MaskTriple,
    windows: Sequence[ObservationWindow],
    delta: float,
    ode_step: float = DEFAULT_STEP,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-window ``(sum of squared errors, number of scalar targets)``.

    Deterministic latents; windows are processed in fixed chunks so results
    do not depend on anything but the inputs.
    """
    W = weights_from_masks(backbone, masks)
    sse, count = [], []
    for start in range(0, len(windows), EVAL_CHUNK):
        chunk = windows[start : start + EVAL_CHUNK]
        batch = collate(chunk, delta)
        y = forward(batch, W, backbone.config, "deterministic", ode_step=ode_step).y.value
        sq = ((y - batch.targets) ** 2).sum(axis=-1) * batch.target_mask
        per_obj_sse = sq.sum(axis=0)
        per_obj_n = batch.target_mask.sum(axis=0) * y.shape[-1]
        sse.append(np.bincount(batch.object_window, per_obj_sse, batch.n_windows))
        count.append(np.bincount(batch.object_window, per_obj_n, batch.n_windows))
    return np.concatenate(sse), np.concatenate(count)


def evaluate(backbone: Backbone, masks: MaskTriple, windows: Sequence[ObservationWindow], delta: float, ode_step: float = DEFAULT_STEP) -> float:
    """MSE over every window, object, target time and feature (normalized space)."""
    sse, count = window_errors(backbone, masks, windows, delta, ode_step)
    return float(sse.sum() / count.sum())


def select_masks(
    backbone: Backbone,
    pool: MaskPool | Sequence[tuple[int, MaskTriple]],
    windows: Sequence[ObservationWindow],
    delta: float,
    ode_step: float = DEFAULT_STEP,
) -> list[int]:
    """For each window, the pooled system whose mask best reconstructs the second half.

    Ties resolve to the earliest pool entry.
    """
    entries = list(pool)
    if not entries:
        raise ValueError("mask pool is empty")
    halves = [w.split_half() for w in windows]
    errs = []
    for _, masks in entries:
        sse, count = window_errors(backbone, masks, halves, delta, ode_step)
        errs.append(sse / count)
    best = np.argmin(np.stack(errs), axis=0)
    return [entries[k][0] for k in best]


def select_mask(backbone, pool, window: ObservationWindow, delta: float, ode_step: float = DEFAULT_STEP) -> int:
    return select_masks(backbone, pool, [window], delta, ode_step)[0]


# ---------------------------------------------------------------------------
# performance matrix


@dataclass
class PerformanceMatrix:
    """Lower-triangular MSE grid; ``values[i, j]`` after learning system ``i`` on system ``j``.

    Undefined entries hold NaN.
    """

    values: np.ndarray
    names: list[str]

    @classmethod
    def empty(cls, names: Sequence[str]) -> "PerformanceMatrix":
        n = len(names)
        return cls(np.full((n, n), np.nan), list(names))

    @property
    def n(self) -> int:
        return len(self.names)

    def set(self, i: int, j: int, value: float) -> None:
        if j > i:
            raise IndexError("performance matrix is lower-triangular")
        if not (np.isfinite(value) and value >= 0):
            raise ValueError(f"invalid MSE {value}")
        self.values[i, j] = value

    def defined(self, i: int, j: int) -> bool:
        return j <= i and not np.isnan(self.values[i, j])

    def populated_rows(self) -> list[int]:
        return [i for i in range(self.n) if self.defined(i, 0)]


def average_performance(M: PerformanceMatrix) -> float:
    last = M.values[M.n - 1]
    if np.isnan(last).any():
        raise ValueError("last row of the performance matrix is incomplete")
    return float(last.sum() / M.n)


def average_forgetting(M: PerformanceMatrix) -> float | None:
    """Mean growth of error from learning time to the end; None when undefined."""
    n = M.n
    if n < 2:
        return None
    diag = np.array([M.values[j, j] for j in range(n - 1)])
    last = M.values[n - 1, : n - 1]
    if np.isnan(diag).any() or np.isnan(last).any():
        return None
    return float((last - diag).sum() / (n - 1))


# ---------------------------------------------------------------------------
# sequences


@dataclass
class SequenceResult:
    method: str
    matrices: dict[str, PerformanceMatrix]  # by selection mode
    backbone: Backbone
    pool: MaskPool
    scores: dict[str, np.ndarray]
    train_logs: list[list[float]]  # per trained stage
    selection_accuracy: dict[int, float] = field(default_factory=dict)  # row -> accuracy

    @property
    def matrix(self) -> PerformanceMatrix:
        return next(iter(self.matrices.values()))


def _fill_row_msgode(M, sel, i, systems, backbone, pool, cfg, accuracy):
    entries = list(pool)[: i + 1]
    hits = total = 0
    for j in range(i + 1):
        sysd = systems[j]
        if sel == "Oracle":
            M.set(i, j, evaluate(backbone, pool.masks_for(j), sysd.test, sysd.delta, cfg.ode_step))
            continue
        chosen = select_masks(backbone, entries, sysd.test, sysd.delta, cfg.ode_step)
        sse = np.zeros(len(sysd.test))
        count = np.zeros(len(sysd.test))
        for k in sorted(set(chosen)):
            rows = [r for r, c in enumerate(chosen) if c == k]
            s, n = window_errors(backbone, pool.masks_for(k), sysd.test, sysd.delta, cfg.ode_step)
            sse[rows], count[rows] = s[rows], n[rows]
        M.set(i, j, float(sse.sum() / count.sum()))
        hits += sum(c == j for c in chosen)
        total += len(chosen)
    if sel == "ModeSwitching":
        accuracy[i] = hits / total


def run_sequence_all(
    systems: Sequence[SystemData],
    method: Method = "MSGODE",
    selections: Sequence[Selection] = ("ModeSwitching",),
    train: TrainConfig = TrainConfig(),
    model: ModelConfig = ModelConfig(),
    seed: int = 0,
) -> SequenceResult:
    """Train over ``systems`` in order and fill one matrix per selection mode.

    Selection only matters for MSGODE; other methods produce a single matrix
    stored under every requested selection key.
    """
    if not systems:
        raise ValueError("sequence must contain at least one system")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    for sel in selections:
        if sel not in SELECTIONS:
            raise ValueError(f"unknown selection {sel!r}; expected one of {SELECTIONS}")
    names = [s.name for s in systems]
    backbone, scores = init_backbone(model, derive_seed(seed, "backbone"))
    checksum = backbone.checksum()
    pool = MaskPool()
    logs: list[list[float]] = []
    accuracy: dict[int, float] = {}

    if method == "Joint":
        windows = [(w, s.delta) for s in systems for w in s.train]
        res = train_system(backbone, scores, windows, train, derive_seed(seed, "train", "joint"), "joint")
        logs.append(res.epoch_loss)
        pool.append(len(systems) - 1, res.masks)
        M = PerformanceMatrix.empty(names)
        last = len(systems) - 1
        for j, s in enumerate(systems):
            M.set(last, j, evaluate(backbone, res.masks, s.test, s.delta, train.ode_step))
        result = SequenceResult(method, {sel: M for sel in selections}, backbone, pool, res.scores, logs)
    else:
        mats = {sel: PerformanceMatrix.empty(names) for sel in selections}
        for i, sysd in enumerate(systems):
            if method == "MSGODE":
                scores = init_scores(model, derive_seed(seed, "scores", i))
            windows = [(w, sysd.delta) for w in sysd.train]
            label = f"[{i + 1}/{len(systems)} {sysd.name}]"
            try:
                res = train_system(backbone, scores, windows, train, derive_seed(seed, "train", i), label)
            except TrainingError as exc:
                raise TrainingError(f"system {i + 1} ({sysd.name}): {exc}") from exc
            logs.append(res.epoch_loss)
            scores = res.scores
            pool.append(i, res.masks)
            if method == "MSGODE":
                for sel, M in mats.items():
                    _fill_row_msgode(M, sel, i, systems, backbone, pool, train, accuracy)
            else:
                M = mats[selections[0]]
                for j in range(i + 1):
                    s = systems[j]
                    M.set(i, j, evaluate(backbone, res.masks, s.test, s.delta, train.ode_step))
        if method == "FineTune":
            mats = {sel: mats[selections[0]] for sel in selections}
        result = SequenceResult(method, mats, backbone, pool, scores, logs, accuracy)

    if backbone.checksum() != checksum:
        raise AssertionError("backbone weights changed during training")
    return result


def run_sequence(
    systems: Sequence[SystemData],
    method: Method = "MSGODE",
    selection: Selection = "ModeSwitching",
    train: TrainConfig = TrainConfig(),
    model: ModelConfig = ModelConfig(),
    seed: int = 0,
) -> PerformanceMatrix:
    return run_sequence_all(systems, method, (selection,), train, model, seed).matrices[selection]


def binarization_study(
    systems: Sequence[SystemData],
    strategies: Sequence[Strategy],
    train: TrainConfig = TrainConfig(),
    model: ModelConfig = ModelConfig(),
    seed: int = 0,
    selection: Selection = "ModeSwitching",
) -> list[dict]:
    """AP/AF of MSGODE under each binarization strategy, one row per strategy."""
    rows = []
    for strat in strategies:
        M = run_sequence(systems, "MSGODE", selection, replace(train, strategy=strat), model, seed)
        rows.append(
            {"strategy": strat.label(), "AP": average_performance(M), "AF": average_forgetting(M)}
        )
    return rows


def format_study(rows: Sequence[dict]) -> str:
    lines = [f"{'strategy':<12}{'AP':>10}{'AF':>10}"]
    for r in rows:
        af = "-" if r["AF"] is None else f"{r['AF']:.4f}"
        lines.append(f"{r['strategy']:<12}{r['AP']:>10.4f}{af:>10}")
    return "\n".join(lines)
