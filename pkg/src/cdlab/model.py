"""Latent graph-ODE trajectory predictor.

Pipeline: attention encoder over the spatio-temporal graph, temporal pooling
per object, Gaussian posterior over initial latents, NRI-style interaction
ODE integrated with RK4, and an affine decoder.

Every function takes ``W``: a dict of *effective* weight nodes (backbone
weights already multiplied by a mask), keyed by the names in
:meth:`ModelConfig.shapes`. Biases do not exist; tanh is the only
nonlinearity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import autodiff as ad
from .data import Batch, ObservationWindow, collate, default_delta
from .ode import DEFAULT_STEP, integrate

TE_SCALE = 100.0
LOG_SIGMA_MIN = math.log(1e-4)
LOG_SIGMA_MAX = math.log(10.0)

Mode = Literal["deterministic", "sampled"]


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 4
    d_hidden: int = 64
    d_latent: int = 16
    n_layers: int = 2
    d_interaction: int = 128

    def __post_init__(self):
        for name in ("d_in", "d_hidden", "d_latent", "n_layers", "d_interaction"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_hidden % 2:
            raise ValueError("d_hidden must be even for the temporal encoding")

    def shapes(self) -> dict[str, tuple[int, int]]:
        """Weight shapes in ``x @ W`` orientation, keyed by component-prefixed name."""
        h, z, e = self.d_hidden, self.d_latent, self.d_interaction
        out = {"enc.input": (self.d_in, h)}
        for l in range(self.n_layers):
            out[f"enc.layer{l}.tmp"] = (h + 1, h)
            out[f"enc.layer{l}.msg"] = (h, h)
        out["enc.pool.tmp"] = (h + 1, h)
        out["enc.pool.avg"] = (h, h)
        out["gen.post.hidden"] = (h, h)
        out["gen.post.out"] = (h, 2 * z)
        out["gen.edge"] = (2 * z, e)
        out["gen.node.hidden"] = (z + e, e)
        out["gen.node.out"] = (e, z)
        out["dec.out"] = (z, self.d_in)
        return out

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def temporal_encoding(dt, d: int) -> np.ndarray:
    """Sinusoidal encoding: ``sin(dt / 10000**(2i/d))`` at even slots, ``cos`` at odd."""
    if d % 2:
        raise ValueError(f"temporal encoding dimension must be even, got {d}")
    dt = np.asarray(dt, dtype=np.float64)
    # offsets repeat heavily across edges; evaluate each distinct value once
    uniq, inverse = np.unique(dt, return_inverse=True)
    freq = 10000.0 ** (-np.arange(0, d, 2) / d)
    angles = uniq[:, None] * freq
    table = np.empty((len(uniq), d))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table[inverse.reshape(dt.shape)]


def message(h_source, dt, w_tmp) -> ad.Node:
    """``tanh(concat(h, dt) @ W_tmp) + TE(dt)`` for rows of ``h_source``."""
    h_source = ad.const(h_source)
    dt = np.asarray(dt, dtype=np.float64).reshape(-1)
    dt = np.broadcast_to(dt, (h_source.shape[0],))
    x = ad.concat([h_source, dt[:, None]], axis=1)
    te = temporal_encoding(TE_SCALE * dt, h_source.shape[1])
    return ad.tanh(ad.matmul(x, w_tmp)) + te


def _edge_messages(h, src, offset, w_tmp) -> ad.Node:
    """:func:`message` for every edge, projecting each state once before gathering.

    Splits ``W_tmp`` into its state rows and its time row, so the work is per
    state-node instead of per edge.
    """
    d = h.shape[1]
    proj = ad.matmul(h, w_tmp[:d])
    pre = ad.gather(proj, src) + ad.mul(offset[:, None], w_tmp[d:])
    return ad.tanh(pre) + temporal_encoding(TE_SCALE * offset, d)


def attention_weights(h_target, neighbor_messages) -> ad.Node:
    """Softmax of ``msg_u . h_v`` over one state's neighbourhood."""
    logits = ad.matmul(ad.const(neighbor_messages), ad.reshape(h_target, (-1, 1)))
    return ad.softmax(ad.reshape(logits, (-1,)))


def encoder_layer(h, graph, w_tmp, w_msg, dropout_rate=0.0, rng=None, training=False) -> ad.Node:
    """Residual attention update ``h + tanh(sum_u a_u * msg_u @ W_msg)``."""
    n = h.shape[0]
    msgs = _edge_messages(h, graph.src, graph.offset, w_tmp)
    logits = ad.sum(msgs * ad.gather(h, graph.dst), axis=1)
    att = ad.segment_softmax(logits, graph.dst, n)
    agg = ad.scatter_sum(msgs * ad.reshape(att, (-1, 1)), graph.dst, n)
    update = ad.tanh(ad.matmul(agg, w_msg))
    return h + ad.dropout(update, dropout_rate, rng, training)


def temporal_pool(h, node_object, node_time, t0, n_objects, w_tmp, w_avg) -> ad.Node:
    """Per-object summary: gated average of time-stamped messages."""
    counts = np.bincount(node_object, minlength=n_objects).astype(np.float64)[:, None]
    p = _edge_messages(h, np.arange(h.shape[0]), node_time - t0, w_tmp)
    mean_p = ad.scatter_sum(p, node_object, n_objects) / counts
    h_bar = ad.tanh(ad.matmul(mean_p, w_avg))
    gate = ad.tanh(ad.sum(ad.gather(h_bar, node_object) * p, axis=1))
    return ad.scatter_sum(p * ad.reshape(gate, (-1, 1)), node_object, n_objects) / counts


def encode(batch: Batch, W, config: ModelConfig, dropout_rate=0.0, rng=None, training=False) -> ad.Node:
    g = batch.graph
    h = ad.matmul(ad.const(g.features), W["enc.input"])
    for l in range(config.n_layers):
        h = encoder_layer(
            h, g, W[f"enc.layer{l}.tmp"], W[f"enc.layer{l}.msg"], dropout_rate, rng, training
        )
    h_final = temporal_pool(
        h, g.node_object, g.node_time, batch.t0, batch.n_objects, W["enc.pool.tmp"], W["enc.pool.avg"]
    )
    return ad.dropout(h_final, dropout_rate, rng, training)


def infer_posterior(h_final, W, d_latent: int) -> tuple[ad.Node, ad.Node]:
    hidden = ad.tanh(ad.matmul(h_final, W["gen.post.hidden"]))
    out = ad.matmul(hidden, W["gen.post.out"])
    mu = out[:, :d_latent]
    log_sigma = ad.clip(out[:, d_latent:], LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    return mu, ad.exp(log_sigma)


def sample_initial(mu, sigma, rng=None, noise: np.ndarray | None = None) -> ad.Node:
    """``mu + sigma * eps``; returns ``mu`` itself when neither rng nor noise is given."""
    if noise is None and rng is None:
        return ad.const(mu)
    mu, sigma = ad.const(mu), ad.const(sigma)
    if noise is None:
        noise = rng.standard_normal(mu.shape)
    return mu + sigma * noise


def interaction_derivative(z, edge_src, edge_dst, W) -> ad.Node:
    """``dz_v/dt = node_mlp(z_v, sum_u edge_mlp(z_u, z_v))`` over spatial neighbours."""
    z = ad.const(z)
    n = z.shape[0]
    pair = ad.concat([ad.gather(z, edge_src), ad.gather(z, edge_dst)], axis=1)
    e = ad.tanh(ad.matmul(pair, W["gen.edge"]))
    agg = ad.scatter_sum(e, edge_dst, n)
    hidden = ad.tanh(ad.matmul(ad.concat([z, agg], axis=1), W["gen.node.hidden"]))
    return ad.matmul(hidden, W["gen.node.out"])


def decode(z, W) -> ad.Node:
    return ad.matmul(z, W["dec.out"])


@dataclass
class Prediction:
    y: ad.Node  # [Tp, n_objects, d_in]
    mu: ad.Node
    sigma: ad.Node
    z_path: list


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ad.NonFiniteError as exc:
        raise ad.NonFiniteError(f"{name}: {exc}") from exc


def forward(
    batch: Batch,
    W,
    config: ModelConfig,
    mode: Mode = "deterministic",
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
    dropout_rate: float = 0.0,
    ode_step: float = DEFAULT_STEP,
) -> Prediction:
    """Predict ``batch.targets`` at ``batch.target_times``.

    ``mode="sampled"`` draws initial latents from the posterior (using
    ``noise`` if given, else ``rng``); dropout is active only in that mode.
    """
    training = mode == "sampled"
    h_final = _stage("encoder", encode, batch, W, config, dropout_rate, rng, training)
    mu, sigma = _stage("posterior", infer_posterior, h_final, W, config.d_latent)
    if mode == "sampled":
        z0 = sample_initial(mu, sigma, rng if noise is None else None, noise)
    elif mode == "deterministic":
        z0 = mu
    else:
        raise ValueError(f"unknown mode {mode!r}")

    def f(z, t):
        return interaction_derivative(z, batch.edge_src, batch.edge_dst, W)

    path = _stage("ode", integrate, f, z0, batch.t1, batch.target_times, ode_step)
    y = _stage("decoder", lambda: ad.stack([decode(z, W) for z in path], axis=0))
    return Prediction(y, mu, sigma, path)


def predict(
    windows: list[ObservationWindow],
    W,
    config: ModelConfig,
    mode: Mode = "deterministic",
    delta: float | None = None,
    rng: np.random.Generator | None = None,
    ode_step: float = DEFAULT_STEP,
) -> np.ndarray:
    """Predicted states ``[Tp, n_objects_total, d_in]`` for ``windows`` collated together."""
    delta = default_delta(windows[0]) if delta is None else delta
    batch = collate(windows, delta)
    return forward(batch, W, config, mode, rng=rng, ode_step=ode_step).y.value
