"""Residual graph convolution over the attribute/disease graph.

The graph is complete over the N+1 nodes; each layer owns a symmetric,
learnable edge-weight matrix (zero diagonal) initialised to 1.  A weight of
exactly zero removes the edge.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParameterTape, Tape, Var, batch_norm

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class NormState:
    """Running statistics of one batch-norm site (evaluation-time constants)."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, dim: int) -> "NormState":
        return cls(np.zeros(dim), np.ones(dim))

    def update(self, mean, var):
        self.mean = (1 - BN_MOMENTUM) * self.mean + BN_MOMENTUM * mean
        self.var = (1 - BN_MOMENTUM) * self.var + BN_MOMENTUM * var


@dataclass
class GcnLayer:
    """Parameter names of layer ``index`` inside a :class:`ParameterTape`."""

    index: int
    nodes: int
    dim: int
    norm: NormState = field(default=None)

    def __post_init__(self):
        if self.norm is None:
            self.norm = NormState.fresh(self.dim)

    def name(self, part: str) -> str:
        return f"gcn.{self.index}.{part}"

    def init(self, params: ParameterTape, rng: np.random.Generator) -> None:
        n, D = self.nodes, self.dim
        params.add(self.name("edges"), np.ones(n * (n - 1) // 2))
        params.add(self.name("w_agg"), uniform_init(rng, D, (D, D)))
        params.add(self.name("w1"), uniform_init(rng, 2 * D, (2 * D, D)))
        params.add(self.name("b1"), uniform_init(rng, 2 * D, (D,)))
        params.add(self.name("gamma"), np.ones(D))
        params.add(self.name("beta"), np.zeros(D))
        params.add(self.name("w2"), uniform_init(rng, D, (D, D)))
        params.add(self.name("b2"), uniform_init(rng, D, (D,)))

    def edge_weights(self, params: ParameterTape) -> np.ndarray:
        n = self.nodes
        m = np.zeros((n, n))
        m[np.triu_indices(n, 1)] = params.value(self.name("edges"))
        return m + m.T


def project_node_features(tape: Tape, f0: Var, w_g: Var, b_g: Var | None, nodes: int) -> Var:
    """Map the encoder feature (B, F) to per-node features (B, N+1, D0)."""
    out_dim = w_g.shape[1]
    if out_dim % nodes:
        raise ValueError(f"projection width {out_dim} is not a multiple of {nodes} nodes")
    z = tape.matmul(f0, w_g) if b_g is None else tape.affine(f0, w_g, b_g)
    return tape.reshape(z, (f0.shape[0], nodes, out_dim // nodes))


def modulate(tape: Tape, h: Var, spatial: Var | None, channel: Var | None) -> Var:
    """Scale channels first, then whole node rows."""
    out = h
    if channel is not None:
        out = tape.mul(out, tape.reshape(channel, (channel.shape[0], 1, channel.shape[1])))
    if spatial is not None:
        out = tape.mul(out, tape.reshape(spatial, (spatial.shape[0], spatial.shape[1], 1)))
    return out


def graph_conv_layer(
    tape: Tape,
    params: ParameterTape,
    layer: GcnLayer,
    h: Var,
    spatial: Var | None = None,
    channel: Var | None = None,
    train: bool = False,
    update_stats: bool = True,
) -> Var:
    """One residual graph convolution: update(concat(h~, max-agg(h~))) + h."""
    leaf = lambda part: params.leaf(layer.name(part))  # noqa: E731
    hm = modulate(tape, h, spatial, channel)
    weights = tape.symmetric(leaf("edges"), layer.nodes)
    g = tape.matmul(hm, leaf("w_agg"))
    agg = tape.edge_max_aggregate(g, weights)
    z = tape.affine(tape.concat([hm, agg], axis=-1), leaf("w1"), leaf("b1"))
    z = normalize(tape, z, leaf("gamma"), leaf("beta"), layer.norm, train, update_stats)
    upd = tape.affine(tape.relu(z), leaf("w2"), leaf("b2"))
    return tape.add(upd, h)


def normalize(tape: Tape, z: Var, gamma: Var, beta: Var, state: NormState, train: bool, update_stats: bool) -> Var:
    """Batch norm: batch statistics when training, running statistics otherwise.

    A training batch of one sample skips centring and scaling and applies
    only the learned affine map.
    """
    if train and z.shape[0] > 1:
        y, mu, var = batch_norm(tape, z, gamma, beta, BN_EPS)
        if update_stats:
            state.update(mu, var)
        return y
    if train:
        return tape.add(tape.mul(z, gamma), beta)
    inv = 1.0 / np.sqrt(state.var + BN_EPS)
    zc = tape.mul(tape.sub(z, tape.const(state.mean)), tape.const(inv))
    return tape.add(tape.mul(zc, gamma), beta)


def classify_head(tape: Tape, h_last: Var, w_p: Var, b_p: Var | None = None) -> Var:
    """Per-node affine map to C logits, softmax over grades."""
    logits = tape.matmul(h_last, w_p) if b_p is None else tape.affine(h_last, w_p, b_p)
    return tape.softmax(logits)


def as_var(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.const(x)
