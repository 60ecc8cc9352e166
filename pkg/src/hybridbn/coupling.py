"""BN-to-GCN attention, residual fusion of the two branches, and the closing BN stage."""
from __future__ import annotations

import numpy as np

from .autodiff import ParameterTape, Tape, Var
from .belief_prop import Schedule, propagate, replay_vjp
from .bn_core import BayesianNetwork
from .gcn import uniform_init

DISEASE = 0


def init_attention(params: ParameterTape, layer: int, nodes: int, grades: int, dim: int,
                   hidden: int, reduction: int, rng: np.random.Generator) -> None:
    squeeze = max(1, dim // reduction)
    p = f"attn.{layer}."
    params.add(p + "w_l0", uniform_init(rng, nodes * grades, (nodes * grades, hidden)))
    params.add(p + "b_l0", uniform_init(rng, nodes * grades, (hidden,)))
    params.add(p + "w_l1", uniform_init(rng, hidden, (hidden, nodes)))
    params.add(p + "b_l1", uniform_init(rng, hidden, (nodes,)))
    params.add(p + "w_sq", uniform_init(rng, dim, (dim, squeeze)))
    params.add(p + "b_sq", uniform_init(rng, dim, (squeeze,)))
    params.add(p + "w_ex", uniform_init(rng, squeeze, (squeeze, dim)))
    params.add(p + "b_ex", uniform_init(rng, squeeze, (dim,)))


def spatial_attention(tape: Tape, p_b: Var, w0: Var, b0: Var, w1: Var, b1: Var,
                      across_nodes: bool = False) -> Var:
    """One gate per node from the flattened BN marginals, shape (B, N+1).

    Elementwise logistic by default; ``across_nodes`` switches to a softmax
    over nodes instead.
    """
    B = p_b.shape[0]
    flat = tape.reshape(p_b, (B, -1))
    if flat.shape[1] != w0.shape[0]:
        raise ValueError(f"marginals flatten to {flat.shape[1]} values, attention expects {w0.shape[0]}")
    z = tape.affine(tape.relu(tape.affine(flat, w0, b0)), w1, b1)
    return tape.softmax(z) if across_nodes else tape.sigmoid(z)


def channel_attention(tape: Tape, h: Var, w_sq: Var, b_sq: Var, w_ex: Var, b_ex: Var) -> Var:
    """Squeeze-and-excitation gate per feature channel, shape (B, D)."""
    if h.shape[-1] != w_sq.shape[0]:
        raise ValueError(f"features have {h.shape[-1]} channels, attention expects {w_sq.shape[0]}")
    pooled = tape.mean(h, axis=1)
    return tape.sigmoid(tape.affine(tape.relu(tape.affine(pooled, w_sq, b_sq)), w_ex, b_ex))


def init_fusion(params: ParameterTape, grades: int, rng: np.random.Generator) -> None:
    C = grades
    params.add("fusion.disease_logit", np.zeros(1))  # w_B = logistic(0) = 0.5
    params.add("fusion.attr_logit", np.zeros(1))
    params.add("fusion.w0", uniform_init(rng, 2 * C, (2 * C, C)))
    params.add("fusion.b0", uniform_init(rng, 2 * C, (C,)))
    params.add("fusion.w0_attr", uniform_init(rng, 2 * C, (2 * C, C)))
    params.add("fusion.b0_attr", uniform_init(rng, 2 * C, (C,)))


def _check_rows(name: str, p: np.ndarray, tol: float = 1e-9) -> None:
    if p.min() < -tol or np.abs(p.sum(axis=-1) - 1.0).max() > tol:
        raise ValueError(f"{name} rows must be distributions over grades")


def residual_fuse(tape: Tape, p_b: Var, p_g: Var, weight_logit: Var, w: Var, b: Var) -> Var:
    """w * p_b + (1 - w) * softmax(concat(p_g, p_b) W + b), with w = logistic(weight_logit)."""
    wt = tape.sigmoid(weight_logit)
    learned = tape.softmax(tape.affine(tape.concat([p_g, p_b], axis=-1), w, b))
    return tape.add(tape.mul(wt, p_b), tape.mul(tape.one_minus(wt), learned))


def fuse_results(tape: Tape, p_b: Var, p_g: Var, params: ParameterTape) -> Var:
    """Fused (B, N+1, C) distributions; row 0 uses the disease coefficients."""
    _check_rows("BN marginal", p_b.value)
    _check_rows("GCN prediction", p_g.value)
    leaf = params.leaf
    disease = residual_fuse(
        tape,
        tape.take(p_b, (slice(None), slice(0, 1))),
        tape.take(p_g, (slice(None), slice(0, 1))),
        leaf("fusion.disease_logit"),
        leaf("fusion.w0"),
        leaf("fusion.b0"),
    )
    attrs = residual_fuse(
        tape,
        tape.take(p_b, (slice(None), slice(1, None))),
        tape.take(p_g, (slice(None), slice(1, None))),
        leaf("fusion.attr_logit"),
        leaf("fusion.w0_attr"),
        leaf("fusion.b0_attr"),
    )
    return tape.concat([disease, attrs], axis=1)


def bn_marginals(tape: Tape, net: BayesianNetwork, evidence: Var, differentiable: bool = True,
                 schedule: Schedule | None = None, max_steps: int = 200, tol: float = 1e-10) -> Var:
    """Belief propagation as a tape operation over a batch of evidence (B, N+1, C).

    The backward pass replays the recorded propagation steps in reverse
    (chained per-step Jacobians applied to the output cotangent); CPTs are
    constants.
    """
    sched = schedule or Schedule(net)
    state, steps, _, traj = propagate(sched, evidence.value, max_steps, tol, record=differentiable)
    marg = state[:, sched.marginal_slots].copy()
    if not differentiable:
        return tape.record(marg, (evidence,), lambda g: (None,))
    return tape.record(marg, (evidence,), lambda g: (replay_vjp(sched, traj, g),))


def final_bn_predict(tape: Tape, bn2: BayesianNetwork, fused: Var, differentiable: bool = True,
                     schedule: Schedule | None = None, max_steps: int = 200, tol: float = 1e-10) -> Var:
    """Disease-node marginal of the second network given fused evidence, (B, C)."""
    marg = bn_marginals(tape, bn2, fused, differentiable, schedule, max_steps, tol)
    return tape.take(marg, (slice(None), DISEASE))
