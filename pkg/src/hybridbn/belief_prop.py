"""Synchronous Pearl belief propagation with Jacobian chaining.

Every quantity exchanged during propagation is a length-C vector held in a
numbered *slot*.  The slot layout of a network with ``n`` nodes and ``E``
edges is::

    [evidence (n) | lambda messages (E) | pi messages (E) | marginals (n)]

Evidence enters as the message of an auxiliary child, so it is carried from
step to step unchanged.  Each edge ``(u, x)`` owns two slots, the diagnostic
message ``lambda_x(u)`` sent from child ``x`` to parent ``u`` and the causal
message ``pi_x(u)`` sent from ``u`` to ``x``; both are vectors over the grades
of the parent ``u``.

Every update is ``normalize(contract(CPT, inputs))`` where the contraction is
multilinear in its input messages.  That gives one einsum per update for the
forward step, and the derivative with respect to any one input is the same
contraction with that input replaced by the output cotangent.
"""
from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse

from .bn_core import BayesianNetwork, check_evidence

LOOPY_DAMPING = 0.5
DENSE_LIMIT = 64


class DegenerateEvidenceError(ValueError):
    """An update produced an all-zero vector (evidence impossible under the CPTs)."""


class GradientContractError(ValueError):
    pass


class ConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class _Update:
    kind: str  # "marginal", "lambda" or "pi"
    node: int
    out: int
    out_letter: str
    inputs: tuple[tuple[int, str], ...]
    factor: int  # index of the node whose CPT is contracted
    factor_sub: str
    damping: float

    @cached_property
    def forward_sub(self) -> str:
        ins = ",".join("Z" + l for _, l in self.inputs)
        return f"{self.factor_sub},{ins}->Z{self.out_letter}"

    def vjp_sub(self, k: int) -> str:
        return self.vjp_subs[k]

    @cached_property
    def vjp_subs(self) -> tuple[str, ...]:
        subs = []
        for k in range(len(self.inputs)):
            others = [("Z" + l) for j, (_, l) in enumerate(self.inputs) if j != k]
            ops = ",".join([self.factor_sub] + others + ["Z" + self.out_letter])
            subs.append(f"{ops}->Z{self.inputs[k][1]}")
        return tuple(subs)


class Schedule:
    """Slot layout and update list compiled from a network's topology."""

    def __init__(self, net: BayesianNetwork, damping: float | None = None):
        self.net = net
        n = net.node_count
        C = net.grades
        self.n, self.C = n, C
        self.edges = net.edges
        E = len(self.edges)
        self.lam_slot = {e: n + k for k, e in enumerate(self.edges)}
        self.pi_slot = {e: n + E + k for k, e in enumerate(self.edges)}
        self.n_slots = 2 * n + 2 * E
        self.polytree = net.is_polytree()
        if damping is None:
            damping = 0.0 if self.polytree else LOOPY_DAMPING
        self.damping = damping
        self.diameter = _skeleton_diameter(n, self.edges)
        self.min_steps = self.diameter + 1

        updates = []
        for x in range(n):
            parents = net.parents[x]
            children = net.children(x)
            letters = [chr(ord("a") + i) for i in range(len(parents))]
            fsub = "".join(letters) + "x"
            lam_in = [(self.evidence_slot(x), "x")] + [(self.lam_slot[(x, y)], "x") for y in children]
            pi_in = [(self.pi_slot[(u, x)], letters[i]) for i, u in enumerate(parents)]
            updates.append(
                _Update("marginal", x, self.marginal_slot(x), "x", tuple(lam_in + pi_in), x, fsub, 0.0)
            )
            for i, u in enumerate(parents):
                ins = lam_in + [p for k, p in enumerate(pi_in) if k != i]
                updates.append(
                    _Update("lambda", x, self.lam_slot[(u, x)], letters[i], tuple(ins), x, fsub, damping)
                )
            for j, y in enumerate(children):
                ins = [lam_in[0]] + [l for k, l in enumerate(lam_in[1:]) if k != j] + pi_in
                updates.append(
                    _Update("pi", x, self.pi_slot[(x, y)], "x", tuple(ins), x, fsub, damping)
                )
        self.updates = updates
        self.message_slots = np.arange(n, n + 2 * E)
        self.marginal_slots = np.arange(n + 2 * E, 2 * n + 2 * E)

    def evidence_slot(self, i: int) -> int:
        return i

    def marginal_slot(self, i: int) -> int:
        return self.n + 2 * len(self.edges) + i

    def slot_names(self) -> list[str]:
        names = [f"evidence[{i}]" for i in range(self.n)]
        names += [f"lambda[{c}->{p}]" for p, c in self.edges]
        names += [f"pi[{p}->{c}]" for p, c in self.edges]
        names += [f"marginal[{i}]" for i in range(self.n)]
        return names

    def initial(self, evidence: np.ndarray) -> np.ndarray:
        """Batched initial state (B, slots, C): uniform messages and marginals."""
        B = evidence.shape[0]
        state = np.full((B, self.n_slots, self.C), 1.0 / self.C)
        state[:, : self.n] = evidence
        return state

    def step(self, state: np.ndarray) -> np.ndarray:
        """One synchronous update; reads only the time-t values in ``state``."""
        new = state.copy()
        cpts = self.net.cpts
        for up in self.updates:
            g = np.einsum(up.forward_sub, cpts[up.factor], *(state[:, s] for s, _ in up.inputs))
            z = g.sum(axis=1, keepdims=True)
            if np.any(z <= 0):
                b = int(np.flatnonzero(z[:, 0] <= 0)[0])
                raise DegenerateEvidenceError(
                    f"zero normalizer at node {up.node} ({up.kind} update, sample {b})"
                )
            msg = g / z
            if up.damping:
                msg = (1.0 - up.damping) * msg + up.damping * state[:, up.out]
            new[:, up.out] = msg
        return new

    def step_vjp(self, state: np.ndarray, cot: np.ndarray) -> np.ndarray:
        """Pull a cotangent on the time-(t+1) state back to the time-t state."""
        back = np.zeros_like(cot)
        back[:, : self.n] += cot[:, : self.n]
        cpts = self.net.cpts
        for up in self.updates:
            a = cot[:, up.out]
            if not a.any():
                continue
            vals = [state[:, s] for s, _ in up.inputs]
            g = np.einsum(up.forward_sub, cpts[up.factor], *vals)
            z = g.sum(axis=1, keepdims=True)
            msg = g / z
            if up.damping:
                back[:, up.out] += up.damping * a
                a = (1.0 - up.damping) * a
            # d(g/sum g): (I - n 1^T) / sum g, applied transposed
            gbar = (a - np.sum(a * msg, axis=1, keepdims=True)) / z
            for k, (slot, _) in enumerate(up.inputs):
                others = [v for j, v in enumerate(vals) if j != k]
                back[:, slot] += np.einsum(up.vjp_subs[k], cpts[up.factor], *others, gbar)
        return back

    def local_jacobian(self, state: np.ndarray):
        """Per-step Jacobian J_t of a single-sample state, in flattened slot order.

        Returned sparse (CSR) unless the system is small enough for dense storage.
        """
        C = self.C
        size = self.n_slots * C
        rows, cols, vals = [], [], []

        def put(r_slot, c_slot, block):
            rr, cc = np.meshgrid(np.arange(C), np.arange(C), indexing="ij")
            rows.append((r_slot * C + rr).ravel())
            cols.append((c_slot * C + cc).ravel())
            vals.append(block.ravel())

        eye = np.eye(C)
        for i in range(self.n):
            put(i, i, eye)
        cpts = self.net.cpts
        single = state.reshape(1, self.n_slots, C)
        for up in self.updates:
            here = [single[:, s] for s, _ in up.inputs]
            g = np.einsum(up.forward_sub, cpts[up.factor], *here)[0]
            vals_in = [np.repeat(v, C, axis=0) for v in here]
            z = g.sum()
            msg = g / z
            jnorm = (eye - msg[:, None]) / z
            scale = 1.0 - up.damping
            if up.damping:
                put(up.out, up.out, up.damping * eye)
            for k, (slot, _) in enumerate(up.inputs):
                others = [v for j, v in enumerate(vals_in) if j != k]
                # row c of dg/dv_k is the vjp of the basis cotangent e_c
                dg = np.einsum(up.vjp_sub(k), cpts[up.factor], *others, eye)
                put(up.out, slot, scale * jnorm @ dg)
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        v = np.concatenate(vals)
        mat = sparse.coo_matrix((v, (r, c)), shape=(size, size)).tocsr()
        return mat.toarray() if size < DENSE_LIMIT else mat


def _skeleton_diameter(n: int, edges) -> int:
    adj = [[] for _ in range(n)]
    for p, c in edges:
        adj[p].append(c)
        adj[c].append(p)
    best = 0
    for s in range(n):
        dist = {s: 0}
        q = deque([s])
        while q:
            v = q.popleft()
            for w in adj[v]:
                if w not in dist:
                    dist[w] = dist[v] + 1
                    q.append(w)
        best = max(best, max(dist.values()))
    return best


@dataclass
class MessageState:
    """All messages and marginals of one sample at propagation step ``step``."""

    schedule: Schedule
    values: np.ndarray  # (slots, C)
    step: int = 0

    @property
    def marginals(self) -> np.ndarray:
        return self.values[self.schedule.marginal_slots]

    @property
    def evidence_lambdas(self) -> np.ndarray:
        return self.values[: self.schedule.n]

    @property
    def lambda_msgs(self) -> dict:
        return {e: self.values[s] for e, s in self.schedule.lam_slot.items()}

    @property
    def pi_msgs(self) -> dict:
        return {e: self.values[s] for e, s in self.schedule.pi_slot.items()}

    @property
    def message_count(self) -> int:
        return self.values.shape[0] - self.schedule.n

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "marginals": self.marginals.tolist(),
            "evidence": self.evidence_lambdas.tolist(),
            "lambda": [
                {"from": c, "to": p, "values": self.values[s].tolist()}
                for (p, c), s in self.schedule.lam_slot.items()
            ],
            "pi": [
                {"from": p, "to": c, "values": self.values[s].tolist()}
                for (p, c), s in self.schedule.pi_slot.items()
            ],
        }


def initial_state(net: BayesianNetwork, evidence, schedule: Schedule | None = None) -> MessageState:
    sched = schedule or Schedule(net)
    ev = check_evidence(evidence, net.node_count, net.grades)
    return MessageState(sched, sched.initial(ev[None])[0], 0)


def bp_step(net: BayesianNetwork, state: MessageState) -> MessageState:
    sched = state.schedule
    if sched.net is not net and (sched.net.parents != net.parents):
        raise ValueError("message state was built for a different network")
    new = sched.step(state.values[None])[0]
    return MessageState(sched, new, state.step + 1)


@dataclass
class BpResult:
    marginals: np.ndarray
    steps_used: int
    converged: bool
    evidence: np.ndarray
    trajectory: np.ndarray | None = None  # (steps+1, B, slots, C) when recorded

    def __iter__(self):
        # allows ``marginals, steps = bp_infer(...)``
        return iter((self.marginals, self.steps_used))


def propagate(
    sched: Schedule,
    evidence: np.ndarray,
    max_steps: int = 200,
    tol: float = 1e-10,
    record: bool = False,
    fixed_steps: int | None = None,
):
    """Batched propagation over evidence of shape (B, n, C).

    Stops at the first step ``t >= diameter + 1`` whose messages moved less
    than ``tol`` from step ``t - 1``; the marginals of step ``t`` were then
    computed from fixed-point messages.  ``fixed_steps`` replays an exact
    number of steps instead.
    """
    state = sched.initial(evidence)
    traj = [state] if record else None
    msg = sched.message_slots
    converged = False
    limit = fixed_steps if fixed_steps is not None else max_steps
    t = 0
    while t < limit:
        new = sched.step(state)
        t += 1
        if record:
            traj.append(new)
        delta = np.max(np.abs(new[:, msg] - state[:, msg])) if msg.size else 0.0
        state = new
        if fixed_steps is None and t >= sched.min_steps and delta < tol:
            converged = True
            break
    if fixed_steps is not None:
        converged = True
    return state, t, converged, (np.stack(traj) if record else None)


def bp_infer(
    net: BayesianNetwork,
    evidence,
    max_steps: int = 200,
    tol: float = 1e-10,
    schedule: Schedule | None = None,
) -> BpResult:
    """Marginal posteriors given soft evidence, by synchronous message passing.

    Non-convergence (possible on loopy networks) emits a
    :class:`ConvergenceWarning` and returns the last iterate.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    sched = schedule or Schedule(net)
    ev = check_evidence(evidence, net.node_count, net.grades)
    if max_steps < sched.min_steps:
        raise ValueError(f"max_steps={max_steps} below the {sched.min_steps} steps this graph needs")
    state, t, ok, _ = propagate(sched, ev[None], max_steps, tol)
    if not ok:
        warnings.warn(f"belief propagation did not converge in {max_steps} steps", ConvergenceWarning)
    return BpResult(state[0, sched.marginal_slots].copy(), t, ok, ev)


@dataclass
class BpJacobian:
    """Per-step Jacobians, their product, and the slot map that indexes them."""

    steps: list
    total: np.ndarray | sparse.spmatrix
    slot_names: list[str]
    grades: int
    evidence_cols: np.ndarray
    marginal_rows: np.ndarray

    @property
    def evidence_gradient(self) -> np.ndarray:
        """d marginal[i, g] / d evidence[j, h] as an (nC, nC) matrix."""
        sub = self.total[self.marginal_rows][:, self.evidence_cols]
        return sub.toarray() if sparse.issparse(sub) else np.asarray(sub)


def bp_jacobian(net: BayesianNetwork, evidence, steps) -> BpJacobian:
    """Chain the per-step Jacobians of the unrolled propagation.

    ``steps`` is the ``steps_used`` of a previous :func:`bp_infer` call or the
    :class:`BpResult` itself.
    """
    sched = Schedule(net)
    ev = np.asarray(evidence, dtype=float)
    if isinstance(steps, BpResult):
        if not np.array_equal(steps.evidence, ev):
            raise GradientContractError("evidence differs from the forward pass being replayed")
        steps = steps.steps_used
    if steps < sched.min_steps:
        raise GradientContractError(
            f"{steps} steps cannot be a completed forward pass; this graph needs at least {sched.min_steps}"
        )
    _, _, _, traj = propagate(sched, ev[None], record=True, fixed_steps=steps)
    per_step = [sched.local_jacobian(traj[t, 0]) for t in range(steps)]
    total = per_step[0]
    for J in per_step[1:]:
        total = J @ total
    C = net.grades
    ev_cols = np.arange(sched.n * C)
    m0 = sched.marginal_slot(0) * C
    marg_rows = np.arange(m0, m0 + sched.n * C)
    return BpJacobian(per_step, total, sched.slot_names(), C, ev_cols, marg_rows)


def bp_gradient(net: BayesianNetwork, evidence, steps) -> np.ndarray:
    """Jacobian of all marginals w.r.t. all evidence entries, shape (n, C, n, C)."""
    n, C = net.node_count, net.grades
    return bp_jacobian(net, evidence, steps).evidence_gradient.reshape(n, C, n, C)


def replay_vjp(sched: Schedule, trajectory: np.ndarray, marginal_cot: np.ndarray) -> np.ndarray:
    """Batched reverse pass: cotangent on final marginals -> cotangent on evidence.

    Equivalent to ``marginal_cot @ (J_T ... J_1)`` restricted to evidence
    columns, evaluated right-to-left as vector-Jacobian products.
    """
    steps = trajectory.shape[0] - 1
    cot = np.zeros_like(trajectory[-1])
    cot[:, sched.marginal_slots] = marginal_cot
    for t in range(steps - 1, -1, -1):
        cot = sched.step_vjp(trajectory[t], cot)
    return cot[:, : sched.n]
