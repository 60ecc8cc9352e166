"""Discrete Bayesian networks over graded variables.

Grades are 1-indexed in every public signature (``1..C``) and 0-indexed in
array storage.  Node 0 is the disease node by convention; nodes ``1..N`` are
attributes.

A CPT for node ``i`` with parents ``(p_1, ..., p_k)`` is stored as an array of
shape ``(C,) * k + (C,)``: the leading axes index the parent grades in the
order of ``parents[i]`` and the last axis indexes the child grade.  Flattening
the leading axes in C order gives the ``C**k`` rows of the JSON layout.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ROW_SUM_TOL = 1e-12
EVIDENCE_TOL = 1e-9
MAX_ENUMERATION = 10**7


class NetworkError(ValueError):
    """Raised when a network violates one or more structural invariants."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class CapacityError(ValueError):
    pass


def topological_order(parents: Sequence[Sequence[int]]) -> list[int] | None:
    """Kahn's algorithm with the smallest ready index first; None on a cycle."""
    n = len(parents)
    indeg = [len(set(p)) for p in parents]
    children = [[] for _ in range(n)]
    for child, ps in enumerate(parents):
        for p in set(ps):
            children[p].append(child)
    ready = sorted(i for i in range(n) if indeg[i] == 0)
    order = []
    while ready:
        v = ready.pop(0)
        order.append(v)
        for c in children[v]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
        ready.sort()
    return order if len(order) == n else None


def _cycle_nodes(parents: Sequence[Sequence[int]]) -> list[int]:
    # Nodes left after repeatedly stripping sources and sinks lie on or between cycles.
    alive = set(range(len(parents)))
    edges = {(p, c) for c, ps in enumerate(parents) for p in ps}
    changed = True
    while changed:
        changed = False
        for v in sorted(alive):
            has_in = any(p in alive for p, c in edges if c == v)
            has_out = any(c in alive for p, c in edges if p == v)
            if not (has_in and has_out):
                alive.discard(v)
                changed = True
    return sorted(alive)


@dataclass(frozen=True, eq=False)
class BayesianNetwork:
    """A DAG with one conditional probability table per node.

    Construct through :meth:`from_rows` or directly with array-shaped CPTs;
    the constructor validates every invariant and raises :class:`NetworkError`
    listing all violations.
    """

    grades: int
    parents: tuple[tuple[int, ...], ...]
    cpts: tuple[np.ndarray, ...]
    order: tuple[int, ...] = field(init=False, repr=False)

    def __init__(self, grades: int, parents, cpts, validate: bool = True):
        parents = tuple(tuple(int(p) for p in ps) for ps in parents)
        arrays = []
        for table in cpts:
            arr = np.array(table, dtype=float)
            arr.setflags(write=False)
            arrays.append(arr)
        object.__setattr__(self, "grades", int(grades))
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "cpts", tuple(arrays))
        order = validate_network(self) if validate else topological_order(parents)
        object.__setattr__(self, "order", tuple(order or ()))

    @classmethod
    def from_rows(cls, grades: int, parents, rows) -> "BayesianNetwork":
        """Build from the JSON row layout (``C**k`` rows per node)."""
        cpts = []
        for ps, r in zip(parents, rows):
            arr = np.asarray(r, dtype=float)
            shape = (grades,) * (len(ps) + 1)
            # wrong sizes are left as-is so validation can report them
            cpts.append(arr.reshape(shape) if arr.size == grades ** (len(ps) + 1) else arr)
        return cls(grades, parents, cpts)

    @property
    def node_count(self) -> int:
        return len(self.parents)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(p, c) for c, ps in enumerate(self.parents) for p in ps]

    def children(self, node: int) -> list[int]:
        return [c for c, ps in enumerate(self.parents) if node in ps]

    def cpt_rows(self, node: int) -> np.ndarray:
        return self.cpts[node].reshape(-1, self.grades)

    def is_polytree(self) -> bool:
        """True when the undirected skeleton is a forest."""
        root = list(range(self.node_count))

        def find(a):
            while root[a] != a:
                root[a] = root[root[a]]
                a = root[a]
            return a

        for p, c in self.edges:
            a, b = find(p), find(c)
            if a == b:
                return False
            root[a] = b
        return True

    def to_dict(self) -> dict:
        return {
            "nodes": self.node_count,
            "grades": self.grades,
            "parents": [list(ps) for ps in self.parents],
            "cpts": [self.cpt_rows(i).tolist() for i in range(self.node_count)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BayesianNetwork":
        for key in ("nodes", "grades", "parents", "cpts"):
            if key not in d:
                raise NetworkError([f"missing field '{key}'"])
        if len(d["parents"]) != d["nodes"] or len(d["cpts"]) != d["nodes"]:
            raise NetworkError([f"'nodes'={d['nodes']} disagrees with parents/cpts lengths"])
        return cls.from_rows(d["grades"], d["parents"], d["cpts"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "BayesianNetwork":
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, BayesianNetwork):
            return NotImplemented
        return (
            self.grades == other.grades
            and self.parents == other.parents
            and all(np.array_equal(a, b) for a, b in zip(self.cpts, other.cpts))
        )

    __hash__ = None


def validate_network(net: BayesianNetwork) -> list[int]:
    """Return a topological order, or raise NetworkError listing every problem."""
    problems = []
    n = len(net.parents)
    C = net.grades
    if C < 2:
        problems.append(f"grades must be >= 2, got {C}")
    if len(net.cpts) != n:
        problems.append(f"{len(net.cpts)} CPTs for {n} nodes")
    for i, ps in enumerate(net.parents):
        bad = [p for p in ps if not 0 <= p < n]
        if bad:
            problems.append(f"node {i}: parent index out of range {bad}")
        if len(set(ps)) != len(ps):
            problems.append(f"node {i}: duplicate parents {list(ps)}")
        if i in ps:
            problems.append(f"node {i}: self loop")
    if not problems:
        order = topological_order(net.parents)
        if order is None:
            problems.append(f"cycle detected among nodes {_cycle_nodes(net.parents)}")
    for i, table in enumerate(net.cpts[:n]):
        k = len(net.parents[i])
        expected = (C,) * (k + 1)
        if table.shape != expected:
            problems.append(
                f"node {i}: CPT shape {table.shape} but expected {C**k} rows of length {C}"
            )
            continue
        rows = table.reshape(-1, C)
        if not np.all(np.isfinite(rows)) or rows.min() < 0 or rows.max() > 1:
            problems.append(f"node {i}: CPT entries outside [0, 1]")
        sums = rows.sum(axis=1)
        for r in np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOL):
            problems.append(f"node {i}: CPT row {int(r)} sums to {sums[r]:.12g}, not 1")
    if problems:
        raise NetworkError(problems)
    return order


def check_evidence(evidence, node_count: int, grades: int, tol: float = EVIDENCE_TOL) -> np.ndarray:
    """Validate an (N+1, C) row-stochastic evidence matrix and return it as float array."""
    ev = np.asarray(evidence, dtype=float)
    if ev.shape != (node_count, grades):
        raise ValueError(f"evidence shape {ev.shape} != ({node_count}, {grades})")
    if ev.min() < 0 or ev.max() > 1 or not np.all(np.isfinite(ev)):
        raise ValueError("evidence entries must lie in [0, 1]")
    bad = np.flatnonzero(np.abs(ev.sum(axis=1) - 1.0) > tol)
    if bad.size:
        raise ValueError(f"evidence rows {bad.tolist()} do not sum to 1")
    return ev


def uniform_evidence(node_count: int, grades: int) -> np.ndarray:
    return np.full((node_count, grades), 1.0 / grades)


def one_hot(grades_1based: Sequence[int], C: int) -> np.ndarray:
    g = np.asarray(grades_1based, dtype=int)
    if g.min() < 1 or g.max() > C:
        raise ValueError(f"grades must lie in [1, {C}]")
    out = np.zeros((g.size, C))
    out[np.arange(g.size), g - 1] = 1.0
    return out


def joint_probability(net: BayesianNetwork, assignment: Sequence[int]) -> float:
    """Product of CPT entries for a full 1-based grade assignment."""
    if len(assignment) != net.node_count:
        raise ValueError(f"assignment has {len(assignment)} grades for {net.node_count} nodes")
    a = [int(g) - 1 for g in assignment]
    for i, g in enumerate(a):
        if not 0 <= g < net.grades:
            raise ValueError(f"grade {g + 1} of node {i} outside [1, {net.grades}]")
    p = 1.0
    for i, ps in enumerate(net.parents):
        p *= float(net.cpts[i][tuple(a[j] for j in ps) + (a[i],)])
    return p


def joint_table(net: BayesianNetwork) -> np.ndarray:
    """Full joint distribution as an array with one axis per node (0-based grades)."""
    n, C = net.node_count, net.grades
    if C**n > MAX_ENUMERATION:
        raise CapacityError(f"{C}**{n} assignments exceed the enumeration limit {MAX_ENUMERATION}")
    joint = np.ones((C,) * n)
    for i, ps in enumerate(net.parents):
        shape = [1] * n
        for j in ps:
            shape[j] = C
        shape[i] = C
        # CPT axes are (parents..., child); move them to node positions
        axes = list(ps) + [i]
        t = np.moveaxis(net.cpts[i], range(len(axes)), np.argsort(np.argsort(axes)))
        joint = joint * t.reshape(shape)
    return joint


def weighted_posterior(net: BayesianNetwork, weights: np.ndarray) -> np.ndarray:
    """Posterior marginals with per-node likelihood weights; rows need not be normalized.

    This is the exhaustive-summation definition used as the reference for
    belief propagation; it also serves finite-difference checks where
    evidence rows are perturbed off the simplex.
    """
    n = net.node_count
    table = joint_table(net)
    for i in range(n):
        shape = [1] * n
        shape[i] = net.grades
        table = table * np.asarray(weights[i], dtype=float).reshape(shape)
    out = np.empty((n, net.grades))
    for i in range(n):
        m = table.sum(axis=tuple(j for j in range(n) if j != i))
        z = m.sum()
        if z <= 0:
            raise ValueError(f"evidence has zero probability under the network (node {i})")
        out[i] = m / z
    return out


def brute_force_posterior(net: BayesianNetwork, evidence) -> np.ndarray:
    """P(v_i | evidence) for every node by summing the joint over all assignments."""
    ev = check_evidence(evidence, net.node_count, net.grades)
    return weighted_posterior(net, ev)


def prior_marginals(net: BayesianNetwork) -> np.ndarray:
    return weighted_posterior(net, uniform_evidence(net.node_count, net.grades))


def all_assignments(net: BayesianNetwork):
    """Iterate over every 1-based assignment (small networks only)."""
    return itertools.product(range(1, net.grades + 1), repeat=net.node_count)


def permute_network(net: BayesianNetwork, perm: Sequence[int]) -> BayesianNetwork:
    """Relabel nodes so that old node ``i`` becomes new node ``perm[i]``."""
    n = net.node_count
    inv = [0] * n
    for old, new in enumerate(perm):
        inv[new] = old
    parents, cpts = [], []
    for new in range(n):
        old = inv[new]
        parents.append(tuple(perm[p] for p in net.parents[old]))
        cpts.append(net.cpts[old])
    return BayesianNetwork(net.grades, parents, cpts)
