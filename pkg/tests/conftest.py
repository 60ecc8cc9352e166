import itertools

import numpy as np
import pytest

from hybridbn.bn_core import BayesianNetwork


def random_polytree(rng, n, C, max_in=2, alpha=1.0):
    """Random polytree: each new node links to one earlier node in a random direction."""
    parents = [[] for _ in range(n)]
    for v in range(1, n):
        u = int(rng.integers(v))
        if rng.random() < 0.5 and len(parents[u]) < max_in:
            parents[u].append(v)
        else:
            parents[v].append(u)
    return random_cpts(rng, [tuple(sorted(p)) for p in parents], C, alpha)


def random_cpts(rng, parents, C, alpha=1.0):
    cpts = []
    for ps in parents:
        rows = rng.dirichlet(np.full(C, alpha), size=C ** len(ps))
        rows = np.maximum(rows, 1e-3)
        rows /= rows.sum(axis=1, keepdims=True)
        cpts.append(rows.reshape((C,) * len(ps) + (C,)))
    return BayesianNetwork(C, parents, cpts)


def random_evidence(rng, n, C, floor=0.05):
    ev = rng.random((n, C)) + floor
    return ev / ev.sum(axis=1, keepdims=True)


def two_node_net():
    """A -> B with P(A)=[0.6,0.4], P(B|A=1)=[0.9,0.1], P(B|A=2)=[0.2,0.8]."""
    return BayesianNetwork(2, [(), (0,)], [np.array([0.6, 0.4]), np.array([[0.9, 0.1], [0.2, 0.8]])])


def central_difference(f, x, h=1e-5):
    """Jacobian of f at x by central differences, shape f(x).shape + x.shape."""
    x = np.array(x, dtype=float)
    y0 = np.asarray(f(x))
    jac = np.zeros(y0.shape + x.shape)
    for idx in itertools.product(*map(range, x.shape)):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        jac[(Ellipsis,) + idx] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2 * h)
    return jac


def assert_close_rel(analytic, numeric, rel=1e-4, floor=1e-8):
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    bad = (diff > floor) & (diff > rel * scale)
    assert not bad.any(), f"{bad.sum()} entries off; worst abs diff {diff.max():.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
