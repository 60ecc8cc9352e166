import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridbn.bn_core import (
    BayesianNetwork, CapacityError, NetworkError, all_assignments, brute_force_posterior, joint_probability,
    joint_table, one_hot, permute_network, prior_marginals, topological_order, uniform_evidence,
    validate_network,
)

from conftest import random_cpts, random_evidence, random_polytree, two_node_net


def uniform_net(n, C, parents):
    return BayesianNetwork(C, parents, [np.full((C,) * (len(p) + 1), 1.0 / C) for p in parents])


def test_joint_probability_hand_product():
    assert joint_probability(two_node_net(), (1, 2)) == pytest.approx(0.06, abs=1e-15)


def test_joint_probability_uniform_cpts():
    net = uniform_net(3, 3, [(), (0,), (0, 1)])
    for a in all_assignments(net):
        assert joint_probability(net, a) == pytest.approx(3.0**-3, rel=1e-12)


def test_joint_probability_single_node():
    net = BayesianNetwork(2, [()], [np.array([0.3, 0.7])])
    assert joint_probability(net, (2,)) == pytest.approx(0.7)


def test_joint_probability_rejects_bad_grades():
    with pytest.raises(ValueError):
        joint_probability(two_node_net(), (0, 1))
    with pytest.raises(ValueError):
        joint_probability(two_node_net(), (1, 3))
    with pytest.raises(ValueError):
        joint_probability(two_node_net(), (1,))


def test_posterior_hard_evidence_on_child():
    post = brute_force_posterior(two_node_net(), [[0.5, 0.5], [0.0, 1.0]])
    np.testing.assert_allclose(post[0], np.array([0.06, 0.32]) / 0.38, atol=1e-12)
    np.testing.assert_allclose(post[1], [0.0, 1.0], atol=1e-15)


def test_uniform_evidence_gives_prior_marginals(rng):
    net = random_polytree(rng, 4, 3)
    post = brute_force_posterior(net, uniform_evidence(4, 3))
    # independent oracle: sum joint_probability over assignments
    direct = np.zeros((4, 3))
    for a in all_assignments(net):
        p = joint_probability(net, a)
        for i, g in enumerate(a):
            direct[i, g - 1] += p
    np.testing.assert_allclose(post, direct, atol=1e-12)
    np.testing.assert_allclose(prior_marginals(net), direct, atol=1e-12)


def test_hard_evidence_everywhere_returns_one_hots(rng):
    net = random_polytree(rng, 4, 3)
    grades = [2, 1, 3, 3]
    post = brute_force_posterior(net, one_hot(grades, 3))
    np.testing.assert_array_equal(post, one_hot(grades, 3))


def test_capacity_error():
    net = uniform_net(24, 2, [()] * 24)
    with pytest.raises(CapacityError):
        joint_table(net)


def test_chain_order():
    net = uniform_net(3, 2, [(), (0,), (1,)])
    assert validate_network(net) == [0, 1, 2]


def test_two_cycle_names_both_nodes():
    with pytest.raises(NetworkError) as err:
        uniform_net(2, 2, [(1,), (0,)])
    assert "cycle" in str(err.value)
    assert "[0, 1]" in str(err.value)


def test_bad_row_sum_names_node_and_row():
    cpt = np.array([[0.5, 0.5], [0.5, 0.4]])
    with pytest.raises(NetworkError) as err:
        BayesianNetwork(2, [(), (0,)], [np.array([0.5, 0.5]), cpt])
    assert "node 1" in str(err.value) and "row 1" in str(err.value)


def test_every_problem_is_reported():
    with pytest.raises(NetworkError) as err:
        BayesianNetwork(2, [(), (0,)], [np.array([0.5, 0.6]), np.array([0.5, 0.5])])
    assert len(err.value.problems) == 2


def test_wrong_row_count_via_rows():
    with pytest.raises(NetworkError):
        BayesianNetwork.from_rows(2, [(), (0,)], [[[0.5, 0.5]], [[0.5, 0.5]]])


def test_topological_order_none_on_cycle():
    assert topological_order([(2,), (0,), (1,)]) is None


def test_json_round_trip_is_exact(rng):
    net = random_polytree(rng, 5, 4)
    text = net.to_json()
    back = BayesianNetwork.from_json(text)
    assert back == net
    assert back.to_json() == text
    d = json.loads(text)
    assert set(d) == {"nodes", "grades", "parents", "cpts"}
    assert len(d["cpts"][1]) == 4 ** len(d["parents"][1])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 5), C=st.integers(2, 3))
def test_joint_sums_to_one(seed, n, C):
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    parents = []
    for k in range(n):
        parents.append(())
    for k, v in enumerate(order):
        earlier = [int(u) for u in order[:k] if rng.random() < 0.5][:2]
        parents[v] = tuple(sorted(earlier))
    net = random_cpts(rng, parents, C)
    assert abs(sum(joint_probability(net, a) for a in all_assignments(net)) - 1.0) < 1e-9
    assert abs(joint_table(net).sum() - 1.0) < 1e-9


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 5))
def test_posterior_permutation_invariance(seed, n):
    rng = np.random.default_rng(seed)
    net = random_polytree(rng, n, 3)
    ev = random_evidence(rng, n, 3)
    perm = [int(p) for p in rng.permutation(n)]
    pnet = permute_network(net, perm)
    pev = np.empty_like(ev)
    pev[perm] = ev
    np.testing.assert_allclose(brute_force_posterior(pnet, pev)[perm], brute_force_posterior(net, ev), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_joint_table_matches_products(seed):
    rng = np.random.default_rng(seed)
    net = random_polytree(rng, 4, 2)
    table = joint_table(net)
    for a in itertools.product((1, 2), repeat=4):
        assert table[tuple(g - 1 for g in a)] == pytest.approx(joint_probability(net, a), rel=1e-12)
