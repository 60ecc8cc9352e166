"""Exact BIC structure search and maximum-likelihood CPTs from hard or soft labels.

Soft labels contribute expected counts: a sample adds the product of its
per-node grade probabilities to every cell of a family's count table.  With
one-hot labels this is ordinary counting.

Family log-likelihoods are written as differences of the terms
``T(A) = sum_a N(a) log(N(a) / S)`` over variable sets ``A``, cached per set.
Markov-equivalent DAGs then produce the same multiset of terms, and
``math.fsum`` gives them bit-identical scores.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .bn_core import BayesianNetwork, topological_order
from .dataset import LabelDataset

MAX_DP_NODES = 16


@dataclass(frozen=True)
class StructureSearchConfig:
    max_in_degree: int = 2
    equivalent_sample_size: float = 1.0
    tie_break: str = "lexicographic"

    def __post_init__(self):
        if self.max_in_degree < 0:
            raise ValueError("max_in_degree must be >= 0")
        if self.equivalent_sample_size < 0:
            raise ValueError("equivalent_sample_size must be >= 0")
        if self.tie_break != "lexicographic":
            raise ValueError(f"unknown tie_break rule {self.tie_break!r}")


def _as_samples(data) -> np.ndarray:
    arr = data.samples if isinstance(data, LabelDataset) else np.asarray(data, dtype=float)
    if arr.ndim != 3 or arr.shape[0] == 0:
        raise ValueError("dataset is empty")
    return arr


def expected_counts(samples: np.ndarray, variables) -> np.ndarray:
    """Soft count table over ``variables`` (in the given order)."""
    variables = list(variables)
    if not variables:
        return np.array(float(samples.shape[0]))
    letters = "abcdefghijklmnop"[: len(variables)]
    subs = ",".join("s" + l for l in letters) + "->" + letters
    return np.einsum(subs, *(samples[:, v] for v in variables))


def fit_cpts_mle(structure, data, smoothing: float = 1.0) -> BayesianNetwork:
    """CPT[u, x] = (N(u, x) + s) / (N(u) + C s); uniform where a row has no mass."""
    samples = _as_samples(data)
    n, C = samples.shape[1], samples.shape[2]
    parents = [tuple(ps) for ps in structure]
    if len(parents) != n:
        raise ValueError(f"structure has {len(parents)} nodes, data has {n}")
    if topological_order(parents) is None:
        raise ValueError("structure is cyclic")
    cpts = []
    for i, ps in enumerate(parents):
        counts = expected_counts(samples, list(ps) + [i]) + smoothing
        totals = counts.sum(axis=-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            table = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 1.0 / C)
        cpts.append(table)
    return BayesianNetwork(C, parents, cpts)


class FamilyScorer:
    """Cached BIC pieces for one dataset."""

    def __init__(self, data):
        self.samples = _as_samples(data)
        self.S, self.n, self.C = self.samples.shape
        self.log_s = math.log(self.S)
        self._terms: dict[frozenset, float] = {}

    def term(self, variables) -> float:
        key = frozenset(variables)
        if key not in self._terms:
            if not key:
                self._terms[key] = 0.0
            else:
                N = expected_counts(self.samples, sorted(key)).ravel()
                N = N[N > 0]
                self._terms[key] = float(np.dot(N, np.log(N / self.S)))
        return self._terms[key]

    def free_parameters(self, k: int) -> int:
        return self.C**k * (self.C - 1)

    def log_likelihood_terms(self, node: int, parents) -> tuple[float, float]:
        return self.term(set(parents) | {node}), -self.term(parents)

    def family_score(self, node: int, parents) -> float:
        plus, minus = self.log_likelihood_terms(node, parents)
        return plus + minus - 0.5 * self.free_parameters(len(parents)) * self.log_s

    def score(self, structure) -> float:
        terms = []
        k = 0
        for i, ps in enumerate(structure):
            terms.extend(self.log_likelihood_terms(i, ps))
            k += self.free_parameters(len(ps))
        return math.fsum(terms) - 0.5 * k * self.log_s

    def log_likelihood(self, structure) -> float:
        terms = []
        for i, ps in enumerate(structure):
            terms.extend(self.log_likelihood_terms(i, ps))
        return math.fsum(terms)


def bic_score(structure, data) -> float:
    """Expected log-likelihood under MLE CPTs minus (k/2) ln S."""
    samples = _as_samples(data)
    if len(structure) != samples.shape[1]:
        raise ValueError(f"structure has {len(structure)} nodes, data has {samples.shape[1]}")
    return FamilyScorer(samples).score(structure)


def _candidate_sets(n: int, node: int, k: int) -> list[tuple[int, ...]]:
    others = [v for v in range(n) if v != node]
    sets = [c for r in range(min(k, len(others)) + 1) for c in itertools.combinations(others, r)]
    return sorted(sets)


def search_structure(data, cfg: StructureSearchConfig = StructureSearchConfig()):
    """Score-maximal parent lists and their BIC, by DP over node subsets.

    For every node the best parent set inside each candidate subset is
    tabulated; a second pass over subsets picks the best sink.  Among exact
    score ties the lexicographically smallest parent set (and then the
    lowest-index sink) wins.
    """
    scorer = FamilyScorer(data)
    n = scorer.n
    if n > MAX_DP_NODES:
        raise ValueError(f"{n} nodes exceed the exact search capacity of {MAX_DP_NODES}")
    full = 1 << n
    subsets = np.arange(full, dtype=np.int64)
    best_score = np.empty((n, full))
    best_set = np.empty((n, full), dtype=np.int64)
    cands = []
    for v in range(n):
        sets = _candidate_sets(n, v, cfg.max_in_degree)
        masks = np.array([sum(1 << p for p in s) for s in sets], dtype=np.int64)
        scores = np.array([scorer.family_score(v, s) for s in sets])
        allowed = (masks[:, None] & ~subsets[None, :]) == 0
        table = np.where(allowed, scores[:, None], -np.inf)
        idx = np.argmax(table, axis=0)  # first maximum: lexicographically smallest set
        best_score[v] = table[idx, subsets]
        best_set[v] = idx
        cands.append(sets)

    local = best_score.tolist()
    total = [0.0] * full
    sink = [-1] * full
    for W in range(1, full):
        best, arg = -math.inf, -1
        w = W
        while w:
            low = w & -w
            v = low.bit_length() - 1
            rest = W ^ low
            s = total[rest] + local[v][rest]
            if s > best:
                best, arg = s, v
            w ^= low
        total[W] = best
        sink[W] = arg

    parents: list[tuple[int, ...]] = [()] * n
    W = full - 1
    while W:
        v = sink[W]
        rest = W ^ (1 << v)
        parents[v] = cands[v][int(best_set[v, rest])]
        W = rest
    return parents, scorer.score(parents)


def learn_structure(data, cfg: StructureSearchConfig = StructureSearchConfig()) -> BayesianNetwork:
    parents, _ = search_structure(data, cfg)
    return fit_cpts_mle(parents, data, cfg.equivalent_sample_size)


def skeleton(structure) -> set[frozenset]:
    return {frozenset((p, c)) for c, ps in enumerate(structure) for p in ps}


def skeleton_shd(a, b) -> int:
    """Structural Hamming distance between undirected skeletons."""
    return len(skeleton(a) ^ skeleton(b))
