"""Synthetic ground-truth networks, grade datasets and noisy feature vectors."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .bn_core import BayesianNetwork
from .dataset import LabelDataset, load_dataset, save_dataset  # noqa: F401  (re-exported)

STRUCTURES = ("random-polytree", "random-dag", "edgeless")


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters of a synthetic benchmark.

    ``disease_noise_sd`` overrides the noise level of the disease node's own
    features (None: same as the attributes).  A large value makes the
    diagnosis observable mainly through the attributes.
    ``train_pn_ratio`` / ``eval_pn_ratio`` fix the positive:negative ratio of
    the disease label (positive = upper grades, see :func:`positive_grades`)
    in the train and validation/test splits; ``None`` keeps the natural rate.
    """

    n_attributes: int = 8
    grades: int = 5
    structure: str = "random-polytree"
    max_in_degree: int = 2
    edge_prob: float = 0.4
    cpt_concentration: float = 1.0
    dominant_mass: float | None = None
    feature_dim: int = 4
    feature_noise_sd: float = 1.0
    disease_noise_sd: float | None = None
    seed: int = 0
    n_train: int = 400
    n_val: int = 200
    n_test: int = 400
    train_pn_ratio: float | None = None
    eval_pn_ratio: float | None = None

    def __post_init__(self):
        if self.n_attributes < 1:
            raise ValueError("n_attributes must be >= 1")
        if self.grades < 2:
            raise ValueError("grades must be >= 2")
        if self.feature_noise_sd < 0 or (self.disease_noise_sd is not None and self.disease_noise_sd < 0):
            raise ValueError("feature_noise_sd must be >= 0")
        if self.structure not in STRUCTURES:
            raise ValueError(f"structure must be one of {STRUCTURES}")
        if self.cpt_concentration <= 0:
            raise ValueError("cpt_concentration must be positive")
        if self.dominant_mass is not None and not 0 < self.dominant_mass < 1:
            raise ValueError("dominant_mass must lie in (0, 1)")

    @property
    def node_count(self) -> int:
        return self.n_attributes + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator fields {sorted(unknown)}")
        return cls(**d)


def positive_grades(C: int) -> np.ndarray:
    """1-based grades counted as a positive diagnosis: the strict upper half."""
    return np.arange(C // 2 + C % 2 + 1, C + 1)


def is_positive(disease_grades, C: int) -> np.ndarray:
    return np.asarray(disease_grades) > C // 2 + C % 2


def _random_structure(spec: GeneratorSpec, rng: np.random.Generator) -> list[tuple[int, ...]]:
    n = spec.node_count
    parents: list[list[int]] = [[] for _ in range(n)]
    if spec.structure == "random-polytree":
        # attach nodes one at a time to an earlier node; node 0 starts the tree
        order = [0] + list(rng.permutation(np.arange(1, n)))
        for k in range(1, n):
            new = int(order[k])
            old = int(order[rng.integers(k)])
            if rng.random() < 0.5 and len(parents[old]) < spec.max_in_degree:
                parents[old].append(new)
            else:
                parents[new].append(old)
    elif spec.structure == "random-dag":
        order = [int(v) for v in rng.permutation(n)]
        for k in range(1, n):
            v = order[k]
            earlier = [u for u in order[:k] if rng.random() < spec.edge_prob]
            rng.shuffle(earlier)
            parents[v] = earlier[: spec.max_in_degree]
    return [tuple(sorted(ps)) for ps in parents]


def _dominant_rows(rows, k, C, mass, rng):
    """Put ``mass`` on one grade per parent configuration.

    The dominant grade is ``(offset + sum_j (j+1) * u_j) mod C``, which
    changes whenever any single parent grade changes (for prime C, and for
    any C with one parent), so every edge carries a strong dependence.
    """
    offset = int(rng.integers(C))
    configs = np.array(list(np.ndindex(*(C,) * k))) if k else np.zeros((1, 0), dtype=int)
    dom = (offset + configs @ np.arange(1, k + 1)) % C
    out = rows * (1.0 - mass)
    out[np.arange(len(dom)), dom] += mass
    return out


def generate_ground_truth(spec: GeneratorSpec) -> BayesianNetwork:
    """Random structure of the requested family with symmetric-Dirichlet CPT rows."""
    rng = np.random.default_rng([spec.seed, 0])
    parents = _random_structure(spec, rng)
    C = spec.grades
    cpts = []
    for ps in parents:
        rows = rng.dirichlet(np.full(C, spec.cpt_concentration), size=C ** len(ps))
        if spec.dominant_mass is not None:
            rows = _dominant_rows(rows, len(ps), C, spec.dominant_mass, rng)
        # floor tiny entries so no configuration has exactly zero probability
        rows = np.maximum(rows, 1e-6)
        rows /= rows.sum(axis=1, keepdims=True)
        cpts.append(rows.reshape((C,) * len(ps) + (C,)))
    return BayesianNetwork(C, parents, cpts)


def ancestral_sample(net: BayesianNetwork, size: int, rng: np.random.Generator) -> np.ndarray:
    """(size, n) array of 1-based grades drawn from the network."""
    g = np.zeros((size, net.node_count), dtype=int)
    for v in net.order:
        ps = net.parents[v]
        probs = net.cpts[v][tuple(g[:, p] for p in ps)] if ps else np.broadcast_to(net.cpts[v], (size, net.grades))
        cum = np.cumsum(probs, axis=1)
        u = rng.random(size)[:, None] * cum[:, -1:]
        g[:, v] = np.minimum((u >= cum).sum(axis=1), net.grades - 1)
    return g + 1


def grade_embeddings(spec: GeneratorSpec) -> np.ndarray:
    """Fixed (nodes, grades, feature_dim) embedding table for the generator seed."""
    rng = np.random.default_rng([spec.seed, 1])
    return rng.normal(size=(spec.node_count, spec.grades, spec.feature_dim))


def features_for(grades: np.ndarray, spec: GeneratorSpec, rng: np.random.Generator) -> np.ndarray:
    emb = grade_embeddings(spec)
    nodes = np.arange(spec.node_count)
    clean = emb[nodes[None, :], grades - 1]  # (S, n, d)
    sd = np.full(spec.node_count, spec.feature_noise_sd)
    if spec.disease_noise_sd is not None:
        sd[0] = spec.disease_noise_sd
    noisy = clean + sd[None, :, None] * rng.normal(size=clean.shape)
    return noisy.reshape(grades.shape[0], spec.node_count * spec.feature_dim)


def _pick(grades, n, pn_ratio, C, rng):
    """Indices of ``n`` rows with ``pn_ratio`` positives per negative (None: take first n)."""
    if pn_ratio is None:
        return np.arange(n) if len(grades) >= n else None
    pos = np.flatnonzero(is_positive(grades[:, 0], C))
    neg = np.flatnonzero(~is_positive(grades[:, 0], C))
    n_pos = int(round(n * pn_ratio / (1.0 + pn_ratio)))
    n_neg = n - n_pos
    if len(pos) < n_pos or len(neg) < n_neg:
        return None
    return np.sort(np.concatenate([pos[:n_pos], neg[:n_neg]]))


def sample_split(net: BayesianNetwork, spec: GeneratorSpec, n: int, pn_ratio, rng) -> LabelDataset:
    pool = n if pn_ratio is None else max(4 * n, 64)
    while True:
        g = ancestral_sample(net, pool, rng)
        idx = _pick(g, n, pn_ratio, spec.grades, rng)
        if idx is not None:
            break
        pool *= 2
    g = g[idx]
    return LabelDataset.from_grades(g, spec.grades, features_for(g, spec, rng))


def sample_dataset(net: BayesianNetwork, spec: GeneratorSpec, size: int | None = None,
                   stream: int = 2) -> LabelDataset:
    """One-hot labels plus features for ``size`` ancestral samples (default n_train)."""
    if net.node_count != spec.node_count or net.grades != spec.grades:
        raise ValueError("network does not match the generator spec")
    rng = np.random.default_rng([spec.seed, stream])
    return sample_split(net, spec, spec.n_train if size is None else size, None, rng)


@dataclass
class Benchmark:
    spec: GeneratorSpec
    truth: BayesianNetwork
    train: LabelDataset
    val: LabelDataset
    test: LabelDataset
    extra: dict = field(default_factory=dict)


def make_benchmark(spec: GeneratorSpec) -> Benchmark:
    truth = generate_ground_truth(spec)
    rng = np.random.default_rng([spec.seed, 3])
    train = sample_split(truth, spec, spec.n_train, spec.train_pn_ratio, rng)
    val = sample_split(truth, spec, spec.n_val, spec.eval_pn_ratio, rng)
    test = sample_split(truth, spec, spec.n_test, spec.eval_pn_ratio, rng)
    return Benchmark(spec, truth, train, val, test)


def stratified_fraction(ds: LabelDataset, fraction: float, seed: int = 0) -> LabelDataset:
    """Subsample keeping the positive/negative counts in proportion.

    Exact whenever ``fraction`` times each class count is an integer.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    rng = np.random.default_rng([seed, 4])
    pos = is_positive(ds.hard_grades()[:, 0], ds.grades)
    keep = []
    for cls_idx in (np.flatnonzero(pos), np.flatnonzero(~pos)):
        k = int(round(fraction * len(cls_idx)))
        keep.append(rng.permutation(cls_idx)[:k])
    return ds.subset(np.sort(np.concatenate(keep)))


def shrinking_splits(ds: LabelDataset, fractions=(1.0, 0.75, 0.5, 0.25), seed: int = 0) -> dict:
    return {f: stratified_fraction(ds, f, seed) for f in fractions}
