"""The hybrid network, its deep-supervision loss, and alternating training.

Forward pass for a batch of feature vectors::

    F0 = encoder(x)
    P0_B = softmax(F0 W_B)            -> evidence for BN-1 -> P_B
    H_0  = F0 W_G,  P0_G = softmax(H_0 W_T)
    H_{l+1} = conv_l(H_l; spatial_l(P_B), channel_l(H_l))
    P_G = softmax(H_L W_P)
    fused = residual fusion of (P_B, P_G)  -> evidence for BN-2 -> P_final

BN-1 and BN-2 are constants during gradient steps; gradients pass through
their inference from marginals back to evidence.  Between epochs (up to a
cap) both networks are re-learned from the model's own soft predictions.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import coupling
from .autodiff import Adam, ParameterTape, Tape, Var
from .belief_prop import Schedule
from .bn_core import BayesianNetwork
from .bn_learn import StructureSearchConfig, bic_score, learn_structure, search_structure, fit_cpts_mle
from .dataset import LabelDataset
from .gcn import GcnLayer, NormState, classify_head, graph_conv_layer, project_node_features, uniform_init
from .synth_data import is_positive

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
LOSS_NAMES = ("gcn_input", "bn_input", "attributes", "disease", "final")
BUNDLE_FORMAT = "hybridbn-model"
BUNDLE_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    nodes: int
    grades: int
    feature_dim: int
    encoder_hidden: int = 64
    f0_dim: int = 64
    node_dim: int = 16
    layers: int = 3
    attn_hidden: int = 16
    reduction: int = 4
    attention_softmax: bool = False
    # component switches (ablations)
    bn1: bool = True
    bn2: bool = True
    coupling_attention: bool = True
    channel_attention: bool = True
    fusion: bool = True
    grad_through_bn: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**_known(cls, d))


@dataclass(frozen=True)
class TrainConfig:
    loss_weights: tuple = (0.2, 0.2, 0.2, 0.2, 0.2)
    lr: float = 1e-3
    lr_milestones: tuple = (0.5, 0.8)
    lr_decay: float = 0.1
    bn_update_cap: int = 20
    bn_update_period: int = 1
    max_epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    smoothing: float = 1.0
    max_in_degree: int = 2

    def __post_init__(self):
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        object.__setattr__(self, "lr_milestones", tuple(self.lr_milestones))
        if len(self.loss_weights) != 5:
            raise ValueError("exactly five loss weights are required")
        if abs(sum(self.loss_weights) - 1.0) > 1e-9:
            raise ValueError(f"loss weights must sum to 1, got {sum(self.loss_weights)}")
        if self.bn_update_cap < 0 or self.bn_update_period < 1:
            raise ValueError("bn_update_cap must be >= 0 and bn_update_period >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**_known(cls, d))

    def structure_config(self) -> StructureSearchConfig:
        return StructureSearchConfig(self.max_in_degree, self.smoothing)


def _known(cls, d: dict) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields {sorted(unknown)}")
    return dict(d)


class HybridModel:
    """Parameters, batch-norm state and the two Bayesian networks."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        n, C, D = cfg.nodes, cfg.grades, cfg.node_dim
        rng = np.random.default_rng([seed, 10])
        p = self.params = ParameterTape()
        p.add("enc.w1", uniform_init(rng, cfg.feature_dim, (cfg.feature_dim, cfg.encoder_hidden)))
        p.add("enc.b1", uniform_init(rng, cfg.feature_dim, (cfg.encoder_hidden,)))
        p.add("enc.w2", uniform_init(rng, cfg.encoder_hidden, (cfg.encoder_hidden, cfg.f0_dim)))
        p.add("enc.b2", uniform_init(rng, cfg.encoder_hidden, (cfg.f0_dim,)))
        p.add("w_b", uniform_init(rng, cfg.f0_dim, (cfg.f0_dim, n * C)))
        p.add("b_b", uniform_init(rng, cfg.f0_dim, (n * C,)))
        p.add("w_g", uniform_init(rng, cfg.f0_dim, (cfg.f0_dim, n * D)))
        p.add("b_g", uniform_init(rng, cfg.f0_dim, (n * D,)))
        p.add("w_t", uniform_init(rng, D, (D, C)))
        p.add("b_t", uniform_init(rng, D, (C,)))
        self.layers = [GcnLayer(l, n, D) for l in range(cfg.layers)]
        for l, layer in enumerate(self.layers):
            layer.init(p, rng)
            coupling.init_attention(p, l, n, C, D, cfg.attn_hidden, cfg.reduction, rng)
        p.add("w_p", uniform_init(rng, D, (D, C)))
        p.add("b_p", uniform_init(rng, D, (C,)))
        coupling.init_fusion(p, C, rng)
        p.finalize()
        self.bn1: BayesianNetwork | None = None
        self.bn2: BayesianNetwork | None = None
        self._sched: dict[str, Schedule] = {}
        self.low_grade_features: np.ndarray | None = None

    # ---- Bayesian networks -----------------------------------------

    def set_networks(self, bn1: BayesianNetwork | None, bn2: BayesianNetwork | None) -> None:
        self.bn1, self.bn2 = bn1, bn2
        self._sched = {}
        if bn1 is not None:
            self._sched["bn1"] = Schedule(bn1)
        if bn2 is not None:
            self._sched["bn2"] = Schedule(bn2)

    # ---- forward ---------------------------------------------------

    def forward(self, tape: Tape, x: np.ndarray, train: bool = False, update_stats: bool = True,
                deactivate: int | None = None) -> dict:
        cfg = self.cfg
        n, C = cfg.nodes, cfg.grades
        leaf = self.params.leaf
        B = x.shape[0]
        xv = tape.const(x)
        h = tape.relu(tape.affine(xv, leaf("enc.w1"), leaf("enc.b1")))
        f0 = tape.affine(h, leaf("enc.w2"), leaf("enc.b2"))

        p0_b = tape.softmax(tape.reshape(tape.affine(f0, leaf("w_b"), leaf("b_b")), (B, n, C)))
        h0 = project_node_features(tape, f0, leaf("w_g"), leaf("b_g"), n)
        p0_g = classify_head(tape, h0, leaf("w_t"), leaf("b_t"))

        if deactivate is not None:
            p0_b, h0 = self._deactivated(tape, p0_b, h0, deactivate)

        out = {"p0_b": p0_b, "p0_g": p0_g, "h0": h0}
        p_b = None
        if cfg.bn1:
            if self.bn1 is None:
                raise RuntimeError("BN-1 has not been fitted")
            p_b = coupling.bn_marginals(tape, self.bn1, p0_b, cfg.grad_through_bn, self._sched["bn1"])
            out["p_b"] = p_b

        hl = h0
        for l, layer in enumerate(self.layers):
            a = f"attn.{l}."
            spatial = channel = None
            if p_b is not None and cfg.coupling_attention:
                spatial = coupling.spatial_attention(
                    tape, p_b, leaf(a + "w_l0"), leaf(a + "b_l0"), leaf(a + "w_l1"), leaf(a + "b_l1"),
                    cfg.attention_softmax,
                )
            if cfg.channel_attention:
                channel = coupling.channel_attention(
                    tape, hl, leaf(a + "w_sq"), leaf(a + "b_sq"), leaf(a + "w_ex"), leaf(a + "b_ex")
                )
            hl = graph_conv_layer(tape, self.params, layer, hl, spatial, channel, train, update_stats)
        p_g = classify_head(tape, hl, leaf("w_p"), leaf("b_p"))
        out["p_g"] = p_g

        if p_b is None:
            fused = p_g
        elif cfg.fusion:
            fused = coupling.fuse_results(tape, p_b, p_g, self.params)
        else:
            fused = tape.scale(tape.add(p_b, p_g), 0.5)
        out["fused"] = fused

        if cfg.bn2:
            if self.bn2 is None:
                raise RuntimeError("BN-2 has not been fitted")
            out["final"] = coupling.final_bn_predict(
                tape, self.bn2, fused, cfg.grad_through_bn, self._sched["bn2"]
            )
        else:
            out["final"] = tape.take(fused, (slice(None), coupling.DISEASE))
        return out

    def _deactivated(self, tape: Tape, p0_b: Var, h0: Var, attr: int):
        if not 1 <= attr < self.cfg.nodes:
            raise ValueError(f"attribute index must lie in [1, {self.cfg.nodes - 1}]")
        ev = p0_b.value.copy()
        ev[:, attr] = 0.0
        ev[:, attr, 0] = 1.0  # lowest grade
        feats = h0.value.copy()
        if self.low_grade_features is None or not np.all(np.isfinite(self.low_grade_features[attr])):
            log.warning("no low-grade average feature for attribute %d; using zeros", attr)
            feats[:, attr] = 0.0
        else:
            feats[:, attr] = self.low_grade_features[attr]
        return tape.const(ev), tape.const(feats)

    def predict(self, x: np.ndarray, batch: int = 512, deactivate: int | None = None) -> dict:
        """Evaluation-mode outputs as numpy arrays."""
        parts: dict[str, list] = {}
        for s in range(0, x.shape[0], batch):
            tape = Tape()
            out = self.forward(tape, x[s : s + batch], train=False, deactivate=deactivate)
            for k, v in out.items():
                parts.setdefault(k, []).append(v.value)
        self.params.zero_grad()
        return {k: np.concatenate(v) for k, v in parts.items()}

    # ---- serialization ---------------------------------------------

    def state_dict(self) -> dict:
        return {
            "model_config": asdict(self.cfg),
            "params": self.params.to_dict(),
            "norm_stats": [{"mean": l.norm.mean.tolist(), "var": l.norm.var.tolist()} for l in self.layers],
            "bn1": None if self.bn1 is None else self.bn1.to_dict(),
            "bn2": None if self.bn2 is None else self.bn2.to_dict(),
            "low_grade_features": None if self.low_grade_features is None else _nan_to_none(self.low_grade_features),
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "HybridModel":
        model = cls(ModelConfig.from_dict(d["model_config"]))
        model.params.load_dict(d["params"])
        for layer, st in zip(model.layers, d["norm_stats"]):
            layer.norm = NormState(np.asarray(st["mean"], dtype=float), np.asarray(st["var"], dtype=float))
        bn1 = None if d["bn1"] is None else BayesianNetwork.from_dict(d["bn1"])
        bn2 = None if d["bn2"] is None else BayesianNetwork.from_dict(d["bn2"])
        model.set_networks(bn1, bn2)
        if d.get("low_grade_features") is not None:
            model.low_grade_features = np.array(
                [[np.nan if v is None else v for v in row] if row is not None else None for row in d["low_grade_features"]],
                dtype=float,
            )
        return model


def _nan_to_none(a: np.ndarray):
    return [[None if not np.isfinite(v) else float(v) for v in row] for row in a]


# ---- losses -----------------------------------------------------------


def active_loss_weights(model_cfg: ModelConfig, weights) -> np.ndarray:
    """Zero the terms whose stage is switched off and renormalize the rest to sum 1."""
    w = np.array(weights, dtype=float)
    if not model_cfg.bn1:
        w[1] = 0.0
    s = w.sum()
    return w / s if s > 0 else w


def symmetric_cross_entropy(tape: Tape, p: Var, y: np.ndarray) -> Var:
    """-sum(y log p + (1 - y) log(1 - p)) per sample, averaged over the batch."""
    yv = tape.const(y)
    ny = tape.const(1.0 - y)
    terms = tape.add(tape.mul(yv, tape.clamped_log(p, LOG_CLAMP)), tape.mul(ny, tape.clamped_log(tape.one_minus(p), LOG_CLAMP)))
    return tape.scale(tape.sum(terms), -1.0 / p.shape[0])


def compute_losses(tape: Tape, outputs: dict, labels: np.ndarray, weights) -> tuple[Var, dict]:
    """Weighted five-term loss; returns (total, per-term values).

    ``weights`` follow the order gcn_input, bn_input, attributes, disease,
    final.  Terms with zero weight are still reported.
    """
    y = np.asarray(labels, dtype=float)
    f = outputs["fused"]
    comps = {
        "gcn_input": symmetric_cross_entropy(tape, outputs["p0_g"], y),
        "bn_input": symmetric_cross_entropy(tape, outputs["p0_b"], y),
        "attributes": symmetric_cross_entropy(tape, tape.take(f, (slice(None), slice(1, None))), y[:, 1:]),
        "disease": symmetric_cross_entropy(tape, tape.take(f, (slice(None), 0)), y[:, 0]),
        "final": symmetric_cross_entropy(tape, outputs["final"], y[:, 0]),
    }
    total = None
    for w, name in zip(weights, LOSS_NAMES):
        if w == 0:
            continue
        term = tape.scale(comps[name], float(w))
        total = term if total is None else tape.add(total, term)
    if total is None:
        total = tape.const(np.array(0.0))
    return total, {k: float(v.value) for k, v in comps.items()}


def loss_values(outputs: dict, labels: np.ndarray, weights) -> tuple[float, dict]:
    """Numpy-only evaluation of :func:`compute_losses` (outputs as arrays)."""
    tape = Tape()
    wrapped = {k: tape.const(v) for k, v in outputs.items()}
    total, comps = compute_losses(tape, wrapped, labels, weights)
    return float(total.value), comps


def backward_pass(model: HybridModel, tape: Tape, total: Var) -> np.ndarray:
    """Gradient of ``total`` w.r.t. every neural parameter, as a flat vector."""
    tape.backward(total)
    return model.params.collect()


def loss_and_gradient(model: HybridModel, x: np.ndarray, labels: np.ndarray, weights,
                      train: bool = True, update_stats: bool = False) -> tuple[float, np.ndarray, dict]:
    model.params.zero_grad()
    tape = model.params.tape
    out = model.forward(tape, x, train=train, update_stats=update_stats)
    total, comps = compute_losses(tape, out, labels, weights)
    grad = backward_pass(model, tape, total).copy()
    model.params.zero_grad()
    return float(total.value), grad, comps


# ---- training -----------------------------------------------------------


@dataclass
class TrainResult:
    model: HybridModel
    train_cfg: TrainConfig
    history: list = field(default_factory=list)
    refits: int = 0
    aborted: bool = False

    def bundle(self) -> dict:
        d = {"format": BUNDLE_FORMAT, "version": BUNDLE_VERSION}
        d.update(self.model.state_dict())
        d["train_config"] = asdict(self.train_cfg)
        d["seed"] = self.train_cfg.seed
        d["history"] = self.history
        d["refits"] = self.refits
        d["aborted"] = self.aborted
        return d

    def to_json(self) -> str:
        return json.dumps(self.bundle(), sort_keys=True)


def load_bundle(text: str) -> tuple[HybridModel, dict]:
    d = json.loads(text)
    if d.get("format") != BUNDLE_FORMAT:
        raise ValueError("not a model bundle")
    if d.get("version") != BUNDLE_VERSION:
        raise ValueError(f"unsupported model bundle version {d.get('version')!r}")
    return HybridModel.from_state_dict(d), d


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    lr = cfg.lr
    for m in cfg.lr_milestones:
        if epoch >= m * cfg.max_epochs:
            lr *= cfg.lr_decay
    return lr


def disease_accuracy(final: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(final.argmax(axis=1) == labels[:, 0].argmax(axis=1)))


def refit_networks(model: HybridModel, x: np.ndarray, cfg: TrainConfig) -> dict:
    """Phase two: relearn BN-1 from P0_B and BN-2 from the fused predictions."""
    out = model.predict(x)
    scfg = cfg.structure_config()
    bn1 = learn_structure(out["p0_b"], scfg) if model.cfg.bn1 else None
    bn2 = learn_structure(out["fused"], scfg) if model.cfg.bn2 else None
    model.set_networks(bn1, bn2)
    return out


def initial_networks(labels: np.ndarray, cfg: TrainConfig, model_cfg: ModelConfig):
    scfg = cfg.structure_config()
    net = learn_structure(labels, scfg)
    return (net if model_cfg.bn1 else None), (net if model_cfg.bn2 else None)


def store_low_grade_features(model: HybridModel, train: LabelDataset) -> None:
    h0 = model.predict(train.features)["h0"]
    grades = train.hard_grades()
    n, D = model.cfg.nodes, model.cfg.node_dim
    avg = np.full((n, D), np.nan)
    for a in range(1, n):
        mask = grades[:, a] == 1
        if mask.any():
            avg[a] = h0[mask, a].mean(axis=0)
    model.low_grade_features = avg


def alternate_train(train: LabelDataset, val: LabelDataset | None, model_cfg: ModelConfig,
                    cfg: TrainConfig) -> TrainResult:
    """Gradient epochs with frozen BNs, interleaved with BN refits up to ``bn_update_cap``."""
    if train.features is None:
        raise ValueError("training data needs feature vectors")
    model = HybridModel(model_cfg, cfg.seed)
    model.set_networks(*initial_networks(train.samples, cfg, model_cfg))
    weights = active_loss_weights(model_cfg, cfg.loss_weights)
    opt = Adam(model.params.flat.size, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 20])
    result = TrainResult(model, cfg)
    x, y = train.features, train.samples
    last_good = model.params.flat.copy()
    needs_bn = model_cfg.bn1 or model_cfg.bn2

    for epoch in range(cfg.max_epochs):
        lr = learning_rate(cfg, epoch)
        order = rng.permutation(train.size)
        losses = []
        for s in range(0, train.size, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            model.params.zero_grad()
            tape = model.params.tape
            out = model.forward(tape, x[idx], train=True)
            total, _ = compute_losses(tape, out, y[idx], weights)
            loss = float(total.value)
            if not math.isfinite(loss):
                break
            grad = backward_pass(model, tape, total)
            opt.step(model.params.flat, grad, lr)
            losses.append(loss)
        model.params.zero_grad()
        epoch_loss = float(np.mean(losses)) if losses else float("nan")
        if len(losses) * cfg.batch_size < train.size or not math.isfinite(epoch_loss) \
                or not np.all(np.isfinite(model.params.flat)):
            log.error("non-finite loss at epoch %d; restoring last good parameters", epoch)
            model.params.flat[:] = last_good
            result.aborted = True
            break
        last_good = model.params.flat.copy()

        refit = False
        if needs_bn and result.refits < cfg.bn_update_cap and (epoch + 1) % cfg.bn_update_period == 0:
            refit_networks(model, x, cfg)
            result.refits += 1
            refit = True
        entry = {"epoch": epoch, "lr": lr, "loss": epoch_loss, "bn_refit": refit}
        if val is not None and val.size:
            entry["val_accuracy"] = disease_accuracy(model.predict(val.features)["final"], val.samples)
        result.history.append(entry)
        log.info("epoch %d loss %.4f %s", epoch, epoch_loss, entry.get("val_accuracy", ""))
    store_low_grade_features(model, train)
    return result


# ---- analysis -------------------------------------------------------------


def disease_probability(final: np.ndarray) -> np.ndarray:
    """Probability of a positive diagnosis (upper grades) from (B, C) disease marginals."""
    C = final.shape[1]
    pos = is_positive(np.arange(1, C + 1), C)
    return final[:, pos].sum(axis=1)


def attribute_importance(model: HybridModel, features: np.ndarray, attribute: int) -> np.ndarray:
    """|P(positive) - P(positive | attribute deactivated)| per sample."""
    x = np.atleast_2d(features)
    base = disease_probability(model.predict(x)["final"])
    off = disease_probability(model.predict(x, deactivate=attribute)["final"])
    return np.abs(base - off)


def importance_table(model: HybridModel, features: np.ndarray) -> dict:
    return {
        a: float(attribute_importance(model, features, a).mean()) for a in range(1, model.cfg.nodes)
    }


__all__ = [
    "ModelConfig", "TrainConfig", "HybridModel", "compute_losses", "backward_pass",
    "alternate_train", "attribute_importance", "bic_score", "search_structure", "fit_cpts_mle",
]
