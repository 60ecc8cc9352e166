"""Ablation variants and the shrinking-training-set benchmark protocol."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .synth_data import Benchmark, GeneratorSpec, make_benchmark, stratified_fraction
from .training import ModelConfig, TrainConfig, alternate_train, disease_accuracy

# model-config overrides and train-config overrides per named variant
VARIANTS = {
    "full": ({}, {}),
    "gcn-only": ({"bn1": False, "bn2": False}, {}),
    "no-bn1": ({"bn1": False}, {}),
    "no-bn2": ({"bn2": False}, {}),
    "no-coupling-attention": ({"coupling_attention": False}, {}),
    "no-channel-attention": ({"channel_attention": False}, {}),
    "no-grad-bn": ({"grad_through_bn": False}, {}),
    "no-alter-train": ({}, {"bn_update_cap": 0}),
}


def variant_configs(name: str, model_cfg: ModelConfig, train_cfg: TrainConfig):
    try:
        m, t = VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None
    return replace(model_cfg, **m), replace(train_cfg, **t)


def default_model_config(spec: GeneratorSpec, **overrides) -> ModelConfig:
    return ModelConfig(
        nodes=spec.node_count, grades=spec.grades, feature_dim=spec.node_count * spec.feature_dim, **overrides
    )


def run_variant(bench: Benchmark, name: str, fraction: float, seed: int,
                model_cfg: ModelConfig, train_cfg: TrainConfig, subsample_seed: int = 0) -> float:
    """Test accuracy of one variant trained on a stratified fraction of the training split."""
    train = stratified_fraction(bench.train, fraction, subsample_seed)
    mc, tc = variant_configs(name, model_cfg, train_cfg)
    result = alternate_train(train, None, mc, replace(tc, seed=seed))
    return disease_accuracy(result.model.predict(bench.test.features)["final"], bench.test.samples)


def shrinking_benchmark(spec: GeneratorSpec, variants, fractions, seeds, model_cfg: ModelConfig | None = None,
                        train_cfg: TrainConfig | None = None, progress=None) -> dict:
    """accuracies[variant][fraction] -> list over seeds, on one fixed benchmark and test set.

    ``variants`` may be a list of names (run at every fraction) or a dict
    mapping names to the fractions to run.
    """
    bench = make_benchmark(spec)
    model_cfg = model_cfg or default_model_config(spec)
    train_cfg = train_cfg or TrainConfig()
    plan = variants if isinstance(variants, dict) else {v: fractions for v in variants}
    out: dict = {}
    for name, fracs in plan.items():
        for f in fracs:
            for s in seeds:
                acc = run_variant(bench, name, f, s, model_cfg, train_cfg)
                out.setdefault(name, {}).setdefault(f, []).append(acc)
                if progress:
                    progress(name, f, s, acc)
    return out


def medians(acc: dict) -> dict:
    return {v: {f: float(np.median(a)) for f, a in fr.items()} for v, fr in acc.items()}
