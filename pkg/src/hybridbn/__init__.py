"""Differentiable hybrid of Bayesian-network inference and a residual graph network."""
from .belief_prop import bp_gradient, bp_infer, bp_jacobian
from .bn_core import BayesianNetwork, brute_force_posterior, joint_probability, validate_network
from .bn_learn import bic_score, fit_cpts_mle, learn_structure, search_structure
from .dataset import LabelDataset, load_dataset, save_dataset
from .training import HybridModel, ModelConfig, TrainConfig, alternate_train, attribute_importance

__version__ = "0.1.0"
