"""Fairness-aware dynamic feature acquisition.

A Q-learning agent acquires feature groups one at a time for each instance
and is rewarded for label accuracy and for keeping an adversary from
recovering a sensitive attribute out of the acquired set.
"""
from .data import (DataError, EncodedDataset, FeatureSchema, encode_features, load_adult, make_folds,
                   make_synthetic)
from .env import RewardConfig, terminal_reward
from .evaluation import auc, demographic_disparity, evaluate_policy, pareto_front
from .networks import ModelBundle
from .runner import run_experiment
from .set_encoder import FeatureToken, encode
from .trainer import JointConfig, PretrainConfig, joint_train, pretrain

__version__ = "0.1.0"

__all__ = [
    "DataError", "EncodedDataset", "FeatureSchema", "FeatureToken", "JointConfig", "ModelBundle",
    "PretrainConfig", "RewardConfig", "auc", "demographic_disparity", "encode", "encode_features",
    "evaluate_policy", "joint_train", "load_adult", "make_folds", "make_synthetic", "pareto_front",
    "pretrain", "run_experiment", "terminal_reward",
]
