"""Newton-Cotes rollouts of equivariant graph networks for N-body prediction."""

from .quadrature import nc_integrate, nc_weights
from .rollout import RolloutConfig, consecutive_predict, predict, rollout
from .training import TrainConfig, evaluate, train

__all__ = ["nc_weights", "nc_integrate", "RolloutConfig", "rollout", "predict", "consecutive_predict",
           "TrainConfig", "train", "evaluate"]
