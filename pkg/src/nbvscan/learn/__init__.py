"""Function approximation and reinforcement learning written directly on numpy."""

from .agents import (actor_gradient, ddpg_update, dqn_targets, dqn_update, epsilon_greedy, hard_update,
                     linear_epsilon, soft_update)
from .nn import Adam, Network, conv_actor_layers, conv_critic_layers, conv_q_layers
from .replay import Batch, ReplayBuffer
from .trainer import (ArchitectureMismatchError, CurveRow, DdpgAgent, DqnAgent, EvalResult, TrainConfig,
                      TrainingDivergedError, evaluate, load_agent, read_checkpoint, run_greedy, save_agent, train,
                      write_curve_csv)

__all__ = [
    "Adam", "ArchitectureMismatchError", "Batch", "CurveRow", "DdpgAgent", "DqnAgent", "EvalResult", "Network",
    "ReplayBuffer", "TrainConfig", "TrainingDivergedError", "actor_gradient", "conv_actor_layers",
    "conv_critic_layers", "conv_q_layers", "ddpg_update", "dqn_targets", "dqn_update", "epsilon_greedy",
    "evaluate", "hard_update", "linear_epsilon", "load_agent", "read_checkpoint", "run_greedy", "save_agent",
    "soft_update", "train", "write_curve_csv",
]
