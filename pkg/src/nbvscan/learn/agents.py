"""Value-based and actor-critic update rules."""

from __future__ import annotations

import numpy as np

from .nn import Adam, Network
from .replay import Batch


def epsilon_greedy(qvalues: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Uniform action with probability ``epsilon``, else argmax (lowest index on ties)."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    q = np.asarray(qvalues).reshape(-1)
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(len(q)))
    return int(np.argmax(q))


def linear_epsilon(step: int, start: float, end: float, decay_steps: int) -> float:
    if decay_steps <= 0:
        return end
    frac = min(1.0, step / decay_steps)
    return (1.0 - frac) * start + frac * end


def dqn_targets(target_net: Network, batch: Batch, gamma: float) -> np.ndarray:
    """Bellman targets: r for terminal transitions, else r + gamma * max_a Q_target(s', a)."""
    q_next = target_net.forward(batch.next_states).max(axis=1).astype(np.float64)
    return batch.rewards + gamma * np.where(batch.dones, 0.0, q_next)


def dqn_loss_grad(qnet: Network, batch: Batch, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared TD error and its gradient with respect to the Q-network parameters."""
    q = qnet.forward(batch.states, keep=True)
    n = len(batch)
    rows = np.arange(n)
    err = targets - q[rows, batch.actions].astype(np.float64)
    dq = np.zeros(q.shape, dtype=np.float64)
    dq[rows, batch.actions] = -2.0 * err / n
    grad, _, _ = qnet.backward(dq)
    return float(np.mean(err**2)), grad


def dqn_update(qnet: Network, target_net: Network, batch: Batch, gamma: float, optimizer: Adam,
               grad_clip: float | None = None) -> float:
    """One gradient step on the Q-network; the target network is only read."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    y = dqn_targets(target_net, batch, gamma)
    loss, grad = dqn_loss_grad(qnet, batch, y)
    optimizer.step(qnet.theta, clip_norm(grad, grad_clip))
    return loss


def clip_norm(grad: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return grad
    norm = float(np.linalg.norm(grad.astype(np.float64)))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def critic_targets(actor_t: Network, critic_t: Network, batch: Batch, gamma: float) -> np.ndarray:
    a2 = actor_t.forward(batch.next_states)
    q2 = critic_t.forward(batch.next_states, a2)[:, 0].astype(np.float64)
    return batch.rewards + gamma * np.where(batch.dones, 0.0, q2)


def critic_loss_grad(critic: Network, batch: Batch, targets: np.ndarray) -> tuple[float, np.ndarray]:
    q = critic.forward(batch.states, batch.actions, keep=True)[:, 0].astype(np.float64)
    err = targets - q
    grad, _, _ = critic.backward((-2.0 * err / len(batch))[:, None])
    return float(np.mean(err**2)), grad


def actor_gradient(actor: Network, critic: Network, states: np.ndarray) -> tuple[float, np.ndarray]:
    """Sampled policy gradient of J = mean_j Q(s_j, mu(s_j)) with respect to the actor parameters.

    Chains dQ/da from the critic through the actor's Jacobian. Returns (J, dJ/dtheta_mu).
    """
    a = actor.forward(states, keep=True)
    q = critic.forward(states, a, keep=True)
    n = len(states)
    _, _, dq_da = critic.backward(np.full(q.shape, 1.0 / n))
    grad, _, _ = actor.backward(dq_da)
    return float(np.mean(q)), grad


def soft_update(target: Network, source: Network, tau: float) -> None:
    target.theta *= 1.0 - tau
    target.theta += tau * source.theta


def hard_update(target: Network, source: Network) -> None:
    target.theta[...] = source.theta


def ddpg_update(actor: Network, critic: Network, actor_t: Network, critic_t: Network, batch: Batch,
                gamma: float, tau: float, actor_opt: Adam, critic_opt: Adam,
                grad_clip: float | None = None) -> tuple[float, float]:
    """Critic regression on target-network Bellman values, then an ascent step along the policy gradient.

    Returns (actor loss = -J, critic loss).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    y = critic_targets(actor_t, critic_t, batch, gamma)
    c_loss, c_grad = critic_loss_grad(critic, batch, y)
    critic_opt.step(critic.theta, clip_norm(c_grad, grad_clip))
    j, a_grad = actor_gradient(actor, critic, batch.states)
    actor_opt.step(actor.theta, clip_norm(-a_grad, grad_clip))
    soft_update(actor_t, actor, tau)
    soft_update(critic_t, critic, tau)
    return -j, c_loss
