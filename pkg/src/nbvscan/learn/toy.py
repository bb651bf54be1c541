"""Tiny deterministic MDPs with exact solutions, for checking learners."""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np


@dataclass(frozen=True)
class TabularMDP:
    """Deterministic MDP: ``next_state[s, a]``, ``reward[s, a]``, absorbing ``terminal`` states."""
    next_state: np.ndarray
    reward: np.ndarray
    terminal: frozenset
    start: int = 0

    @property
    def n_states(self) -> int:
        return self.next_state.shape[0]

    @property
    def n_actions(self) -> int:
        return self.next_state.shape[1]


def value_iteration(mdp: TabularMDP, gamma: float, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Optimal action values Q*(s, a); terminal states have value zero."""
    v = np.zeros(mdp.n_states)
    term = np.array([s in mdp.terminal for s in range(mdp.n_states)])
    for _ in range(max_iter):
        q = mdp.reward + gamma * np.where(term[mdp.next_state], 0.0, v[mdp.next_state])
        new = np.where(term, 0.0, q.max(axis=1))
        if np.max(np.abs(new - v)) < tol:
            v = new
            break
        v = new
    return mdp.reward + gamma * np.where(term[mdp.next_state], 0.0, v[mdp.next_state])


def chain_mdp() -> TabularMDP:
    """Five-state chain: a small sure reward on the left, a large delayed one on the right.

    States 0..4, start 2. Action 0 moves left, action 1 moves right. Entering
    state 0 pays 1 and ends; entering state 4 pays 10 and ends; every other
    move costs 0.5. Staying clear of the nearby small prize is optimal.
    """
    nxt = np.array([[0, 0], [0, 2], [1, 3], [2, 4], [4, 4]])
    rew = np.array([[0.0, 0.0], [1.0, -0.5], [-0.5, -0.5], [-0.5, 10.0], [0.0, 0.0]])
    return TabularMDP(nxt, rew, frozenset({0, 4}), start=2)


class TabularEnv:
    """Environment wrapper with one-hot states and a step limit."""

    def __init__(self, mdp: TabularMDP, max_steps: int = 20, seed: int = 0):
        self.mdp, self.max_steps = mdp, max_steps
        self.rng = np.random.default_rng(seed)
        self.config = SimpleNamespace(continuous=False)
        self.state_shape = (mdp.n_states,)
        self.n_actions = mdp.n_actions
        self.s, self.t, self.done = mdp.start, 0, True

    def _obs(self) -> np.ndarray:
        x = np.zeros(self.mdp.n_states)
        x[self.s] = 1.0
        return x

    def reset(self):
        self.s, self.t, self.done = self.mdp.start, 0, False
        return self._obs(), {}

    def step(self, action: int):
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        a = int(action)
        r = float(self.mdp.reward[self.s, a])
        self.s = int(self.mdp.next_state[self.s, a])
        self.t += 1
        terminal = self.s in self.mdp.terminal
        self.done = terminal or self.t >= self.max_steps
        return self._obs(), r, self.done, {"terminal": terminal}

    def one_hot_states(self) -> np.ndarray:
        return np.eye(self.mdp.n_states)
