"""On-policy rollout storage and generalized advantage estimation."""

from __future__ import annotations

import numpy as np


class RolloutBuffer:
    """Transitions from a synchronized pool of environments.

    Arrays are time-major with one column per environment; `rollout steps`
    means total transitions, i.e. n_steps * n_envs. Advantages and returns
    are filled in by compute_gae.
    """

    def __init__(self, n_steps: int, n_envs: int, m: int, n_channels: int = 5, n_scalars: int = 2):
        self.n_steps = n_steps
        self.n_envs = n_envs
        shape = (n_steps, n_envs)
        self.layers = np.zeros(shape + (n_channels, m, m), dtype=np.float64)
        self.scalars = np.zeros(shape + (n_scalars,), dtype=np.float64)
        self.masks = np.zeros(shape + (7,), dtype=bool)
        self.actions = np.zeros(shape, dtype=np.intp)
        self.logp = np.zeros(shape, dtype=np.float64)
        self.rewards = np.zeros(shape, dtype=np.float64)
        self.values = np.zeros(shape, dtype=np.float64)
        self.dones = np.zeros(shape, dtype=bool)
        self.last_values = np.zeros(n_envs, dtype=np.float64)
        self.advantages = np.zeros(shape, dtype=np.float64)
        self.returns = np.zeros(shape, dtype=np.float64)
        self._filled = 0

    @property
    def size(self) -> int:
        return self.n_steps * self.n_envs

    def add_step(self, t, layers, scalars, masks, actions, logp, rewards, values, dones) -> None:
        self.layers[t] = layers
        self.scalars[t] = scalars
        self.masks[t] = masks
        self.actions[t] = actions
        self.logp[t] = logp
        self.rewards[t] = rewards
        self.values[t] = values
        self.dones[t] = dones
        self._filled = t + 1

    def flat_core(self):
        """Flattened (time-major) views used by objectives and minibatching."""
        n = self.size
        return (
            self.layers.reshape((n,) + self.layers.shape[2:]),
            self.scalars.reshape(n, -1),
            self.masks.reshape(n, -1),
            self.actions.reshape(n),
            self.logp.reshape(n),
            self.advantages.reshape(n),
        )

    def flat_returns(self):
        return self.returns.reshape(self.size)


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float) -> RolloutBuffer:
    """Standard GAE recursion with episode-boundary truncation.

    dones[t] marks transitions that ended an episode (solved or timeout);
    no value bootstraps across a boundary. The final unfinished episodes
    bootstrap from buffer.last_values. returns = advantages + values.
    """
    adv = np.zeros_like(buffer.rewards)
    lastgae = np.zeros(buffer.n_envs, dtype=np.float64)
    for t in reversed(range(buffer.n_steps)):
        next_values = buffer.last_values if t == buffer.n_steps - 1 else buffer.values[t + 1]
        nonterminal = 1.0 - buffer.dones[t]
        delta = buffer.rewards[t] + gamma * next_values * nonterminal - buffer.values[t]
        lastgae = delta + gamma * lam * nonterminal * lastgae
        adv[t] = lastgae
    buffer.advantages = adv
    buffer.returns = adv + buffer.values
    return buffer


def normalize_advantages(buffer: RolloutBuffer) -> RolloutBuffer:
    flat = buffer.advantages.reshape(-1)
    std = flat.std()
    buffer.advantages = (buffer.advantages - flat.mean()) / (std + 1e-8)
    return buffer
