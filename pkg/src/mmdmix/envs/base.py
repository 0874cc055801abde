from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractViolation


@dataclass(frozen=True)
class EnvInfo:
    n_agents: int
    n_actions: int
    obs_size: int
    state_size: int
    episode_limit: int

    def as_tuple(self) -> tuple[int, int, int, int, int]:
        return (self.n_agents, self.n_actions, self.obs_size, self.state_size, self.episode_limit)


@dataclass
class EnvStep:
    """What every agent sees after a reset or a joint action.

    The reward is shared by all agents.  ``truncated`` marks an episode cut by
    the step limit rather than ended by the task.
    """

    reward: float
    terminated: bool
    truncated: bool
    state: np.ndarray
    observations: np.ndarray  # (n_agents, obs_size)
    avail_actions: np.ndarray  # (n_agents, n_actions) bool

    @property
    def done(self) -> bool:
        return self.terminated or self.truncated


class MultiAgentEnv:
    """Cooperative multi-agent environment with shared reward and local observations."""

    info: EnvInfo

    def reset(self, seed: int | None = None) -> EnvStep:
        raise NotImplementedError

    def step(self, actions) -> EnvStep:
        raise NotImplementedError

    def env_info(self) -> EnvInfo:
        return self.info

    def success(self) -> bool:
        """Whether the finished episode counts as a win."""
        raise NotImplementedError

    def _check_actions(self, actions, avail: np.ndarray) -> np.ndarray:
        acts = np.asarray(actions, dtype=np.int64).reshape(-1)
        if acts.size != self.info.n_agents:
            raise ContractViolation(f"expected {self.info.n_agents} actions, got {acts.size}")
        for agent, a in enumerate(acts):
            if not 0 <= a < self.info.n_actions or not avail[agent, a]:
                raise ContractViolation(f"agent {agent} chose unavailable action {int(a)}")
        return acts
