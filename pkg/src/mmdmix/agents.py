"""Shared recurrent agent network and epsilon-greedy decentralised action selection."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Node, ParameterStore
from .envs import EnvInfo
from .errors import ConfigError, ContractViolation


@dataclass(frozen=True)
class AgentSpec:
    n_agents: int
    n_actions: int
    obs_size: int
    hidden_dim: int = 64

    @classmethod
    def from_env(cls, info: EnvInfo, hidden_dim: int = 64) -> AgentSpec:
        return cls(info.n_agents, info.n_actions, info.obs_size, hidden_dim)

    @property
    def input_dim(self) -> int:
        # observation, last action one-hot, agent id one-hot
        return self.obs_size + self.n_actions + self.n_agents


def init_agent_params(store: ParameterStore, spec: AgentSpec, rng: np.random.Generator) -> None:
    dc.init_dense(store, "agent.fc1", spec.input_dim, spec.hidden_dim, rng)
    dc.init_gru(store, "agent.rnn", spec.hidden_dim, spec.hidden_dim, rng)
    dc.init_dense(store, "agent.fc2", spec.hidden_dim, spec.n_actions, rng)


def init_hidden(n: int, hidden_dim: int = 64) -> np.ndarray:
    """Zero hidden state per agent; called at every episode boundary."""
    return np.zeros((n, hidden_dim))


def build_inputs(obs: np.ndarray, last_actions: np.ndarray | None, spec: AgentSpec) -> np.ndarray:
    """Concatenate observation, one-hot previous action and one-hot agent id.

    ``obs`` has shape (..., n_agents, obs_size); ``last_actions`` (..., n_agents)
    holds action ids, ``-1`` for "no previous action", or is ``None`` for all -1.
    """
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-2:] != (spec.n_agents, spec.obs_size):
        raise ConfigError(f"observations of shape {obs.shape[-2:]} do not match agents {spec.n_agents} x obs {spec.obs_size}")
    lead = obs.shape[:-2]
    if last_actions is None:
        last = np.zeros(lead + (spec.n_agents, spec.n_actions))
    else:
        prev = np.asarray(last_actions, dtype=np.int64)[..., None]
        last = (prev == np.arange(spec.n_actions)).astype(np.float64)
    ids = np.broadcast_to(np.eye(spec.n_agents), lead + (spec.n_agents, spec.n_agents))
    return np.concatenate([obs, last, ids], axis=-1)


def agent_forward(inputs, hidden, params: Mapping[str, Node]) -> tuple[Node, Node]:
    """q = fc2(gru(relu(fc1(input)), hidden)); rows are (episode, agent) pairs."""
    x = dc.relu(dc.dense(inputs, params["agent.fc1.weight"], params["agent.fc1.bias"], name="agent.fc1"))
    h = dc.gru_step(x, hidden, params, "agent.rnn")
    q = dc.dense(h, params["agent.fc2.weight"], params["agent.fc2.bias"], name="agent.fc2")
    return q, h


def greedy(q_values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked argmax along the last axis; ties go to the lowest action id."""
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ContractViolation("every agent needs at least one available action")
    return np.argmax(np.where(mask, q_values, -np.inf), axis=-1)


def select_action(q_values, mask, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy over the available actions of a single agent."""
    q = np.asarray(q_values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractViolation("all actions are masked")
    if not 0.0 <= epsilon <= 1.0:
        raise ContractViolation(f"epsilon must lie in [0, 1], got {epsilon}")
    if rng.random() < epsilon:
        return int(rng.choice(np.flatnonzero(mask)))
    return int(greedy(q, mask))


@dataclass(frozen=True)
class EpsilonSchedule:
    """Linear anneal from ``start`` to ``finish`` over ``anneal_steps`` environment steps."""

    start: float = 1.0
    finish: float = 0.05
    anneal_steps: int = 50_000

    def __call__(self, env_steps: int) -> float:
        if self.anneal_steps <= 0:
            return self.finish
        frac = min(env_steps / self.anneal_steps, 1.0)
        return self.start + frac * (self.finish - self.start)
