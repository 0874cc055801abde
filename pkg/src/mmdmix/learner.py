"""Episode storage, Bellman target particles, and the MMD / TD training step."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .agents import AgentSpec, agent_forward, build_inputs, greedy, init_agent_params, init_hidden, select_action
from .config import ExperimentConfig
from .diffcore import Node, ParameterStore
from .envs import EnvInfo, MultiAgentEnv
from .errors import ContractViolation
from .kernels import Kernel, squared_mmd_rows, squared_mmd_rows_grad
from .mixers import MixerSpec, init_mixer_params, mix
from .rem import rem_combine


@dataclass
class EpisodeRecord:
    """One episode padded to the environment's step limit.

    Transition arrays have ``limit`` rows; state/obs/avail have ``limit + 1`` so
    the observation after the last transition is kept for bootstrapping.
    """

    state: np.ndarray  # (T+1, S)
    obs: np.ndarray  # (T+1, n, O)
    avail: np.ndarray  # (T+1, n, A) bool
    actions: np.ndarray  # (T, n) int
    reward: np.ndarray  # (T,)
    terminated: np.ndarray  # (T,) bool
    truncated: np.ndarray  # (T,) bool
    filled: np.ndarray  # (T,) bool
    episode_return: float = 0.0
    success: bool = False

    @classmethod
    def empty(cls, info: EnvInfo) -> EpisodeRecord:
        T, n = info.episode_limit, info.n_agents
        return cls(
            state=np.zeros((T + 1, info.state_size)),
            obs=np.zeros((T + 1, n, info.obs_size)),
            avail=np.ones((T + 1, n, info.n_actions), dtype=bool),
            actions=np.zeros((T, n), dtype=np.int64),
            reward=np.zeros(T),
            terminated=np.zeros(T, dtype=bool),
            truncated=np.zeros(T, dtype=bool),
            filled=np.zeros(T, dtype=bool),
        )

    @property
    def length(self) -> int:
        return int(self.filled.sum())

    def check(self) -> None:
        L = self.length
        if not self.filled[:L].all():
            raise ContractViolation("filled flags must form a prefix")
        ends = np.flatnonzero(self.terminated | self.truncated)
        if ends.size > 1 or (ends.size == 1 and ends[0] != L - 1):
            raise ContractViolation("an episode ends at most once, at its last filled step")


@dataclass
class EpisodeBatch:
    """Stacked episodes trimmed to the longest one; padding is canonicalised to zeros."""

    state: np.ndarray  # (B, L+1, S)
    obs: np.ndarray  # (B, L+1, n, O)
    avail: np.ndarray  # (B, L+1, n, A)
    actions: np.ndarray  # (B, L, n)
    reward: np.ndarray  # (B, L)
    terminated: np.ndarray  # (B, L)
    filled: np.ndarray  # (B, L)

    @classmethod
    def from_records(cls, records: Sequence[EpisodeRecord]) -> EpisodeBatch:
        if not records:
            raise ContractViolation("cannot build an empty batch")
        L = max(max(r.length for r in records), 1)
        lengths = np.array([r.length for r in records])
        step = np.arange(L)[None, :]
        filled = step < lengths[:, None]
        keep_obs = np.arange(L + 1)[None, :] <= lengths[:, None]
        state = np.stack([r.state[: L + 1] for r in records])
        obs = np.stack([r.obs[: L + 1] for r in records])
        avail = np.stack([r.avail[: L + 1] for r in records])
        return cls(
            state=np.where(keep_obs[..., None], state, 0.0),
            obs=np.where(keep_obs[..., None, None], obs, 0.0),
            avail=np.where(keep_obs[..., None, None], avail, True),
            actions=np.where(filled[..., None], np.stack([r.actions[:L] for r in records]), 0),
            reward=np.where(filled, np.stack([r.reward[:L] for r in records]), 0.0),
            terminated=filled & np.stack([r.terminated[:L] for r in records]),
            filled=filled,
        )

    @property
    def size(self) -> int:
        return self.actions.shape[0]

    @property
    def steps(self) -> int:
        return self.actions.shape[1]


class ReplayBuffer:
    """Fixed-capacity store of whole episodes; the oldest is evicted first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ContractViolation("replay capacity must be >= 1")
        self.capacity = capacity
        self._items: list[EpisodeRecord] = []
        self._next = 0
        self.inserted = 0

    def __len__(self) -> int:
        return len(self._items)

    def insert(self, episode: EpisodeRecord) -> None:
        episode.check()
        if len(self._items) < self.capacity:
            self._items.append(episode)
        else:
            self._items[self._next] = episode
        self._next = (self._next + 1) % self.capacity
        self.inserted += 1

    def episodes(self) -> list[EpisodeRecord]:
        """Stored episodes, oldest first."""
        if len(self._items) < self.capacity:
            return list(self._items)
        return self._items[self._next:] + self._items[: self._next]

    def sample(self, batch_size: int, rng: np.random.Generator) -> EpisodeBatch:
        if batch_size > len(self._items):
            raise ContractViolation(f"asked for {batch_size} episodes, buffer holds {len(self._items)}")
        idx = rng.choice(len(self._items), size=batch_size, replace=False)
        return EpisodeBatch.from_records([self._items[i] for i in idx])


def _agent_inputs(batch: EpisodeBatch, spec: AgentSpec, steps: int) -> np.ndarray:
    """(B, steps, n, in) inputs; there is no previous action at t = 0."""
    prev = np.full((batch.size, steps, spec.n_agents), -1, dtype=np.int64)
    prev[:, 1:] = batch.actions[:, : steps - 1]
    return build_inputs(batch.obs[:, :steps], prev, spec)


def mmd_rows_node(X: Node, Y: np.ndarray, kernel: Kernel) -> Node:
    """Row-wise squared MMD of tracked particles ``X`` against fixed targets ``Y``."""
    value = squared_mmd_rows(X.value, Y, kernel)
    grad = squared_mmd_rows_grad(X.value, Y, kernel)
    return dc.record(value, (X,), lambda g: (g[:, None] * grad,))


class Learner:
    """Agent network + mixer trained on replayed episodes.

    For ``mmdmix`` the loss is the per-step squared MMD between the online
    (optionally REM-combined) particles and the Bellman target particles; for
    ``vdn``/``qmix`` it is the squared TD error of the scalar joint value.
    """

    def __init__(self, cfg: ExperimentConfig, info: EnvInfo, rng: np.random.Generator):
        self.cfg = cfg
        self.info = info
        self.agent_spec = AgentSpec.from_env(info, cfg.agent.hidden_dim)
        self.mixer_spec = MixerSpec(
            kind=cfg.mixer.kind,
            n_agents=info.n_agents,
            state_size=info.state_size,
            embed_dim=cfg.mixer.embed_dim,
            n_particles=cfg.mixer.n_particles,
            hypernet_hidden=cfg.mixer.hypernet_hidden,
            bias_hidden=cfg.mixer.bias_hidden,
        )
        self.kernel = cfg.kernel_spec()
        self.gamma = cfg.train.gamma
        self.params = ParameterStore()
        init_agent_params(self.params, self.agent_spec, rng)
        init_mixer_params(self.params, self.mixer_spec, rng)
        self.target_params = self.params.copy()
        self.optimizer = dc.RMSProp(cfg.train.lr, cfg.train.optim_decay, cfg.train.optim_eps, cfg.train.grad_clip)

    @property
    def distributional(self) -> bool:
        return self.mixer_spec.kind == "mmdmix"

    @property
    def uses_rem(self) -> bool:
        return self.distributional and self.cfg.rem.enabled

    # -- forward passes --------------------------------------------------

    def _unroll(self, batch: EpisodeBatch, params: Mapping[str, Node], steps: int) -> list[Node]:
        spec = self.agent_spec
        B, n = batch.size, spec.n_agents
        inputs = _agent_inputs(batch, spec, steps)
        h: Node | np.ndarray = np.zeros((B * n, spec.hidden_dim))
        qs = []
        for t in range(steps):
            q, h = agent_forward(inputs[:, t].reshape(B * n, spec.input_dim), h, params)
            qs.append(dc.reshape(q, (B, n, spec.n_actions)))
        return qs

    def _joint(self, q_chosen: Node, states: np.ndarray, params: Mapping[str, Node], alpha) -> Node:
        """Mixer output per row, REM-combined when enabled: (R, K) or (R, P)."""
        out = mix(q_chosen, states, params, self.mixer_spec)
        if self.uses_rem:
            if alpha is None:
                raise ContractViolation("REM is enabled but no simplex weights were given")
            out = rem_combine(out, alpha)
        return out

    def online_values(self, batch: EpisodeBatch, params: Mapping[str, Node], alpha=None) -> Node:
        B, L = batch.size, batch.steps
        qs = self._unroll(batch, params, L)
        chosen = dc.stack([dc.gather(qs[t], batch.actions[:, t]) for t in range(L)], axis=1)
        chosen = dc.reshape(chosen, (B * L, self.info.n_agents))
        states = batch.state[:, :L].reshape(B * L, -1)
        return self._joint(chosen, states, params, alpha)

    def compute_targets(self, batch: EpisodeBatch, alpha=None, target_params: ParameterStore | None = None) -> np.ndarray:
        """Bellman targets ``r + gamma * Z'(s', u')`` per (episode, step) row, untracked.

        ``u'`` is each agent's greedy action under the target agent network.
        Terminated steps do not bootstrap; steps cut by the limit do.
        """
        store = target_params if target_params is not None else self.target_params
        view = dc.constants(store)
        B, L = batch.size, batch.steps
        K = self.cfg.mixer.n_combined if self.uses_rem else self.mixer_spec.n_outputs
        r = batch.reward.reshape(B * L, 1)
        term = batch.terminated.reshape(B * L, 1)
        if np.all(term | ~batch.filled.reshape(B * L, 1)):
            # nothing bootstraps (e.g. one-shot games): skip the target network entirely
            return np.where(term, r, 0.0) + np.zeros((B * L, K))
        qs = self._unroll(batch, view, L + 1)
        q_next = np.stack([qs[t].value for t in range(1, L + 1)], axis=1)  # (B, L, n, A)
        u_next = greedy(q_next, batch.avail[:, 1: L + 1])
        chosen = np.take_along_axis(q_next, u_next[..., None], axis=-1)[..., 0]
        chosen = chosen.reshape(B * L, self.info.n_agents)
        states = batch.state[:, 1: L + 1].reshape(B * L, -1)
        z_next = self._joint(Node(chosen), states, view, alpha).value
        return np.where(term, r + 0.0 * z_next, r + self.gamma * z_next)

    def loss(self, batch: EpisodeBatch, params: Mapping[str, Node], alpha=None, targets: np.ndarray | None = None) -> Node:
        if targets is None:
            targets = self.compute_targets(batch, alpha)
        rows = np.flatnonzero(batch.filled.reshape(-1))
        if rows.size == 0:
            raise ContractViolation("batch has no filled steps")
        current = dc.take_rows(self.online_values(batch, params, alpha), rows)
        wanted = targets[rows]
        if self.distributional:
            per_row = mmd_rows_node(current, wanted, self.kernel)
        else:
            per_row = dc.square(dc.sub(current, wanted))
        return dc.scale(dc.total(per_row), 1.0 / rows.size)

    # -- updates ---------------------------------------------------------

    def train_step(self, batch: EpisodeBatch, alpha=None) -> float:
        """One optimiser step on a replayed batch; returns the loss before the update."""
        targets = self.compute_targets(batch, alpha)
        tape = dc.Tape()
        loss = self.loss(batch, tape.bind(self.params), alpha, targets)
        value = float(loss.value)
        if not np.isfinite(value):
            raise ContractViolation(
                "non-finite loss; batch stats: "
                f"episodes={batch.size} filled={int(batch.filled.sum())} "
                f"reward[min,max]=({batch.reward.min():.4g},{batch.reward.max():.4g}) "
                f"targets finite={bool(np.all(np.isfinite(targets)))}"
            )
        self.params.zero_grad()
        tape.backward(loss)
        self.optimizer.step(self.params)
        return value

    def maybe_sync_target(self, episode_counter: int, period: int | None = None) -> bool:
        return maybe_sync_target(self.params, self.target_params, episode_counter, period or self.cfg.train.target_period)

    # -- evaluation helpers ----------------------------------------------

    def joint_particles(self, observations: np.ndarray, state: np.ndarray, joint_actions: np.ndarray) -> np.ndarray:
        """Raw mixer outputs for a single first-step observation under each given joint action.

        ``joint_actions`` is (J, n); returns (J, n_outputs).  Used to inspect what
        the trained network believes about one-shot games.
        """
        spec = self.agent_spec
        view = dc.constants(self.params)
        inputs = build_inputs(observations, None, spec)
        q, _ = agent_forward(inputs, init_hidden(spec.n_agents, spec.hidden_dim), view)
        J = len(joint_actions)
        chosen = q.value[np.arange(spec.n_agents)[None, :], np.asarray(joint_actions)]
        states = np.repeat(np.asarray(state, dtype=np.float64)[None, :], J, axis=0)
        return mix(chosen, states, view, self.mixer_spec).value


def maybe_sync_target(params: ParameterStore, target_params: ParameterStore, episode_counter: int, period: int) -> bool:
    if episode_counter > 0 and episode_counter % period == 0:
        target_params.load_from(params)
        return True
    return False


def collect_episode(
    env: MultiAgentEnv,
    params: ParameterStore,
    spec: AgentSpec,
    epsilon: float,
    rng: np.random.Generator,
    seed: int | None = None,
) -> EpisodeRecord:
    """Roll out one episode with decentralised epsilon-greedy actions."""
    info = env.env_info()
    ep = EpisodeRecord.empty(info)
    view = dc.constants(params)
    step = env.reset(seed)
    hidden = init_hidden(info.n_agents, spec.hidden_dim)
    last = None
    total = 0.0
    for t in range(info.episode_limit):
        ep.state[t], ep.obs[t], ep.avail[t] = step.state, step.observations, step.avail_actions
        q, h = agent_forward(build_inputs(step.observations, last, spec), hidden, view)
        hidden = h.value
        actions = np.array(
            [select_action(q.value[a], step.avail_actions[a], epsilon, rng) for a in range(info.n_agents)]
        )
        step = env.step(actions)
        ep.actions[t] = actions
        ep.reward[t] = step.reward
        ep.terminated[t] = step.terminated
        ep.truncated[t] = step.truncated
        ep.filled[t] = True
        total += step.reward
        last = actions
        if step.done:
            break
    else:
        raise ContractViolation("environment exceeded its declared episode limit")
    t += 1
    ep.state[t], ep.obs[t], ep.avail[t] = step.state, step.observations, step.avail_actions
    ep.episode_return = total
    ep.success = bool(env.success())
    return ep
