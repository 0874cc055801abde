"""One-shot cooperative matrix games loaded from plain-text payoff tables."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from ..errors import ConfigError, ContractViolation
from .base import EnvInfo, EnvStep, MultiAgentEnv

Outcome = tuple[float, float]  # (probability, reward)


@dataclass(frozen=True)
class MatrixGameSpec:
    n_actions: tuple[int, ...]
    payoff: dict[tuple[int, ...], tuple[Outcome, ...]]

    def __post_init__(self):
        expected_cells = set(itertools.product(*(range(a) for a in self.n_actions)))
        if set(self.payoff) != expected_cells:
            missing = sorted(expected_cells - set(self.payoff))
            extra = sorted(set(self.payoff) - expected_cells)
            raise ConfigError(f"payoff table incomplete: missing {missing}, unexpected {extra}")
        for cell, outcomes in self.payoff.items():
            probs = [p for p, _ in outcomes]
            if not outcomes or any(p < 0 for p in probs) or not math.isclose(sum(probs), 1.0, abs_tol=1e-9):
                raise ConfigError(f"cell {cell}: outcome probabilities must be >= 0 and sum to 1, got {probs}")
            if any(not math.isfinite(r) for _, r in outcomes):
                raise ConfigError(f"cell {cell}: non-finite reward")

    @property
    def n_agents(self) -> int:
        return len(self.n_actions)

    def cells(self):
        return itertools.product(*(range(a) for a in self.n_actions))

    def expected(self, cell) -> float:
        return sum(p * r for p, r in self.payoff[tuple(cell)])

    def std(self, cell) -> float:
        mu = self.expected(cell)
        return math.sqrt(sum(p * (r - mu) ** 2 for p, r in self.payoff[tuple(cell)]))

    def optimal_cells(self, tol: float = 1e-9) -> list[tuple[int, ...]]:
        """Exhaustive search over all joint actions."""
        values = {c: self.expected(c) for c in self.cells()}
        best = max(values.values())
        return sorted(c for c, v in values.items() if v >= best - tol)


def parse_payoff(text: str) -> MatrixGameSpec:
    """Parse ``a0 a1 ... : p r [p r ...]`` lines; ``#`` starts a comment."""
    payoff: dict[tuple[int, ...], tuple[Outcome, ...]] = {}
    n_agents = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"payoff line {lineno}: expected 'actions : prob reward ...'")
        lhs, rhs = line.split(":", 1)
        try:
            cell = tuple(int(t) for t in lhs.split())
            nums = [float(t) for t in rhs.replace(",", " ").split()]
        except ValueError as exc:
            raise ConfigError(f"payoff line {lineno}: {exc}") from None
        if n_agents is None:
            n_agents = len(cell)
        if len(cell) != n_agents or not cell or any(a < 0 for a in cell):
            raise ConfigError(f"payoff line {lineno}: bad joint action {cell}")
        if not nums or len(nums) % 2:
            raise ConfigError(f"payoff line {lineno}: outcomes must be probability/reward pairs")
        if cell in payoff:
            raise ConfigError(f"payoff line {lineno}: duplicate cell {cell}")
        payoff[cell] = tuple((nums[i], nums[i + 1]) for i in range(0, len(nums), 2))
    if not payoff:
        raise ConfigError("payoff table is empty")
    n_actions = tuple(max(c[i] for c in payoff) + 1 for i in range(n_agents))
    return MatrixGameSpec(n_actions, payoff)


def load_payoff(path) -> MatrixGameSpec:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read payoff file {path}: {exc}") from None
    return parse_payoff(text)


def builtin_payoff(name: str) -> MatrixGameSpec:
    """``deterministic`` or ``stochastic`` table shipped with the package."""
    try:
        text = resources.files(__package__).joinpath("payoffs", f"{name}.txt").read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"no built-in payoff table named {name!r}") from None
    return parse_payoff(text)


class MatrixGame(MultiAgentEnv):
    """Single-step game: every agent acts once, the episode terminates with the cell's reward.

    Observations and state are a constant 1.0, so agents can only coordinate
    through learned values.  A win is picking an optimal cell.
    """

    def __init__(self, spec: MatrixGameSpec, seed: int | None = None):
        if len(set(spec.n_actions)) != 1:
            raise ConfigError("all agents must have the same number of actions")
        self.spec = spec
        self.info = EnvInfo(spec.n_agents, spec.n_actions[0], obs_size=1, state_size=1, episode_limit=1)
        self._optimal = set(spec.optimal_cells())
        self._rng = np.random.default_rng(seed)
        self._done = True
        self._last_cell: tuple[int, ...] | None = None

    def _observe(self, reward=0.0, terminated=False) -> EnvStep:
        n, a = self.info.n_agents, self.info.n_actions
        return EnvStep(
            reward=float(reward),
            terminated=terminated,
            truncated=False,
            state=np.ones(1),
            observations=np.ones((n, 1)),
            avail_actions=np.ones((n, a), dtype=bool),
        )

    def reset(self, seed: int | None = None) -> EnvStep:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._done = False
        self._last_cell = None
        return self._observe()

    def step(self, actions) -> EnvStep:
        if self._done:
            raise ContractViolation("step called on a finished episode; call reset first")
        avail = np.ones((self.info.n_agents, self.info.n_actions), dtype=bool)
        cell = tuple(int(a) for a in self._check_actions(actions, avail))
        outcomes = self.spec.payoff[cell]
        if len(outcomes) == 1:
            reward = outcomes[0][1]
        else:
            probs = np.array([p for p, _ in outcomes])
            idx = self._rng.choice(len(outcomes), p=probs / probs.sum())
            reward = outcomes[idx][1]
        self._done = True
        self._last_cell = cell
        return self._observe(reward, terminated=True)

    def success(self) -> bool:
        return self._last_cell in self._optimal
