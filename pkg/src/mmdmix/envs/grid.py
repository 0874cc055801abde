"""Toroidal grid where two hunters must jointly capture a randomly moving prey."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, ContractViolation
from .base import EnvInfo, EnvStep, MultiAgentEnv

STAY, NORTH, SOUTH, WEST, EAST, CAPTURE = range(6)
MOVES = {STAY: (0, 0), NORTH: (0, -1), SOUTH: (0, 1), WEST: (-1, 0), EAST: (1, 0), CAPTURE: (0, 0)}
PREY_MOVES = [(0, 0), (0, -1), (0, 1), (-1, 0), (1, 0)]

CAPTURE_REWARD = 10.0
STEP_PENALTY = -0.1
VIEW_RADIUS = 2


def torus_delta(a: int, b: int, size: int) -> int:
    """Signed offset from ``a`` to ``b`` wrapped into [-size//2, size - size//2)."""
    return (b - a + size // 2) % size - size // 2


def torus_manhattan(p, q, size: int) -> int:
    return abs(torus_delta(p[0], q[0], size)) + abs(torus_delta(p[1], q[1], size))


class GridCapture(MultiAgentEnv):
    """Capture succeeds when both hunters are orthogonally adjacent to the prey and both choose CAPTURE.

    Each hunter observes, within Manhattan radius 2, the scaled offset to the
    prey and to its partner (with a visibility flag each).  The state is the
    scaled position of every entity.  Hunters cannot enter the prey's cell; the
    prey moves uniformly among staying and the free neighbouring cells.
    """

    n_hunters = 2

    def __init__(self, grid_size: int = 4, episode_limit: int = 30, prey_moves: bool = True, seed: int | None = None):
        if grid_size < 3:
            raise ConfigError(f"env.grid_size must be >= 3, got {grid_size}")
        if episode_limit < 1:
            raise ConfigError(f"env.episode_limit must be >= 1, got {episode_limit}")
        self.size = grid_size
        self.prey_moves = prey_moves
        self.info = EnvInfo(self.n_hunters, len(MOVES), obs_size=6, state_size=2 * (self.n_hunters + 1), episode_limit=episode_limit)
        self._rng = np.random.default_rng(seed)
        self.hunters = np.zeros((self.n_hunters, 2), dtype=np.int64)
        self.prey = np.zeros(2, dtype=np.int64)
        self.t = 0
        self._done = True
        self._captured = False

    # -- observation -----------------------------------------------------

    def _relative(self, src, dst) -> list[float]:
        dx = torus_delta(src[0], dst[0], self.size)
        dy = torus_delta(src[1], dst[1], self.size)
        if abs(dx) + abs(dy) > VIEW_RADIUS:
            return [0.0, 0.0, 0.0]
        return [1.0, dx / VIEW_RADIUS, dy / VIEW_RADIUS]

    def observations(self) -> np.ndarray:
        obs = []
        for i in range(self.n_hunters):
            partner = self.hunters[1 - i]
            obs.append(self._relative(self.hunters[i], self.prey) + self._relative(self.hunters[i], partner))
        return np.array(obs)

    def state(self) -> np.ndarray:
        return np.concatenate([self.hunters.reshape(-1), self.prey]).astype(np.float64) / self.size

    def _observe(self, reward=0.0, terminated=False, truncated=False) -> EnvStep:
        return EnvStep(
            reward=float(reward),
            terminated=terminated,
            truncated=truncated,
            state=self.state(),
            observations=self.observations(),
            avail_actions=np.ones((self.n_hunters, self.info.n_actions), dtype=bool),
        )

    # -- dynamics --------------------------------------------------------

    def reset(self, seed: int | None = None) -> EnvStep:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        cells = self._rng.choice(self.size * self.size, size=self.n_hunters + 1, replace=False)
        coords = np.stack([cells % self.size, cells // self.size], axis=1)
        self.hunters = coords[: self.n_hunters].copy()
        self.prey = coords[self.n_hunters].copy()
        self.t = 0
        self._done = False
        self._captured = False
        return self._observe()

    def adjacent(self, i: int) -> bool:
        return torus_manhattan(self.hunters[i], self.prey, self.size) == 1

    def step(self, actions) -> EnvStep:
        if self._done:
            raise ContractViolation("step called on a finished episode; call reset first")
        avail = np.ones((self.n_hunters, self.info.n_actions), dtype=bool)
        acts = self._check_actions(actions, avail)
        self.t += 1
        if all(a == CAPTURE for a in acts) and all(self.adjacent(i) for i in range(self.n_hunters)):
            self._done = True
            self._captured = True
            return self._observe(CAPTURE_REWARD, terminated=True)

        for i, a in enumerate(acts):
            dx, dy = MOVES[int(a)]
            nxt = (self.hunters[i] + (dx, dy)) % self.size
            if not np.array_equal(nxt, self.prey):
                self.hunters[i] = nxt
        if self.prey_moves:
            occupied = {tuple(h) for h in self.hunters}
            options = [
                (self.prey + d) % self.size
                for d in PREY_MOVES
                if d == (0, 0) or tuple((self.prey + d) % self.size) not in occupied
            ]
            self.prey = options[self._rng.integers(len(options))]
        truncated = self.t >= self.info.episode_limit
        self._done = truncated
        return self._observe(STEP_PENALTY, truncated=truncated)

    def success(self) -> bool:
        return self._captured
