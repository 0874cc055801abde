from __future__ import annotations

from .base import EnvInfo, EnvStep, MultiAgentEnv
from .grid import GridCapture
from .matrix import MatrixGame, MatrixGameSpec, builtin_payoff, load_payoff, parse_payoff

ENV_NAMES = ("matrix", "matrix_stochastic", "grid")


def make_env(env_cfg, seed: int | None = None) -> MultiAgentEnv:
    """Build an environment from the ``env`` config section."""
    from ..errors import ConfigError

    name = env_cfg.name
    if name in ("matrix", "matrix_stochastic"):
        if env_cfg.payoff_file:
            spec = load_payoff(env_cfg.payoff_file)
        else:
            spec = builtin_payoff("deterministic" if name == "matrix" else "stochastic")
        return MatrixGame(spec, seed=seed)
    if name == "grid":
        return GridCapture(env_cfg.grid_size, env_cfg.episode_limit, env_cfg.prey_moves, seed=seed)
    raise ConfigError(f"env.name must be one of {ENV_NAMES}, got {name!r}")


__all__ = [
    "ENV_NAMES",
    "EnvInfo",
    "EnvStep",
    "GridCapture",
    "MatrixGame",
    "MatrixGameSpec",
    "MultiAgentEnv",
    "builtin_payoff",
    "load_payoff",
    "make_env",
    "parse_payoff",
]
