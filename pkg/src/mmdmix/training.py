"""Outer training loop: collect, store, replay, update, sync, evaluate, log."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .agents import EpsilonSchedule
from .config import ExperimentConfig
from .diffcore import save_checkpoint
from .envs import make_env
from .learner import Learner, ReplayBuffer, collect_episode
from .rem import sample_simplex

log = logging.getLogger(__name__)

METRICS_SCHEMA = "mmdmix-metrics/1"
METRICS_COLUMNS = (
    "env_steps",
    "episodes",
    "train_loss",
    "eval_return_mean",
    "eval_return_median",
    "eval_success_rate",
    "epsilon",
)


@dataclass
class MetricsRow:
    env_steps: int
    episodes: int
    train_loss: float
    eval_return_mean: float
    eval_return_median: float
    eval_success_rate: float
    epsilon: float

    def as_list(self) -> list[str]:
        return [repr(getattr(self, c)) for c in METRICS_COLUMNS]


@dataclass
class EvalSummary:
    episodes: int
    return_mean: float
    return_median: float
    success_rate: float
    returns: list[float] = field(default_factory=list)


@dataclass
class RunResult:
    learner: Learner
    rows: list[MetricsRow]
    env_steps: int
    episodes: int


def _seed_int(*entropy: int) -> int:
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


def evaluate(learner: Learner, cfg: ExperimentConfig, n_episodes: int, seed: int, eval_index: int = 0) -> EvalSummary:
    """Greedy episodes with the online parameters; seeded by (seed, eval_index) only."""
    if n_episodes < 1:
        raise ValueError("evaluation needs at least one episode")
    env = make_env(cfg.env, seed=_seed_int(seed, 1_000_003, eval_index))
    rng = np.random.default_rng(_seed_int(seed, 2_000_003, eval_index))
    returns, wins = [], 0
    for i in range(n_episodes):
        ep = collect_episode(env, learner.params, learner.agent_spec, 0.0, rng, seed=_seed_int(seed, eval_index, i))
        returns.append(ep.episode_return)
        wins += ep.success
    arr = np.array(returns)
    return EvalSummary(n_episodes, float(arr.mean()), float(np.median(arr)), wins / n_episodes, returns)


def format_metrics(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for row in rows:
        writer.writerow(row.as_list())
    return buf.getvalue()


def read_metrics(path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRICS_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        rows = [[float(v) for v in r] for r in reader if r]
    data = np.array(rows, dtype=np.float64).reshape(-1, len(METRICS_COLUMNS))
    return {c: data[:, i] for i, c in enumerate(METRICS_COLUMNS)}


def write_manifest(out: Path, cfg: ExperimentConfig, extra: dict) -> None:
    manifest = {
        "config": cfg.to_flat(),
        "seed": cfg.seed,
        "label": cfg.label(),
        "version": __version__,
        "metrics_schema": METRICS_SCHEMA,
        "outputs": {"metrics": "metrics.csv", "checkpoint": "checkpoints/last.ckpt"},
    }
    manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_training(cfg: ExperimentConfig, out_dir=None, progress: bool = False) -> RunResult:
    """Train for ``train.total_steps`` environment steps; fully determined by ``cfg.seed``.

    With ``out_dir`` set, writes ``manifest.json`` first, then ``metrics.csv`` and
    ``checkpoints/last.ckpt`` at every evaluation.
    """
    cfg.validate()
    master = np.random.SeedSequence(cfg.seed)
    init_ss, act_ss, env_ss, sample_ss = master.spawn(4)
    env = make_env(cfg.env, seed=int(env_ss.generate_state(1)[0]))
    learner = Learner(cfg, env.env_info(), np.random.default_rng(init_ss))
    act_rng = np.random.default_rng(act_ss)
    sample_rng = np.random.default_rng(sample_ss)
    env_seeds = np.random.default_rng(env_ss)
    schedule = EpsilonSchedule(cfg.epsilon.start, cfg.epsilon.finish, cfg.epsilon.anneal_steps)
    buffer = ReplayBuffer(cfg.train.buffer_size)
    tc = cfg.train

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        write_manifest(out, cfg, {"started": time.strftime("%Y-%m-%dT%H:%M:%S%z")})
        (out / "metrics.csv").write_text(format_metrics([]), encoding="utf-8")

    rows: list[MetricsRow] = []
    losses: list[float] = []
    env_steps = episodes = 0
    next_eval = tc.eval_interval

    def record_eval():
        summary = evaluate(learner, cfg, tc.eval_episodes, cfg.seed, len(rows))
        loss = float(np.mean(losses)) if losses else float("nan")
        losses.clear()
        rows.append(MetricsRow(env_steps, episodes, loss, summary.return_mean, summary.return_median,
                               summary.success_rate, schedule(env_steps)))
        if out is not None:
            (out / "metrics.csv").write_text(format_metrics(rows), encoding="utf-8")
            save_checkpoint(
                out / "checkpoints" / "last.ckpt",
                learner.params,
                learner.optimizer.accum,
                {"config": cfg.to_flat(), "env_steps": env_steps, "episodes": episodes},
            )
        if progress:
            log.info("steps=%d episodes=%d loss=%.4g return=%.3f success=%.2f", env_steps, episodes, loss,
                     summary.return_mean, summary.success_rate)

    while env_steps < tc.total_steps:
        ep = collect_episode(env, learner.params, learner.agent_spec, schedule(env_steps), act_rng,
                             seed=int(env_seeds.integers(2**63)))
        buffer.insert(ep)
        env_steps += ep.length
        episodes += 1
        if len(buffer) >= tc.batch_size:
            batch = buffer.sample(tc.batch_size, sample_rng)
            alpha = sample_simplex(cfg.mixer.n_particles, cfg.mixer.n_combined, sample_rng) if learner.uses_rem else None
            losses.append(learner.train_step(batch, alpha))
        learner.maybe_sync_target(episodes)
        if env_steps >= next_eval:
            record_eval()
            while next_eval <= env_steps:
                next_eval += tc.eval_interval
    if env_steps > 0 and (not rows or rows[-1].env_steps != env_steps):
        record_eval()

    if out is not None:
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        manifest["env_steps"] = env_steps
        manifest["episodes"] = episodes
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return RunResult(learner, rows, env_steps, episodes)
