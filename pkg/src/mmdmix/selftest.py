"""Property probes run by ``mmdmix selftest`` and reused by the acceptance tests.

Every suite returns a :class:`SuiteResult`; none of them raise on a failed
property, so a report can list every suite even when several fail.
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .agents import AgentSpec, agent_forward, build_inputs, init_agent_params
from .config import ExperimentConfig
from .envs import EnvInfo
from .kernels import Kernel, squared_mmd, squared_mmd_grad
from .learner import EpisodeBatch, EpisodeRecord, Learner
from .mixers import MixerSpec, init_mixer_params, mix
from .rem import rem_combine, sample_simplex

# Gradients smaller than these magnitudes are compared absolutely; central
# differences cannot resolve relative error below roundoff / h.
KERNEL_GRAD_FLOOR = 1e-3
NETWORK_GRAD_FLOOR = 1e-4


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    metrics: dict[str, float] = field(default_factory=dict)


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _random_sets(rng: np.random.Generator, lo: int = 1, hi: int = 16, scale: float = 5.0):
    X = rng.normal(0.0, scale, rng.integers(lo, hi + 1))
    Y = rng.normal(rng.normal(0.0, scale), scale, rng.integers(lo, hi + 1))
    return X, Y


# -- kernels ------------------------------------------------------------------


def mmd_mean_identity(cases: int = 1000, seed: int = 0) -> SuiteResult:
    """Triangle kernel with p = 2: squared MMD equals twice the squared mean gap."""
    rng, k = _rng(seed), Kernel("triangle", 2.0)
    worst = 0.0
    for _ in range(cases):
        X, Y = _random_sets(rng)
        worst = max(worst, abs(squared_mmd(X, Y, k) - 2.0 * (X.mean() - Y.mean()) ** 2))
    return SuiteResult("mmd-mean-identity", worst <= 1e-9, f"worst abs error {worst:.3g} over {cases} pairs",
                       {"worst": worst})


def mmd_basics(cases: int = 1000, seed: int = 1) -> SuiteResult:
    rng = _rng(seed)
    kernels = [Kernel("triangle", 2.0), Kernel("triangle", 1.0), Kernel("gaussian")]
    self_worst = scale_worst = 0.0
    asym = 0
    neg_worst = math.inf
    for i in range(cases):
        k = kernels[i % len(kernels)]
        X, Y = _random_sets(rng)
        self_worst = max(self_worst, abs(squared_mmd(X, X, k)))
        asym += squared_mmd(X, Y, k) != squared_mmd(Y, X, k)
        neg_worst = min(neg_worst, squared_mmd(X, Y, Kernel("gaussian")))
        # the scale law holds for the homogeneous triangle kernel
        c = rng.uniform(-3.0, 3.0)
        tri = Kernel("triangle", 2.0)
        ref = squared_mmd(X, Y, tri)
        scale_worst = max(scale_worst, abs(squared_mmd(c * X, c * Y, tri) - c * c * ref))
    ok = self_worst <= 1e-12 and asym == 0 and neg_worst >= -1e-12 and scale_worst <= 1e-9
    detail = (f"self {self_worst:.3g}, asymmetric {asym}, min gaussian {neg_worst:.3g}, "
              f"scale law {scale_worst:.3g} over {cases} cases")
    return SuiteResult("mmd-basics", ok, detail,
                       {"self": self_worst, "asymmetric": float(asym), "min_gaussian": neg_worst, "scale": scale_worst})


# -- mixer structure ----------------------------------------------------------


def _random_mixer(rng: np.random.Generator, n_agents: int, state_size: int, n_particles: int = 8) -> tuple:
    spec = MixerSpec("mmdmix", n_agents, state_size, embed_dim=8, n_particles=n_particles, hypernet_hidden=16,
                     bias_hidden=8)
    store = dc.ParameterStore()
    init_mixer_params(store, spec, rng)
    for v in store.values.values():
        v *= rng.uniform(0.5, 3.0)
    return spec, store


def _mix_values(q: np.ndarray, state: np.ndarray, store, spec) -> np.ndarray:
    return mix(q, state, dc.constants(store), spec).value


def monotonicity(draws: int = 100, seed: int = 2, delta: float = 0.1) -> SuiteResult:
    """Raising any single agent value never lowers a raw or REM-combined particle."""
    rng = _rng(seed)
    worst = math.inf
    for _ in range(draws):
        n = int(rng.integers(2, 5))
        spec, store = _random_mixer(rng, n, 5)
        q = rng.normal(0.0, 3.0, (1, n))
        s = rng.normal(0.0, 1.0, (1, 5))
        alpha = sample_simplex(spec.n_particles, 8, rng)
        base = _mix_values(q, s, store, spec)[0]
        for a in range(n):
            bumped = q.copy()
            bumped[0, a] += delta
            up = _mix_values(bumped, s, store, spec)[0]
            worst = min(worst, float(np.min(up - base)))
            worst = min(worst, float(np.min(rem_combine(up, alpha).value - rem_combine(base, alpha).value)))
    ok = worst >= -1e-9
    return SuiteResult("monotonicity", ok, f"smallest particle change {worst:.3g} over {draws} draws",
                       {"worst": worst})


def igm_consistency(instances: int = 100, seed: int = 3) -> SuiteResult:
    """Joint argmax of the mean particle over all 9 cells matches the per-agent argmaxes."""
    rng = _rng(seed)
    hits = 0
    cells = np.array(list(itertools.product(range(3), repeat=2)))
    for _ in range(instances):
        spec, store = _random_mixer(rng, 2, 4)
        q = rng.normal(0.0, 2.0, (2, 3))
        s = np.repeat(rng.normal(0.0, 1.0, (1, 4)), len(cells), axis=0)
        chosen = q[np.arange(2)[None, :], cells]
        means = _mix_values(chosen, s, store, spec).mean(axis=1)
        hits += tuple(cells[int(np.argmax(means))]) == tuple(np.argmax(q, axis=1))
    return SuiteResult("igm-consistency", hits == instances, f"{hits}/{instances} instances consistent",
                       {"hits": float(hits)})


def rem_properties(draws: int = 10_000, seed: int = 4) -> SuiteResult:
    rng = _rng(seed)
    alpha = sample_simplex(8, draws, rng)
    row_err = float(np.max(np.abs(alpha.sum(axis=1) - 1.0)))
    nonneg = bool(np.all(alpha >= 0.0))
    z = rng.normal(0.0, 4.0, (64, 8))
    combined = rem_combine(z, alpha[:256]).value
    convex = bool(np.all(combined >= z.min(axis=1, keepdims=True)) and np.all(combined <= z.max(axis=1, keepdims=True)))
    one_hot = bool(np.array_equal(rem_combine(z, np.eye(8)).value, z))
    uniform = float(np.max(np.abs(rem_combine(z, np.full((1, 8), 1.0 / 8)).value[:, 0] - z.mean(axis=1))))
    ok = row_err <= 1e-12 and nonneg and convex and one_hot and uniform <= 1e-12
    detail = (f"row sums {row_err:.3g} over {draws} draws, convex {convex}, one-hot {one_hot}, "
              f"uniform mean {uniform:.3g}")
    return SuiteResult("rem-properties", ok, detail, {"row_sum": row_err, "uniform": uniform})


# -- gradients ----------------------------------------------------------------


def _kernel_grad_error(rng: np.random.Generator, k: Kernel, h: float = 1e-6) -> float:
    X, Y = _random_sets(rng, 1, 8, 2.0)
    analytic = squared_mmd_grad(X, Y, k)
    worst = 0.0
    for i in range(X.size):
        up, down = X.copy(), X.copy()
        up[i] += h
        down[i] -= h
        numeric = (squared_mmd(up, Y, k) - squared_mmd(down, Y, k)) / (2 * h)
        worst = max(worst, abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), KERNEL_GRAD_FLOOR))
    return worst


def _agent_loss_fn(spec: AgentSpec, inputs: np.ndarray, h0: np.ndarray, weights: np.ndarray) -> Callable:
    def fn(params):
        q, h = agent_forward(inputs, h0, params)
        q2, _ = agent_forward(inputs[::-1].copy(), h, params)
        return dc.total(dc.mul(dc.add(q, q2), weights))

    return fn


def tiny_config(**mixer) -> ExperimentConfig:
    """Narrow networks with every code path intact; used for finite-difference checks."""
    cfg = ExperimentConfig()
    cfg.agent.hidden_dim = 6
    cfg.mixer.embed_dim = 4
    cfg.mixer.hypernet_hidden = 5
    cfg.mixer.bias_hidden = 3
    cfg.mixer.n_particles = 8
    cfg.mixer.n_combined = 8
    for key, value in mixer.items():
        setattr(cfg.mixer, key, value)
    return cfg.validate()


def tiny_episode(rng: np.random.Generator, info: EnvInfo, steps: int = 2, end: str = "terminated") -> EpisodeRecord:
    """Random episode of ``steps`` transitions whose last step is ``terminated`` or ``truncated``."""
    rec = EpisodeRecord.empty(info)
    rec.state[: steps + 1] = rng.normal(size=(steps + 1, info.state_size))
    rec.obs[: steps + 1] = rng.normal(size=(steps + 1, info.n_agents, info.obs_size))
    rec.actions[:steps] = rng.integers(0, info.n_actions, (steps, info.n_agents))
    rec.reward[:steps] = rng.normal(0.0, 3.0, steps)
    rec.filled[:steps] = True
    getattr(rec, end)[steps - 1] = True
    return rec


def tiny_batch(rng: np.random.Generator, info: EnvInfo, steps: int = 2, episodes: int = 2) -> EpisodeBatch:
    """Random episodes of ``steps`` transitions: the first terminates, the rest are cut by the limit."""
    return EpisodeBatch.from_records(
        [tiny_episode(rng, info, steps, "terminated" if e == 0 else "truncated") for e in range(episodes)]
    )


def full_loss_grad_error(seed: int = 5, kind: str = "mmdmix", rem: bool = True, kernel: str = "triangle") -> float:
    """Worst relative error of the training loss gradient over every trainable scalar."""
    rng = _rng(seed)
    cfg = tiny_config(kind=kind)
    cfg.rem.enabled = rem
    cfg.kernel.kind = kernel
    info = EnvInfo(n_agents=2, n_actions=3, obs_size=3, state_size=4, episode_limit=2)
    learner = Learner(cfg, info, rng)
    # a distinct target network so the bootstrapped term is not a copy of the online one
    for v in learner.target_params.values.values():
        v += rng.normal(0.0, 0.1, v.shape)
    batch = tiny_batch(rng, info)
    alpha = sample_simplex(cfg.mixer.n_particles, cfg.mixer.n_combined, rng) if learner.uses_rem else None
    targets = learner.compute_targets(batch, alpha)
    return dc.finite_diff_check(lambda p: learner.loss(batch, p, alpha, targets), learner.params,
                                floor=NETWORK_GRAD_FLOOR)


def gradient_checks(seed: int = 6) -> SuiteResult:
    rng = _rng(seed)
    kernel_worst = 0.0
    for k in (Kernel("triangle", 2.0), Kernel("triangle", 1.5), Kernel("gaussian")):
        for _ in range(20):
            kernel_worst = max(kernel_worst, _kernel_grad_error(rng, k))

    spec = AgentSpec(n_agents=2, n_actions=3, obs_size=3, hidden_dim=6)
    store = dc.ParameterStore()
    init_agent_params(store, spec, rng)
    inputs = build_inputs(rng.normal(size=(2, 3)), np.array([1, -1]), spec)
    h0 = rng.normal(0.0, 0.5, (2, spec.hidden_dim))
    agent_worst = dc.finite_diff_check(_agent_loss_fn(spec, inputs, h0, rng.normal(size=(2, 3))), store,
                                       floor=NETWORK_GRAD_FLOOR)
    loss_worst = full_loss_grad_error(seed + 1)
    ok = kernel_worst <= 1e-6 and agent_worst <= 1e-4 and loss_worst <= 1e-4
    detail = f"worst relative error: kernels {kernel_worst:.3g}, agent {agent_worst:.3g}, full loss {loss_worst:.3g}"
    return SuiteResult("gradients", ok, detail,
                       {"kernels": kernel_worst, "agent": agent_worst, "loss": loss_worst,
                        "worst": max(kernel_worst, agent_worst, loss_worst)})


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "mmd-mean-identity": mmd_mean_identity,
    "mmd-basics": mmd_basics,
    "monotonicity": monotonicity,
    "igm-consistency": igm_consistency,
    "rem-properties": rem_properties,
    "gradients": gradient_checks,
}


def run_all(faults: tuple[str, ...] = ()) -> list[SuiteResult]:
    """Run every suite, optionally with faults injected into the differentiation core."""
    saved = set(dc.FAULTS)
    dc.FAULTS.update(faults)
    try:
        return [suite() for suite in SUITES.values()]
    finally:
        dc.FAULTS.clear()
        dc.FAULTS.update(saved)
