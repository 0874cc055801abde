"""Joint-value heads: additive (VDN), monotonic scalar (QMIX) and monotonic particle (MMD-MIX) mixers.

The monotonic mixers take their layer weights from hypernetworks of the
global state and pass every generated weight through ``abs_transform``, so
each output is nondecreasing in every agent's chosen-action value.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Node, ParameterStore
from .errors import ConfigError


@dataclass(frozen=True)
class MixerSpec:
    kind: str  # vdn | qmix | mmdmix
    n_agents: int
    state_size: int
    embed_dim: int = 32
    n_particles: int = 8
    hypernet_hidden: int = 64
    bias_hidden: int = 32

    @property
    def n_outputs(self) -> int:
        return self.n_particles if self.kind == "mmdmix" else 1


def init_mixer_params(store: ParameterStore, spec: MixerSpec, rng: np.random.Generator) -> None:
    if spec.kind == "vdn":
        return
    if spec.kind not in ("qmix", "mmdmix"):
        raise ConfigError(f"unknown mixer kind {spec.kind!r}")
    n_heads = spec.n_outputs
    S, E, H, Hb = spec.state_size, spec.embed_dim, spec.hypernet_hidden, spec.bias_hidden
    dc.init_dense(store, "mixer.hyper_w1.0", S, H, rng)
    dc.init_dense(store, "mixer.hyper_w1.1", H, spec.n_agents * E, rng)
    dc.init_dense(store, "mixer.hyper_b1", S, E, rng)
    # one hypernetwork per particle for the last layer's weights and bias
    dc.init_dense(store, "mixer.hyper_w2.0", S, n_heads * H, rng)
    _init_grouped(store, "mixer.hyper_w2.1", n_heads, H, E, rng)
    dc.init_dense(store, "mixer.hyper_b2.0", S, n_heads * Hb, rng)
    _init_grouped(store, "mixer.hyper_b2.1", n_heads, Hb, 1, rng)


def _init_grouped(store, prefix, groups, n_in, n_out, rng) -> None:
    bound = 1.0 / np.sqrt(n_in)
    store.add(f"{prefix}.weight", rng.uniform(-bound, bound, (groups, n_out, n_in)))
    store.add(f"{prefix}.bias", rng.uniform(-bound, bound, (groups, n_out)))


def _hyper(state: Node, params: Mapping[str, Node], prefix: str) -> Node:
    return dc.dense(state, params[f"{prefix}.weight"], params[f"{prefix}.bias"], name=prefix)


def vdn_mix(q_chosen) -> Node:
    """Sum of the agents' chosen-action values: (B, n) -> (B,)."""
    q = q_chosen if isinstance(q_chosen, Node) else Node(q_chosen)
    if q.value.ndim == 1:
        return dc.total(q)
    return dc.row_sum(q)


def mmd_mix(q_chosen, state, params: Mapping[str, Node], spec: MixerSpec) -> Node:
    """(B, n) agent values and (B, S) states -> (B, N) joint-return particles.

    The first mixing layer is shared by all particles; each particle has its
    own hypernetwork for the last layer's weights and bias.
    """
    q = q_chosen if isinstance(q_chosen, Node) else Node(q_chosen)
    s = state if isinstance(state, Node) else Node(state)
    if q.value.ndim != 2 or q.shape[1] != spec.n_agents:
        raise ConfigError(f"mixer expects agent values of shape (B, {spec.n_agents}), got {q.shape}")
    if s.value.ndim != 2 or s.shape != (q.shape[0], spec.state_size):
        raise ConfigError(f"mixer expects states of shape ({q.shape[0]}, {spec.state_size}), got {s.shape}")
    B, n, E = q.shape[0], spec.n_agents, spec.embed_dim
    heads = spec.n_outputs

    w1 = dc.abs_transform(_hyper(dc.relu(_hyper(s, params, "mixer.hyper_w1.0")), params, "mixer.hyper_w1.1"))
    w1 = dc.reshape(w1, (B, n, E))
    b1 = _hyper(s, params, "mixer.hyper_b1")
    hidden = dc.elu(dc.add(dc.batched_vecmat(q, w1), b1))

    h2 = dc.reshape(dc.relu(_hyper(s, params, "mixer.hyper_w2.0")), (B, heads, spec.hypernet_hidden))
    w2 = dc.abs_transform(
        dc.grouped_dense(h2, params["mixer.hyper_w2.1.weight"], params["mixer.hyper_w2.1.bias"], name="mixer.hyper_w2.1")
    )
    hb = dc.reshape(dc.relu(_hyper(s, params, "mixer.hyper_b2.0")), (B, heads, spec.bias_hidden))
    b2 = dc.grouped_dense(hb, params["mixer.hyper_b2.1.weight"], params["mixer.hyper_b2.1.bias"], name="mixer.hyper_b2.1")
    b2 = dc.reshape(b2, (B, heads))
    return dc.add(dc.batched_matvec(w2, hidden), b2)


def qmix_mix(q_chosen, state, params: Mapping[str, Node], spec: MixerSpec) -> Node:
    """Scalar monotonic mixing: the single-particle case of :func:`mmd_mix`, returned as (B,)."""
    if spec.n_outputs != 1:
        raise ConfigError("qmix_mix needs a single-output mixer spec")
    out = mmd_mix(q_chosen, state, params, spec)
    return dc.reshape(out, (out.shape[0],))


def mix(q_chosen, state, params: Mapping[str, Node], spec: MixerSpec) -> Node:
    """Dispatch on ``spec.kind``; always returns (B, n_outputs)."""
    if spec.kind == "vdn":
        out = vdn_mix(q_chosen)
        return dc.reshape(out, (out.shape[0], 1))
    return mmd_mix(q_chosen, state, params, spec)
