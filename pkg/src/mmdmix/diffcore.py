"""Small reverse-mode differentiation substrate used by every network in the package.

Values are float64 numpy arrays wrapped in :class:`Node`.  Operations on nodes
that belong to a :class:`Tape` are recorded; ``Tape.backward`` replays the
record in reverse and accumulates gradients into the bound
:class:`ParameterStore`.  Nodes without a tape are plain constants, which is
how target-network evaluation stays out of the gradient path.

Only the handful of primitives the agent and mixing networks need are
provided.  Elementwise binary ops require identical shapes.
"""

from __future__ import annotations

import json
import os
import struct
from collections.abc import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractViolation

DTYPE = np.float64

# Names of deliberately injected faults, consulted by the self-test harness.
FAULTS: set[str] = set()


class Node:
    """A value in a computation, optionally tracked by a tape."""

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value, tape: Tape | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tracked = "tracked" if self.tape is not None else "const"
        return f"Node(shape={self.shape}, {tracked})"


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self) -> None:
        self._ops: list[tuple[Node, tuple[Node, ...], Backward]] = []
        self._leaves: dict[str, Node] = {}
        self._store: ParameterStore | None = None

    def __len__(self) -> int:
        return len(self._ops)

    def bind(self, store: ParameterStore) -> Mapping[str, Node]:
        """Expose ``store`` as tracked leaves; a leaf exists once it is read."""
        if self._store is not None and self._store is not store:
            raise ContractViolation("a tape can only be bound to one parameter store")
        self._store = store
        return _ParamView(store, self)

    def touched(self) -> list[str]:
        return sorted(self._leaves)

    def _leaf(self, store: ParameterStore, name: str) -> Node:
        node = self._leaves.get(name)
        if node is None:
            node = Node(store.values[name], self)
            self._leaves[name] = node
        return node

    def record(self, value: np.ndarray, inputs: tuple[Node, ...], backward: Backward) -> Node:
        out = Node(value, self)
        self._ops.append((out, inputs, backward))
        return out

    def backward(self, out: Node) -> None:
        """Accumulate d(out)/d(param) into the bound store's gradient buffers."""
        if out.tape is not self:
            raise ContractViolation("output was not produced on this tape")
        if out.value.size != 1:
            raise ContractViolation(f"backward needs a scalar output, got shape {out.shape}")
        out.grad = np.ones_like(out.value)
        for node, inputs, fn in reversed(self._ops):
            if node.grad is None:
                continue
            grads = fn(node.grad)
            for inp, g in zip(inputs, grads):
                if g is None or inp.tape is None:
                    continue
                inp.grad = g if inp.grad is None else inp.grad + g
        if self._store is None:
            return
        for name, leaf in self._leaves.items():
            if leaf.grad is not None:
                self._store.grads[name] += leaf.grad


class _ParamView(Mapping):
    def __init__(self, store: ParameterStore, tape: Tape | None):
        self._store = store
        self._tape = tape

    def __getitem__(self, name: str) -> Node:
        if name not in self._store.values:
            raise KeyError(name)
        if self._tape is None:
            return Node(self._store.values[name])
        return self._tape._leaf(self._store, name)

    def __iter__(self) -> Iterator[str]:
        return iter(self._store.values)

    def __len__(self) -> int:
        return len(self._store.values)


def constants(store: ParameterStore) -> Mapping[str, Node]:
    """Untracked view of ``store``; nothing computed from it receives gradients."""
    return _ParamView(store, None)


class ParameterStore:
    """Named float64 parameters, each with a gradient buffer of the same shape."""

    def __init__(self) -> None:
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> None:
        if name in self.values:
            raise ConfigError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=DTYPE, copy=True)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def names(self) -> list[str]:
        return list(self.values)

    def num_scalars(self) -> int:
        return sum(v.size for v in self.values.values())

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> ParameterStore:
        other = ParameterStore()
        for name, value in self.values.items():
            other.add(name, value)
        return other

    def load_from(self, source: ParameterStore) -> None:
        """Overwrite values in place with ``source``'s (target synchronisation)."""
        if list(source.values) != list(self.values):
            raise ContractViolation("parameter stores have different layouts")
        for name, value in source.values.items():
            if value.shape != self.values[name].shape:
                raise ContractViolation(f"shape mismatch for {name}: {value.shape} vs {self.values[name].shape}")
            np.copyto(self.values[name], value)

    def equals(self, other: ParameterStore) -> bool:
        """Bitwise equality of all values."""
        if list(other.values) != list(self.values):
            return False
        return all(
            self.values[k].shape == other.values[k].shape
            and self.values[k].tobytes() == other.values[k].tobytes()
            for k in self.values
        )


# ---------------------------------------------------------------------------
# primitive operations


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _tape_of(*nodes: Node) -> Tape | None:
    for n in nodes:
        if n.tape is not None:
            return n.tape
    return None


def _emit(value: np.ndarray, inputs: tuple[Node, ...], backward: Backward) -> Node:
    tape = _tape_of(*inputs)
    if tape is None:
        return Node(value)
    return tape.record(value, inputs, backward)


def record(value: np.ndarray, inputs: Sequence[Node], backward: Backward) -> Node:
    """Register a custom differentiable operation (used by loss functions)."""
    return _emit(np.asarray(value, dtype=DTYPE), tuple(inputs), backward)


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ConfigError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def dense(x, weight, bias, name: str = "dense") -> Node:
    """``x @ weight.T + bias`` for a vector or a batch of row vectors."""
    x, weight, bias = _as_node(x), _as_node(weight), _as_node(bias)
    if weight.value.ndim != 2 or bias.value.ndim != 1:
        raise ConfigError(f"{name}: weight must be 2-D and bias 1-D, got {weight.shape} and {bias.shape}")
    if x.shape[-1] != weight.shape[1] or bias.shape[0] != weight.shape[0]:
        raise ConfigError(
            f"{name}: input {x.shape}, weight {weight.shape}, bias {bias.shape} are incompatible"
        )
    xv, wv = x.value, weight.value
    out = xv @ wv.T + bias.value

    def backward(g):
        if g.ndim == 1:
            return g @ wv, np.outer(g, xv), g
        return g @ wv, g.T @ xv, g.sum(axis=0)

    return _emit(out, (x, weight, bias), backward)


def grouped_dense(x, weight, bias, name: str = "grouped_dense") -> Node:
    """Independent dense layers per group: x (B, G, in), weight (G, out, in), bias (G, out)."""
    x, weight, bias = _as_node(x), _as_node(weight), _as_node(bias)
    if x.value.ndim != 3 or weight.value.ndim != 3 or bias.value.ndim != 2:
        raise ConfigError(f"{name}: expected ranks 3/3/2, got {x.shape}, {weight.shape}, {bias.shape}")
    if x.shape[1:] != (weight.shape[0], weight.shape[2]) or bias.shape != weight.shape[:2]:
        raise ConfigError(f"{name}: input {x.shape}, weight {weight.shape}, bias {bias.shape} are incompatible")
    xg = x.value.transpose(1, 0, 2)  # (G, B, in)
    wv = weight.value
    out = np.matmul(xg, wv.transpose(0, 2, 1)).transpose(1, 0, 2) + bias.value

    def backward(g):
        gg = g.transpose(1, 0, 2)  # (G, B, out)
        return (
            np.matmul(gg, wv).transpose(1, 0, 2),
            np.matmul(gg.transpose(0, 2, 1), xg),
            g.sum(axis=0),
        )

    return _emit(out, (x, weight, bias), backward)


def relu(x) -> Node:
    x = _as_node(x)
    mask = x.value > 0
    return _emit(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def elu(x) -> Node:
    x = _as_node(x)
    v = x.value
    pos = v >= 0
    ex = np.exp(np.minimum(v, 0.0))
    out = np.where(pos, v, ex - 1.0)
    return _emit(out, (x,), lambda g: (np.where(pos, g, g * ex),))


def abs_transform(x) -> Node:
    """Elementwise |x| with subgradient 0 at the origin."""
    x = _as_node(x)
    sign = np.sign(x.value)
    if "abs_sign_flip" in FAULTS:
        # negative entries keep their sign, so generated weights can go negative
        sign = np.where(sign < 0, -sign, sign)
    return _emit(sign * x.value, (x,), lambda g: (g * sign,))


def tanh(x) -> Node:
    x = _as_node(x)
    t = np.tanh(x.value)
    return _emit(t, (x,), lambda g: (g * (1.0 - t * t),))


def sigmoid(x) -> Node:
    x = _as_node(x)
    s = 0.5 * (np.tanh(0.5 * x.value) + 1.0)
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape("add", a, b)
    return _emit(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape("sub", a, b)
    return _emit(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(x, c: float) -> Node:
    x = _as_node(x)
    return _emit(x.value * c, (x,), lambda g: (g * c,))


def one_minus(x) -> Node:
    x = _as_node(x)
    return _emit(1.0 - x.value, (x,), lambda g: (-g,))


def square(x) -> Node:
    x = _as_node(x)
    v = x.value
    return _emit(v * v, (x,), lambda g: (2.0 * g * v,))


def reshape(x, shape: tuple[int, ...]) -> Node:
    x = _as_node(x)
    old = x.shape
    return _emit(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def columns(x, start: int, stop: int) -> Node:
    """Slice ``[..., start:stop]`` of the last axis."""
    x = _as_node(x)
    full = x.shape

    def backward(g):
        out = np.zeros(full)
        out[..., start:stop] = g
        return (out,)

    return _emit(x.value[..., start:stop], (x,), backward)


def concat(parts: Sequence, axis: int = -1) -> Node:
    nodes = tuple(_as_node(p) for p in parts)
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    return _emit(out, nodes, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(parts: Sequence, axis: int = 0) -> Node:
    nodes = tuple(_as_node(p) for p in parts)
    out = np.stack([n.value for n in nodes], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _emit(out, nodes, backward)


def gather(x, index: np.ndarray) -> Node:
    """Pick ``x[..., index[...]]`` along the last axis."""
    x = _as_node(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ConfigError(f"gather: index shape {idx.shape} does not match {x.shape[:-1]}")
    picked = np.take_along_axis(x.value, idx[..., None], axis=-1)[..., 0]
    full = x.shape

    def backward(g):
        out = np.zeros(full)
        np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
        return (out,)

    return _emit(picked, (x,), backward)


def take_rows(x, rows: np.ndarray) -> Node:
    """Select rows (first axis) by integer index; unselected rows get no gradient."""
    x = _as_node(x)
    rows = np.asarray(rows, dtype=np.int64)
    full = x.shape

    def backward(g):
        out = np.zeros(full)
        np.add.at(out, rows, g)
        return (out,)

    return _emit(x.value[rows], (x,), backward)


def matmul(x, w) -> Node:
    """Plain 2-D product ``x @ w``."""
    x, w = _as_node(x), _as_node(w)
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ConfigError(f"matmul: incompatible shapes {x.shape} and {w.shape}")
    xv, wv = x.value, w.value
    return _emit(xv @ wv, (x, w), lambda g: (g @ wv.T, xv.T @ g))


def batched_matvec(a, x) -> Node:
    """Per-row matrix-vector product: a (B, m, k), x (B, k) -> (B, m)."""
    a, x = _as_node(a), _as_node(x)
    if a.value.ndim != 3 or x.value.ndim != 2 or a.shape[0] != x.shape[0] or a.shape[2] != x.shape[1]:
        raise ConfigError(f"batched_matvec: incompatible shapes {a.shape} and {x.shape}")
    av, xv = a.value, x.value
    out = np.matmul(av, xv[:, :, None])[:, :, 0]

    def backward(g):
        return g[:, :, None] * xv[:, None, :], np.matmul(g[:, None, :], av)[:, 0, :]

    return _emit(out, (a, x), backward)


def batched_vecmat(x, a) -> Node:
    """Per-row vector-matrix product: x (B, m), a (B, m, k) -> (B, k)."""
    x, a = _as_node(x), _as_node(a)
    if a.value.ndim != 3 or x.value.ndim != 2 or a.shape[0] != x.shape[0] or a.shape[1] != x.shape[1]:
        raise ConfigError(f"batched_vecmat: incompatible shapes {x.shape} and {a.shape}")
    xv, av = x.value, a.value
    out = np.matmul(xv[:, None, :], av)[:, 0, :]

    def backward(g):
        return np.matmul(av, g[:, :, None])[:, :, 0], xv[:, :, None] * g[:, None, :]

    return _emit(out, (x, a), backward)


def row_sum(x) -> Node:
    """Sum over the last axis of a 2-D node."""
    x = _as_node(x)
    k = x.shape[-1]
    return _emit(x.value.sum(axis=-1), (x,), lambda g: (np.repeat(g[:, None], k, axis=1),))


def total(x) -> Node:
    """Sum of all elements, as a 0-d node."""
    x = _as_node(x)
    full = x.shape
    return _emit(np.asarray(x.value.sum()), (x,), lambda g: (np.full(full, float(g)),))


def mean(x) -> Node:
    x = _as_node(x)
    return scale(total(x), 1.0 / x.value.size)


# ---------------------------------------------------------------------------
# recurrent cell


def gru_step(x, h, params: Mapping[str, Node], prefix: str) -> Node:
    """Gated recurrent update (reset/update/candidate gates, PyTorch ordering).

    Expects ``{prefix}.w_ih`` (3H, in), ``{prefix}.w_hh`` (3H, H) and matching biases.
    """
    x, h = _as_node(x), _as_node(h)
    w_hh = params[f"{prefix}.w_hh"]
    hidden = w_hh.shape[1]
    if h.shape[-1] != hidden:
        raise ConfigError(f"{prefix}: hidden state width {h.shape[-1]} != {hidden}")
    gi = dense(x, params[f"{prefix}.w_ih"], params[f"{prefix}.b_ih"], name=f"{prefix}.input")
    gh = dense(h, w_hh, params[f"{prefix}.b_hh"], name=f"{prefix}.hidden")
    H = hidden
    r = sigmoid(add(columns(gi, 0, H), columns(gh, 0, H)))
    z = sigmoid(add(columns(gi, H, 2 * H), columns(gh, H, 2 * H)))
    n = tanh(add(columns(gi, 2 * H, 3 * H), mul(r, columns(gh, 2 * H, 3 * H))))
    return add(mul(one_minus(z), n), mul(z, h))


def init_gru(store: ParameterStore, prefix: str, n_in: int, hidden: int, rng: np.random.Generator) -> None:
    bound = 1.0 / np.sqrt(hidden)
    store.add(f"{prefix}.w_ih", rng.uniform(-bound, bound, (3 * hidden, n_in)))
    store.add(f"{prefix}.w_hh", rng.uniform(-bound, bound, (3 * hidden, hidden)))
    store.add(f"{prefix}.b_ih", rng.uniform(-bound, bound, 3 * hidden))
    store.add(f"{prefix}.b_hh", rng.uniform(-bound, bound, 3 * hidden))


def init_dense(store: ParameterStore, prefix: str, n_in: int, n_out: int, rng: np.random.Generator) -> None:
    bound = 1.0 / np.sqrt(n_in)
    store.add(f"{prefix}.weight", rng.uniform(-bound, bound, (n_out, n_in)))
    store.add(f"{prefix}.bias", rng.uniform(-bound, bound, n_out))


# ---------------------------------------------------------------------------
# optimisation


class RMSProp:
    """RMSProp with the accumulator inside the square root: ``lr * g / sqrt(acc + eps)``."""

    def __init__(self, lr: float = 5e-4, decay: float = 0.99, eps: float = 1e-5, max_grad_norm: float | None = None):
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.accum: dict[str, np.ndarray] = {}

    def step(self, store: ParameterStore) -> float:
        """Apply one update, zero the gradients, and return the pre-clip gradient norm."""
        for name, g in store.grads.items():
            if not np.all(np.isfinite(g)):
                raise ContractViolation(f"non-finite gradient in parameter {name!r}; update aborted")
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in store.grads.values())))
        coef = 1.0
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            coef = self.max_grad_norm / (norm + 1e-6)
        for name, value in store.values.items():
            g = store.grads[name]
            if coef != 1.0:
                g *= coef
            acc = self.accum.get(name)
            if acc is None:
                acc = self.accum[name] = np.zeros_like(value)
            acc *= self.decay
            acc += (1.0 - self.decay) * (g * g)
            value -= self.lr * g / np.sqrt(acc + self.eps)
        store.zero_grad()
        return norm


def rmsprop_update(store: ParameterStore, lr: float, decay: float, eps: float, state: dict | None = None) -> dict:
    """Functional form of :class:`RMSProp`; ``state`` carries the accumulators between calls."""
    opt = RMSProp(lr, decay, eps)
    if state is not None:
        opt.accum = state
    opt.step(store)
    return opt.accum


# ---------------------------------------------------------------------------
# verification


def finite_diff_check(
    fn: Callable[[Mapping[str, Node]], Node],
    store: ParameterStore,
    h: float = 1e-6,
    floor: float = 1e-12,
    names: Sequence[str] | None = None,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``fn`` maps a parameter view to a scalar node and must be deterministic.
    The relative error of each scalar is ``|a - n| / max(|a|, |n|, floor)``.
    """
    saved = {k: v.copy() for k, v in store.grads.items()}
    store.zero_grad()
    tape = Tape()
    out = fn(tape.bind(store))
    if out.tape is tape:
        tape.backward(out)
    analytic = {k: v.copy() for k, v in store.grads.items()}
    for k, v in saved.items():
        np.copyto(store.grads[k], v)

    worst = 0.0
    view = constants(store)
    for name in names if names is not None else store.names():
        value = store.values[name]
        flat = value.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn(view).value)
            flat[i] = orig - h
            down = float(fn(view).value)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(a_flat[i] - numeric) / max(abs(a_flat[i]), abs(numeric), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"MMDMIXCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, store: ParameterStore, accum: Mapping[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    """Write parameters (and optimiser accumulators) atomically; identical state gives identical bytes."""
    accum = accum or {}
    entries = [("param", k, v) for k, v in store.values.items()]
    entries += [("accum", k, accum[k]) for k in store.values if k in accum]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "entries": [{"kind": kind, "name": k, "shape": list(v.shape)} for kind, k, v in entries],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, _, v in entries:
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ParameterStore, dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ContractViolation(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ContractViolation(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    offset = start + hlen
    store = ParameterStore()
    accum: dict[str, np.ndarray] = {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * count > len(data):
            raise ContractViolation(f"{path}: truncated checkpoint")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(DTYPE)
        offset += 8 * count
        if entry["kind"] == "param":
            store.add(entry["name"], arr)
        else:
            accum[entry["name"]] = arr.copy()
    if offset != len(data):
        raise ContractViolation(f"{path}: trailing or missing bytes")
    return store, accum, header["meta"]
