import numpy as np
import pytest

from mmdmix import diffcore as dc
from mmdmix.errors import ConfigError, ContractViolation


def store_with(rng, **shapes):
    s = dc.ParameterStore()
    for name, shape in shapes.items():
        s.add(name, rng.normal(size=shape))
    return s


UNARY = {
    "relu": dc.relu,
    "elu": dc.elu,
    "tanh": dc.tanh,
    "sigmoid": dc.sigmoid,
    "square": dc.square,
    "one_minus": dc.one_minus,
    "abs": dc.abs_transform,
    "scale": lambda x: dc.scale(x, -2.5),
    "columns": lambda x: dc.columns(x, 1, 3),
    "reshape": lambda x: dc.reshape(x, (5, 3)),
    "gather": lambda x: dc.gather(x, np.array([0, 2, 1, 1, 0])),
    "take_rows": lambda x: dc.take_rows(x, np.array([4, 0, 2])),
    "row_sum": dc.row_sum,
    "mean": dc.mean,
}


@pytest.mark.parametrize("op", sorted(UNARY))
def test_unary_op_gradients(op, rng):
    s = store_with(rng, x=(5, 3))
    w = rng.normal(size=np.shape(UNARY[op](dc.Node(s.values["x"])).value))
    err = dc.finite_diff_check(lambda p: dc.total(dc.mul(UNARY[op](p["x"]), w)), s)
    assert err <= 1e-6


def test_binary_and_structural_gradients(rng):
    s = store_with(rng, a=(4, 3), b=(4, 3), W=(2, 3), c=(2,), G=(4, 2, 3), gb=(4, 2), A=(5, 4, 3), v=(5, 3), u=(5, 4))

    def fn(p):
        x = dc.add(dc.mul(p["a"], p["b"]), dc.sub(p["a"], p["b"]))
        y = dc.dense(x, p["W"], p["c"])
        z = dc.concat([y, dc.matmul(x, np.ones((3, 1)))], axis=-1)
        g = dc.grouped_dense(dc.reshape(dc.stack([p["a"], p["b"]], axis=0), (2, 4, 3)), p["G"], p["gb"])
        mv = dc.batched_matvec(p["A"], p["v"])
        vm = dc.batched_vecmat(p["u"], p["A"])
        return dc.add(dc.add(dc.total(dc.square(z)), dc.total(dc.tanh(g))), dc.add(dc.total(dc.mul(mv, dc.tanh(p["u"]))), dc.total(dc.square(vm))))

    # the output is O(100), so differences carry ~1e-8 absolute roundoff
    assert dc.finite_diff_check(fn, s, floor=1e-2) <= 1e-6


def test_forward_values_by_hand():
    x = dc.Node(np.array([[1.0, 2.0]]))
    W = dc.Node(np.array([[1.0, -1.0], [0.5, 0.5]]))
    b = dc.Node(np.array([0.0, 1.0]))
    np.testing.assert_array_equal(dc.dense(x, W, b).value, [[-1.0, 2.5]])
    np.testing.assert_array_equal(dc.elu(dc.Node(np.array([0.0, 2.0]))).value, [0.0, 2.0])
    assert dc.elu(dc.Node(np.array([-1.0]))).value[0] == pytest.approx(np.exp(-1) - 1)
    np.testing.assert_array_equal(dc.abs_transform(dc.Node(np.array([-3.0, 0.0, 2.0]))).value, [3.0, 0.0, 2.0])


def test_shape_mismatch_is_a_config_error():
    with pytest.raises(ConfigError):
        dc.add(dc.Node(np.ones(3)), dc.Node(np.ones(4)))
    with pytest.raises(ConfigError):
        dc.dense(dc.Node(np.ones((2, 3))), dc.Node(np.ones((4, 5))), dc.Node(np.ones(4)))


def test_constants_leave_no_gradient(rng):
    s = store_with(rng, w=(3,))
    tape = dc.Tape()
    live = tape.bind(s)
    frozen = dc.constants(s)
    out = dc.total(dc.add(dc.mul(live["w"], frozen["w"]), frozen["w"]))
    s.zero_grad()
    tape.backward(out)
    # only the tracked factor contributes: d/dw (w * c) = c
    np.testing.assert_array_equal(s.grads["w"], s.values["w"])
    assert tape.touched() == ["w"]


def test_gradients_accumulate_over_reuse(rng):
    s = store_with(rng, w=(2,))
    tape = dc.Tape()
    p = tape.bind(s)
    out = dc.total(dc.add(p["w"], dc.add(p["w"], p["w"])))
    s.zero_grad()
    tape.backward(out)
    np.testing.assert_array_equal(s.grads["w"], [3.0, 3.0])


def test_gru_matches_reference_formula(rng):
    s = dc.ParameterStore()
    dc.init_gru(s, "rnn", 4, 3, rng)
    x, h = rng.normal(size=(2, 4)), rng.normal(size=(2, 3))
    out = dc.gru_step(x, h, dc.constants(s), "rnn").value

    def sig(v):
        return 1 / (1 + np.exp(-v))

    gi = x @ s.values["rnn.w_ih"].T + s.values["rnn.b_ih"]
    gh = h @ s.values["rnn.w_hh"].T + s.values["rnn.b_hh"]
    r = sig(gi[:, :3] + gh[:, :3])
    z = sig(gi[:, 3:6] + gh[:, 3:6])
    n = np.tanh(gi[:, 6:] + r * gh[:, 6:])
    np.testing.assert_allclose(out, (1 - z) * n + z * h, rtol=1e-14, atol=1e-15)


def test_gru_matches_torch_cell(rng):
    torch = pytest.importorskip("torch")
    s = dc.ParameterStore()
    dc.init_gru(s, "rnn", 5, 4, rng)
    cell = torch.nn.GRUCell(5, 4).double()
    with torch.no_grad():
        for ours, theirs in (("w_ih", "weight_ih"), ("w_hh", "weight_hh"), ("b_ih", "bias_ih"), ("b_hh", "bias_hh")):
            getattr(cell, theirs).copy_(torch.from_numpy(s.values[f"rnn.{ours}"]))
    x, h = rng.normal(size=(3, 5)), rng.normal(size=(3, 4))
    ref = cell(torch.from_numpy(x), torch.from_numpy(h)).detach().numpy()
    np.testing.assert_allclose(dc.gru_step(x, h, dc.constants(s), "rnn").value, ref, rtol=1e-12, atol=1e-14)


def test_gru_gradients(rng):
    s = dc.ParameterStore()
    dc.init_gru(s, "rnn", 3, 4, rng)
    x, h0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
    w = rng.normal(size=(2, 4))

    def fn(p):
        h = dc.gru_step(x, h0, p, "rnn")
        h = dc.gru_step(x[::-1].copy(), h, p, "rnn")
        return dc.total(dc.mul(h, w))

    assert dc.finite_diff_check(fn, s) <= 1e-6


def test_rmsprop_step_by_hand():
    s = dc.ParameterStore()
    s.add("w", np.array([1.0, -2.0]))
    s.grads["w"][:] = [0.5, -1.0]
    opt = dc.RMSProp(lr=0.1, decay=0.9, eps=1e-5)
    norm = opt.step(s)
    acc = 0.1 * np.array([0.25, 1.0])
    np.testing.assert_allclose(s.values["w"], np.array([1.0, -2.0]) - 0.1 * np.array([0.5, -1.0]) / np.sqrt(acc + 1e-5))
    np.testing.assert_allclose(opt.accum["w"], acc)
    assert norm == pytest.approx(np.sqrt(1.25))
    assert not s.grads["w"].any()


def test_rmsprop_clips_total_norm():
    s = dc.ParameterStore()
    s.add("a", np.zeros(1))
    s.add("b", np.zeros(1))
    s.grads["a"][:] = 30.0
    s.grads["b"][:] = 40.0
    opt = dc.RMSProp(lr=1.0, decay=0.0, eps=1e-12, max_grad_norm=5.0)
    assert opt.step(s) == pytest.approx(50.0)
    # with decay 0 the step is g / |g| = sign, whatever the clip; the accumulator shows the clipped size
    np.testing.assert_allclose(opt.accum["a"], (3.0 - 3e-7) ** 2, rtol=1e-6)


def test_rmsprop_functional_form_matches_class(rng):
    a, b = store_with(rng, w=(3, 2)), None
    b = a.copy()
    g = rng.normal(size=(3, 2))
    opt = dc.RMSProp(0.01, 0.99, 1e-5)
    state = None
    for _ in range(3):
        a.grads["w"][:] = g
        b.grads["w"][:] = g
        opt.step(a)
        state = dc.rmsprop_update(b, 0.01, 0.99, 1e-5, state)
    assert a.equals(b)


def test_rmsprop_refuses_non_finite_gradients():
    s = dc.ParameterStore()
    s.add("layer.weight", np.zeros(2))
    s.grads["layer.weight"][:] = [np.nan, 1.0]
    with pytest.raises(ContractViolation, match="layer.weight"):
        dc.RMSProp().step(s)


def test_store_copy_and_load_are_independent(rng):
    s = store_with(rng, w=(2, 2))
    t = s.copy()
    assert t.equals(s)
    s.values["w"] += 1.0
    assert not t.equals(s)
    t.load_from(s)
    assert t.equals(s) and t.values["w"] is not s.values["w"]


def test_checkpoint_round_trip(tmp_path, rng):
    s = store_with(rng, **{"agent.fc1.weight": (3, 2), "mixer.b": (4,)})
    accum = {"agent.fc1.weight": rng.random((3, 2))}
    path = tmp_path / "ck" / "last.ckpt"
    path.parent.mkdir()
    dc.save_checkpoint(path, s, accum, {"env_steps": 7})
    loaded, acc2, meta = dc.load_checkpoint(path)
    assert loaded.equals(s)
    np.testing.assert_array_equal(acc2["agent.fc1.weight"], accum["agent.fc1.weight"])
    assert meta == {"env_steps": 7}
    assert not list(tmp_path.glob("ck/*.tmp*"))


def test_corrupt_checkpoint_rejected(tmp_path, rng):
    path = tmp_path / "x.ckpt"
    dc.save_checkpoint(path, store_with(rng, w=(2,)))
    data = path.read_bytes()
    path.write_bytes(data[:-3])
    with pytest.raises(ContractViolation):
        dc.load_checkpoint(path)
    path.write_bytes(b"nonsense" + data[8:])
    with pytest.raises(ContractViolation):
        dc.load_checkpoint(path)


def test_dense_identity_and_zero_weight_cases():
    x = dc.Node(np.array([1.0, 2.0]))
    np.testing.assert_array_equal(dc.dense(x, dc.Node(np.eye(2)), dc.Node(np.zeros(2))).value, [1.0, 2.0])
    np.testing.assert_array_equal(dc.dense(x, dc.Node(np.zeros((2, 2))), dc.Node(np.array([3.0, 4.0]))).value,
                                  [3.0, 4.0])


def test_dense_layer_gradient(rng):
    s = store_with(rng, W=(3, 4), b=(3,))
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(5, 3))
    assert dc.finite_diff_check(lambda p: dc.total(dc.mul(dc.dense(x, p["W"], p["b"]), w)), s) <= 1e-6


def test_activation_values():
    assert dc.relu(dc.Node(np.array([-1.0, 2.0]))).value.tolist() == [0.0, 2.0]
    assert dc.abs_transform(dc.Node(np.array([-3.0]))).value.tolist() == [3.0]
    assert dc.elu(dc.Node(np.array([0.0]))).value.tolist() == [0.0]


def test_gru_zero_everything_gives_zero_state():
    s = dc.ParameterStore()
    dc.init_gru(s, "rnn", 3, 4, np.random.default_rng(0))
    for v in s.values.values():
        v[...] = 0.0
    out = dc.gru_step(np.zeros((1, 3)), np.zeros((1, 4)), dc.constants(s), "rnn")
    np.testing.assert_array_equal(out.value, 0.0)


def test_gru_single_step_and_unrolled_gradients(rng):
    s = dc.ParameterStore()
    dc.init_gru(s, "rnn", 3, 4, rng)
    xs = rng.normal(size=(3, 2, 3))
    h0 = rng.normal(size=(2, 4))
    w = rng.normal(size=(2, 4))

    def unrolled(steps):
        def fn(p):
            h = h0
            for t in range(steps):
                h = dc.gru_step(xs[t], h, p, "rnn")
            return dc.total(dc.mul(h, w))
        return fn

    assert dc.finite_diff_check(unrolled(1), s) <= 1e-5
    assert dc.finite_diff_check(unrolled(3), s) <= 1e-4


def test_rmsprop_zero_gradient_leaves_parameters(rng):
    s = store_with(rng, w=(3,))
    before = s.copy()
    dc.RMSProp().step(s)
    assert s.equals(before)


def test_rmsprop_first_step_by_hand():
    s = dc.ParameterStore()
    s.add("w", np.array([0.0]))
    s.grads["w"][:] = 1.0
    dc.RMSProp(lr=0.0005, decay=0.99, eps=1e-5).step(s)
    # acc = 0.01 * 1^2, step = lr * 1 / sqrt(0.01 + 1e-5)
    assert s.values["w"][0] == pytest.approx(-0.0005 / np.sqrt(0.01001), rel=1e-12)


def test_rmsprop_constant_gradient_step_tends_to_lr():
    s = dc.ParameterStore()
    s.add("w", np.array([0.0]))
    opt = dc.RMSProp(lr=0.01, decay=0.9, eps=1e-12)
    for _ in range(400):
        before = s.values["w"][0]
        s.grads["w"][:] = 2.0
        opt.step(s)
    assert before - s.values["w"][0] == pytest.approx(0.01, rel=1e-9)


def test_finite_diff_check_on_known_functions():
    s = dc.ParameterStore()
    s.add("t", np.array([3.0]))
    assert dc.finite_diff_check(lambda p: dc.total(dc.square(p["t"])), s) <= 1e-8
    tape = dc.Tape()
    s.zero_grad()
    tape.backward(dc.total(dc.square(tape.bind(s)["t"])))
    assert s.grads["t"][0] == 6.0
    assert dc.finite_diff_check(lambda p: dc.total(dc.Node(np.ones(2))), s) == 0.0


def test_backward_touches_only_used_parameters(rng):
    s = store_with(rng, used=(2, 3), unused=(4,))
    s.grads["unused"][:] = 0.0
    tape = dc.Tape()
    p = tape.bind(s)
    s.zero_grad()
    tape.backward(dc.total(dc.tanh(p["used"])))
    assert tape.touched() == ["used"]
    assert s.grads["used"].shape == s.values["used"].shape and s.grads["used"].all()
    assert not s.grads["unused"].any()


def test_forward_and_backward_are_deterministic(rng):
    s = store_with(rng, W=(3, 4), b=(3,))
    x = rng.normal(size=(6, 4))

    def run():
        s.zero_grad()
        tape = dc.Tape()
        p = tape.bind(s)
        out = dc.total(dc.elu(dc.dense(x, p["W"], p["b"])))
        tape.backward(out)
        return out.value.tobytes(), {k: g.tobytes() for k, g in s.grads.items()}

    assert run() == run()


def test_target_copy_is_isolated_from_later_updates(rng):
    s = store_with(rng, w=(3,))
    target = s.copy()
    s.grads["w"][:] = 1.0
    dc.RMSProp(lr=0.1).step(s)
    assert not target.equals(s)
    target.load_from(s)
    frozen = target.copy()
    s.grads["w"][:] = 1.0
    dc.RMSProp(lr=0.1).step(s)
    assert target.equals(frozen)
