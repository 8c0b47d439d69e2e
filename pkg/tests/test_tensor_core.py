import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import CASES, check
from jiehua.tensor import (
    AdamState,
    Linear,
    LrSchedule,
    NonFiniteError,
    Parameter,
    Rng,
    ShapeError,
    Tensor,
    accumulate_and_maybe_step,
    adam_step,
    backward,
    forward_op,
    lr_at_step,
    no_grad,
)
from jiehua.tensor import autograd as ag
from jiehua.tensor import checkpoint as ckpt
from jiehua.tensor.nn import Conv2d, GroupNorm, Module


# ---------------------------------------------------------------- forward ops


def test_add_example():
    assert forward_op("add", Tensor([1, 2]), Tensor([3, 4])).data.tolist() == [4, 6]


def test_conv_all_ones_is_nine():
    x = Tensor(np.ones((1, 3, 3, 1)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = forward_op("conv2d", x, w, padding=0)
    assert out.shape == (1, 1, 1, 1) and out.item() == 9.0


def test_mse_self_is_zero():
    x = Tensor(np.random.default_rng(0).standard_normal((4, 5)))
    assert forward_op("mse", x, x).item() == 0.0


def test_conv_matches_direct_correlation():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 5, 6, 3)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    out = ag.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0))).astype(np.float64)
    ho, wo = out.shape[1:3]
    ref = np.zeros((2, ho, wo, 4))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3, :]
            ref[:, i, j, :] = np.einsum("nhwc,ochw->no", patch, w) + b
    assert np.allclose(out, ref, atol=1e-4)


def test_group_norm_normalises():
    x = Tensor(np.random.default_rng(2).standard_normal((2, 4, 4, 6)) * 3 + 1)
    y = ag.group_norm(x, 3, Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    g = y.reshape(2, 16, 3, 2)
    assert np.allclose(g.mean(axis=(1, 3)), 0, atol=1e-5)
    assert np.allclose(g.var(axis=(1, 3)), 1, atol=1e-3)


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError, match=r"add.*\(2, 3\).*\(4,\)"):
        ag.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))
    with pytest.raises(ShapeError, match="matmul"):
        ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError, match="conv2d"):
        ag.conv2d(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((3, 5, 3, 3))))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_is_error():
    with pytest.raises(NonFiniteError):
        ag.mul(Tensor([1e30]), Tensor([1e30]))


def test_unknown_op_kind():
    with pytest.raises(ValueError, match="unknown op"):
        forward_op("softmax", Tensor([1.0]))


# ---------------------------------------------------------------- backward


def test_linear_derivative():
    w = Parameter([5.0])
    backward(ag.sum(ag.mul(w, Tensor([2.0]))))
    assert w.grad.tolist() == [2.0]


def test_square_derivative():
    w = Parameter([3.0])
    backward(ag.mse(w, Tensor([0.0])))
    assert w.grad.tolist() == [6.0]


def test_backward_requires_scalar():
    w = Parameter([1.0, 2.0])
    with pytest.raises(ShapeError):
        backward(ag.mul(w, 2.0))


def test_locked_parameter_gets_no_gradient_but_passes_it():
    a = Parameter([2.0], locked=True)
    b = Parameter([3.0])
    backward(ag.sum(ag.mul(ag.mul(a, b), b)))
    assert a.grad is None
    assert b.grad.tolist() == [12.0]


def test_gradients_accumulate_across_backward_calls():
    w = Parameter([1.0])
    for _ in range(3):
        backward(ag.sum(ag.mul(w, 2.0)))
    assert w.grad.tolist() == [6.0]


def test_no_grad_records_nothing():
    w = Parameter([1.0])
    with no_grad():
        out = ag.mul(w, 2.0)
    assert not out.requires_grad


def test_tape_released_after_backward():
    w = Parameter(np.ones(3))
    loss = ag.sum(ag.tanh(w))
    backward(loss)
    assert loss._parents == () and loss._backward is None


@pytest.mark.parametrize("kind", sorted(CASES))
def test_gradcheck(kind):
    fn, gen = CASES[kind]
    rng = np.random.default_rng(hash(kind) % 2**32)
    for _ in range(5):
        assert check(fn, gen(rng), rng) < 1e-3


# ---------------------------------------------------------------- optimizer


def test_adam_scalar_quadratic():
    w = Parameter([0.0], name="w")
    state = AdamState()
    for _ in range(200):
        backward(ag.sum(ag.mul(ag.sub(w, 3.0), ag.sub(w, 3.0))))
        adam_step([w], state, 0.1)
    # independent scalar recurrence
    m = v = 0.0
    x = 0.0
    for t in range(1, 201):
        g = 2 * (x - 3)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert abs(w.data[0] - 3) < 0.05
    assert abs(w.data[0] - x) < 1e-4


def test_adam_locked_parameter_bitwise_equal():
    a = Parameter(np.random.default_rng(0).standard_normal(5), name="a", locked=True)
    b = Parameter(np.ones(5), name="b")
    before = a.data.copy()
    state = AdamState()
    for _ in range(100):
        backward(ag.sum(ag.mul(ag.mul(a, b), b)))
        adam_step([a, b], state, 0.01)
    assert np.array_equal(a.data, before)
    assert state.step_count == 100


def test_adam_zero_gradient_keeps_parameters():
    w = Parameter(np.arange(3.0), name="w")
    state = AdamState()
    w.grad = np.zeros(3, np.float32)
    adam_step([w], state, 0.1)
    assert np.array_equal(w.data, np.arange(3.0, dtype=np.float32))
    assert w.grad is None


def test_adam_missing_gradient_is_error():
    w = Parameter([1.0], name="w")
    with pytest.raises(RuntimeError, match="w"):
        adam_step([w], AdamState(), 0.1)


# ---------------------------------------------------------------- schedule


def test_lr_table_values():
    s = LrSchedule(5e-6, 100, 1000, 0)
    assert lr_at_step(s, 0) == 0.0
    assert lr_at_step(s, 50) == pytest.approx(2.5e-6)
    assert lr_at_step(s, 100) == 5e-6


def test_lr_restart_endpoints():
    s = LrSchedule(1.0, 10, 20, 2)
    end = 10 + 20
    assert lr_at_step(s, end) == pytest.approx(0.0, abs=1e-12)
    assert lr_at_step(s, end + 1) == 1.0
    assert lr_at_step(s, end + 1 + 20) == pytest.approx(0.0, abs=1e-12)
    assert lr_at_step(s, 2 * (end + 1) - 10) == 1.0
    # after the last restart the rate stays at zero
    assert lr_at_step(s, 10 + 3 * 21 + 5) == 0.0
    with pytest.raises(ValueError):
        lr_at_step(s, -1)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(1e-7, 1.0),
    st.integers(0, 50),
    st.integers(1, 60),
    st.integers(0, 3),
    st.integers(0, 400),
)
def test_lr_nonnegative_and_bounded(base, warm, cycle, restarts, step):
    s = LrSchedule(base, warm, cycle, restarts)
    lr = lr_at_step(s, step)
    assert 0.0 <= lr <= base


def test_lr_for_run_single_cycle():
    s = LrSchedule.for_run(5e-6, 100, 1000)
    assert s.cycle_length == 900 and s.num_restarts == 0


def test_accumulation_schedule():
    w = Parameter([1.0], name="w")
    state = AdamState()
    sched = LrSchedule(0.1, 0, 10)
    flags = []
    for micro in range(1, 11):
        backward(ag.sum(ag.mul(w, 1.0)))
        flags.append(accumulate_and_maybe_step([w], state, sched, micro, 5))
    assert flags == [False] * 4 + [True] + [False] * 4 + [True]
    assert state.step_count == 2
    with pytest.raises(ValueError):
        accumulate_and_maybe_step([w], state, sched, 1, 0)


def _linear_run(batch, accumulation, steps=3):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((steps * 5, 4)).astype(np.float32)
    Y = rng.standard_normal((steps * 5, 2)).astype(np.float32)
    model = Linear(4, 2, Rng(3)).assign_names()
    state = AdamState()
    sched = LrSchedule(0.05, 0, 100)
    micro = 0
    for i in range(0, len(X), batch):
        micro += 1
        backward(ag.mse(model(Tensor(X[i : i + batch])), Tensor(Y[i : i + batch])))
        accumulate_and_maybe_step(model.parameters(), state, sched, micro, accumulation)
    return [p.data for p in model.parameters()]


def test_batch_vs_accumulation_equivalence():
    a = _linear_run(5, 1)
    b = _linear_run(1, 5)
    for x, y in zip(a, b):
        assert np.max(np.abs(x - y)) <= 1e-5


# ---------------------------------------------------------------- modules, rng, checkpoints


class _Tiny(Module):
    def __init__(self, rng):
        self.conv = Conv2d(2, 4, 3, rng=rng)
        self.norm = GroupNorm(2, 4)
        self.blocks = [Linear(4, 3, rng), Linear(3, 2, rng)]


def test_module_names_are_stable():
    names = [n for n, _ in _Tiny(Rng(0)).named_parameters()]
    assert names == [
        "conv.weight", "conv.bias", "norm.gamma", "norm.beta",
        "blocks.0.weight", "blocks.0.bias", "blocks.1.weight", "blocks.1.bias",
    ]


def test_rng_determinism_and_streams():
    a, b = Rng(42), Rng(42)
    assert np.array_equal(a.normal((5,)), b.normal((5,)))
    assert not np.array_equal(Rng(42).child("x").normal((5,)), Rng(42).child("y").normal((5,)))
    r = Rng(7)
    r.normal((3,))
    state = json.loads(json.dumps(r.get_state()))
    after = r.normal((4,))
    assert np.array_equal(Rng.from_state(state).normal((4,)), after)


def test_checkpoint_round_trip_bitwise(tmp_path):
    m = _Tiny(Rng(1)).assign_names()
    m.blocks[0].set_locked(True)
    path = tmp_path / "m.ckpt"
    ckpt.save(path, ckpt.module_entries(m), {"step": 3, "note": "x"})
    entries, meta = ckpt.load(path)
    assert meta == {"step": 3, "note": "x"}
    other = _Tiny(Rng(2)).assign_names()
    ckpt.restore_module(other, entries)
    for (n, p), (_, q) in zip(m.named_parameters(), other.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes() and p.locked == q.locked
    ckpt.save(tmp_path / "again.ckpt", ckpt.module_entries(other), meta)
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    assert path.read_bytes().startswith(ckpt.MAGIC)


def test_checkpoint_rejects_corruption(tmp_path):
    data = ckpt.dumps([("a", np.ones((2, 2)), False)])
    with pytest.raises(ckpt.CheckpointError):
        ckpt.loads(b"XXXXXXXX" + data[8:])
    with pytest.raises(ckpt.CheckpointError):
        ckpt.loads(data[:-3])
    with pytest.raises(ckpt.CheckpointError):
        ckpt.dumps([("a", np.ones(1), False), ("a", np.ones(1), False)])
