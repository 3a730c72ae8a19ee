import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mrl import diffcore as dc
from mrl.diffcore import AdamState, CosineSchedule, ParamGroup, Tensor, check_gradients
from mrl.errors import MissingGradError, NonFiniteError, ShapeError


def leaf(shape, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True)


# ---------------------------------------------------------------- forward values

def test_matmul_identity_and_hand_value():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[2.0, 3.0], [4.0, 5.0]])
    assert np.array_equal((eye @ b).data, b.data)
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        dc.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


def test_matmul_grad_is_broadcast_of_b_transpose_rows():
    a = leaf((3, 4), 1)
    b = Tensor(np.random.default_rng(2).normal(size=(4, 5)))
    (a @ b).sum().backward()
    expected = np.broadcast_to(b.data.sum(axis=1), (3, 4))
    assert np.allclose(a.grad, expected)


def test_matmul_batched_broadcast():
    a = leaf((2, 1, 3, 4), 3)
    b = leaf((5, 4, 2), 4)
    out = a @ b
    assert out.shape == (2, 5, 3, 2)
    r = check_gradients(lambda: ((a @ b).sum() * 1.0, [a, b]), samples=200)
    assert r.ok(1e-4)


def test_softmax_closed_forms():
    assert np.allclose(dc.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert np.allclose(dc.softmax(Tensor([math.log(2.0), 0.0])).data, [2 / 3, 1 / 3])
    big = dc.softmax(Tensor([1000.0, 0.0])).data
    assert np.isfinite(big).all() and big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0)


def test_softmax_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        dc.softmax(Tensor([1.0, np.nan]))
    with pytest.raises(NonFiniteError):
        dc.softmax(Tensor([np.inf, 0.0]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)),
              elements=st.floats(-1e4, 1e4, allow_nan=False)),
       st.sampled_from([0, 1, -1]))
def test_softmax_rows_sum_to_one(x, axis):
    out = dc.softmax(Tensor(x), axis=axis).data
    assert np.allclose(out.sum(axis=axis), 1.0, atol=1e-6)
    assert (out >= 0).all() and (out <= 1).all()


def test_softmax_float32_rows_sum_to_one():
    x = np.random.default_rng(0).normal(0, 30, size=(64, 9)).astype(np.float32)
    out = dc.softmax(Tensor(x)).data
    assert out.dtype == np.float32
    assert np.abs(out.sum(axis=-1) - 1).max() < 1e-6


def test_layer_normalize_examples():
    one, zero = Tensor([1.0, 1.0]), Tensor([0.0, 0.0])
    assert np.allclose(dc.layer_normalize(Tensor([5.0, 5.0]), -1, one, zero).data, 0.0)
    assert np.allclose(dc.layer_normalize(Tensor([1.0, 3.0]), -1, one, zero).data, [-1, 1], atol=1e-5)
    c = dc.layer_normalize(Tensor([1.0, 7.0]), -1, Tensor([0.0, 0.0]), Tensor([2.5, 2.5])).data
    assert np.allclose(c, 2.5)


def test_layer_normalize_moments_on_random_rows():
    x = Tensor(np.random.default_rng(0).normal(3, 5, size=(6, 16)))
    out = dc.layer_normalize(x, -1, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.allclose(out.mean(axis=-1), 0, atol=1e-5)
    assert np.allclose(out.var(axis=-1), 1, atol=1e-5)


def test_layer_normalize_gain_extent_checked():
    with pytest.raises(ShapeError):
        dc.layer_normalize(Tensor(np.ones((2, 3))), -1, Tensor(np.ones(2)), Tensor(np.zeros(2)))


# ---------------------------------------------------------------- backward

def test_backward_linear_and_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    x.sum().backward()
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    y = Tensor([1.0, 2.0], requires_grad=True)
    (y * y).sum().backward()
    assert y.grad.tolist() == [2.0, 4.0]


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_backward_twice_accumulates_exactly():
    a, b = leaf((3, 4), 5), leaf((4, 2), 6)
    loss = (dc.softmax(a @ b, axis=-1) * (a @ b)).sum()
    loss.backward()
    once = (a.grad.copy(), b.grad.copy())
    loss.backward()
    assert np.array_equal(a.grad, 2 * once[0])
    assert np.array_equal(b.grad, 2 * once[1])


def test_every_reachable_leaf_gets_a_grad():
    a, b = leaf(3, 1), leaf(3, 2)
    unused_path = b * 0.0
    (a.sum() + unused_path.sum()).backward()
    assert a.grad is not None and b.grad is not None
    assert np.array_equal(b.grad, np.zeros(3))


def test_no_grad_records_nothing():
    a = leaf(3)
    with dc.no_grad():
        out = (a * 2.0).sum()
    assert not out.requires_grad
    assert dc.is_grad_enabled()


def test_only_float_dtypes():
    with pytest.raises(TypeError):
        Tensor(np.array([1, 2], dtype=np.int8), dtype=np.int8)
    assert Tensor([1, 2]).dtype == np.float64


# ---------------------------------------------------------------- gradient fidelity per primitive

def _prim_cases():
    a, b = leaf((3, 4), 10), leaf((3, 4), 11)
    pos = Tensor(np.abs(np.random.default_rng(12).normal(size=(3, 4))) + 0.5, requires_grad=True)
    row = leaf((1, 4), 13)
    g, bias = leaf(4, 14), leaf(4, 15)
    m = leaf((4, 2), 16)
    w = Tensor(np.random.default_rng(17).normal(size=(3, 4)))
    return {
        "add": (lambda: (dc.add(a, row) * w).sum(), [a, row]),
        "sub": (lambda: (dc.sub(a, b) * w).sum(), [a, b]),
        "mul": (lambda: (dc.mul(a, b) * w).sum(), [a, b]),
        "div": (lambda: (dc.div(a, pos) * w).sum(), [a, pos]),
        "neg": (lambda: (dc.neg(a) * w).sum(), [a]),
        "power": (lambda: (dc.power(pos, 1.7) * w).sum(), [pos]),
        "broadcast_to": (lambda: (dc.broadcast_to(row, (3, 4)) * w).sum(), [row]),
        "sum": (lambda: (dc.sum_(a * w, axis=0) * dc.sum_(b, axis=0)).sum(), [a, b]),
        "mean": (lambda: (dc.mean(a * w, axis=1, keepdims=True) * b).sum(), [a, b]),
        "reshape": (lambda: (dc.reshape(a, (4, 3)) * w.reshape(4, 3)).sum(), [a]),
        "transpose": (lambda: (dc.transpose(a) @ b).sum(), [a, b]),
        "concat": (lambda: (dc.concat([a, b], axis=-1) @ leaf_const((8, 2))).sum(), [a, b]),
        "matmul": (lambda: (dc.matmul(a, m) * m.sum()).sum(), [a, m]),
        "softmax": (lambda: (dc.softmax(a, axis=-1) * w).sum(), [a]),
        "layer_normalize": (lambda: (dc.layer_normalize(a, -1, g, bias) * w).sum(), [a, g, bias]),
    }


def leaf_const(shape):
    return Tensor(np.random.default_rng(99).normal(size=shape))


@pytest.mark.parametrize("name", list(_prim_cases()))
def test_primitive_gradients_match_central_differences(name):
    fn, inputs = _prim_cases()[name]
    report = check_gradients(lambda: (fn(), inputs), samples=200, eps=1e-5)
    assert report.ok(1e-4), (name, report)


def test_check_gradients_linear_graph_is_exact():
    a = leaf(5, 1)
    w = Tensor(np.arange(5.0))
    r = check_gradients(lambda: ((a * w).sum(), [a]), samples=5)
    assert r.max_rel_error < 1e-10
    assert r.checked == 5


# ---------------------------------------------------------------- Adam

def _scalar_adam(grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    p, m, v, out = 0.0, 0.0, 0.0, []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        p -= step
        out.append(-step)
    return out


def test_adam_first_step_is_about_lr():
    p = Tensor([1.0], requires_grad=True)
    group = ParamGroup([("p", p)])
    p.grad = np.array([0.5])
    state = AdamState()
    dc.adam_step(group, state, 1e-3)
    assert p.data[0] - 1.0 == pytest.approx(-1e-3, rel=1e-6)
    assert state.step == 1
    assert state.m["p"].shape == p.shape


def test_adam_two_steps_match_scalar_oracle():
    p = Tensor([0.0], requires_grad=True)
    group = ParamGroup([("p", p)])
    state = AdamState()
    deltas = []
    for _ in range(2):
        before = p.data.copy()
        p.grad = np.array([0.3])
        dc.adam_step(group, state, 1e-3)
        deltas.append(float(p.data[0] - before[0]))
    oracle = _scalar_adam([0.3, 0.3], 1e-3)
    assert abs(abs(deltas[1]) - abs(oracle[1])) < 1e-12
    assert abs(deltas[0] - oracle[0]) < 1e-12


def test_adam_zero_grad_is_identity():
    p = leaf((3, 3), 4)
    before = p.data.copy()
    group = ParamGroup([("p", p)])
    p.grad = np.zeros_like(p.data)
    dc.adam_step(group, AdamState(), 1e-2)
    assert np.array_equal(p.data, before)


def test_adam_missing_grad_names_parameter():
    group = ParamGroup([("layer.w", leaf(2))])
    with pytest.raises(MissingGradError, match="layer.w"):
        dc.adam_step(group, AdamState(), 1e-3)


def test_param_group_rejects_bad_names():
    g = ParamGroup()
    g.add("a", leaf(1))
    with pytest.raises(ValueError):
        g.add("a", leaf(1))
    with pytest.raises(ValueError):
        g.add("", leaf(1))
    with pytest.raises(ValueError):
        g.add("c", Tensor([1.0]))


def test_clip_grad_norm_rescales():
    a = leaf(4)
    a.grad = np.array([3.0, 4.0, 0.0, 0.0])
    norm = dc.clip_grad_norm(ParamGroup([("a", a)]), 1.0)
    assert norm == pytest.approx(5.0)
    assert np.linalg.norm(a.grad) == pytest.approx(1.0)


# ---------------------------------------------------------------- cosine schedule

def test_cosine_endpoints_and_midpoint():
    s = CosineSchedule(1000)
    assert dc.cosine_lr(s, 0) == 0.0005
    assert dc.cosine_lr(s, 1000) == 0.0
    assert dc.cosine_lr(s, 500) == pytest.approx(0.00025, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5000), st.floats(1e-6, 1e-1), st.floats(0, 1))
def test_cosine_monotone_and_bounded(total, lr0, frac):
    s = CosineSchedule(total, lr0, lr0 * frac)
    lrs = [dc.cosine_lr(s, k) for k in range(0, total + 1, max(1, total // 50))] + [dc.cosine_lr(s, total)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert lrs[0] == lr0 and lrs[-1] == s.lr_min


def test_cosine_out_of_range_clamps_with_warning():
    s = CosineSchedule(10)
    with pytest.warns(RuntimeWarning):
        assert dc.cosine_lr(s, 11) == 0.0
    with pytest.warns(RuntimeWarning):
        assert dc.cosine_lr(s, -3) == 0.0005
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        dc.cosine_lr(s, 5)
