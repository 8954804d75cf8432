"""Tape mechanics and per-primitive gradient checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polarloc import autodiff as ad
from polarloc.autodiff import (DivergenceError, Tape, Tensor, backward,
                               gradcheck, mean_all, no_grad)


def t64(arr, requires_grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


class TestTensor:
    def test_defaults_to_float32(self):
        x = Tensor([1.0, 2.0])
        assert x.data.dtype == np.float32
        assert not x.requires_grad
        assert x.grad is None

    def test_integer_input_cast_to_float32(self):
        x = Tensor(np.arange(3, dtype=np.int64))
        assert x.data.dtype == np.float32

    def test_float64_preserved(self):
        x = Tensor(np.zeros(3, dtype=np.float64))
        assert x.data.dtype == np.float64

    def test_rejects_zero_extents(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((2, 0)))

    def test_unique_ids(self):
        a, b = Tensor([1.0]), Tensor([1.0])
        assert a.tid != b.tid

    def test_operator_sugar(self):
        with Tape():
            a = t64([1.0, 2.0])
            b = t64([3.0, 4.0])
            assert np.allclose((a + b).data, [4.0, 6.0])
            assert np.allclose((a - b).data, [-2.0, -2.0])
            assert np.allclose((a * b).data, [3.0, 8.0])
            assert np.allclose((-a).data, [-1.0, -2.0])
            assert np.allclose((2.0 * a).data, [2.0, 4.0])


class TestTapeMechanics:
    def test_no_recording_without_tape(self):
        a = t64([1.0], requires_grad=True)
        b = ad.relu(a)
        assert np.allclose(b.data, [1.0])

    def test_no_recording_without_requires_grad(self):
        with Tape() as tape:
            ad.add(t64([1.0]), t64([2.0]))
        assert len(tape.nodes) == 0

    def test_no_grad_suppresses_recording(self):
        with Tape() as tape:
            a = t64([1.0], requires_grad=True)
            with no_grad():
                ad.relu(a)
        assert len(tape.nodes) == 0

    def test_multi_consumer_accumulation(self):
        # y = x*x + x  =>  dy/dx = 2x + 1
        with Tape() as tape:
            x = t64([3.0], requires_grad=True)
            y = ad.sum_all(ad.add(ad.mul(x, x), x))
            grads = backward(tape, y)
        assert np.allclose(grads[x.tid], [7.0])
        assert np.allclose(x.grad, [7.0])

    def test_backward_requires_scalar(self):
        with Tape() as tape:
            x = t64([1.0, 2.0], requires_grad=True)
            y = ad.mul(x, x)
            with pytest.raises(ValueError):
                backward(tape, y)

    def test_backward_requires_loss_on_tape(self):
        with Tape() as tape:
            x = t64([1.0], requires_grad=True)
            ad.sum_all(x)
        with Tape():
            stray = ad.sum_all(ad.mul(x, x))
        with pytest.raises(ValueError):
            backward(tape, stray)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_raises(self):
        with Tape() as tape:
            x = t64([0.0], requires_grad=True)
            y = ad.sum_all(ad.log(x))  # log(0) = -inf
            with pytest.raises(DivergenceError):
                backward(tape, y)

    def test_nested_tapes_isolated(self):
        with Tape() as outer:
            a = t64([2.0], requires_grad=True)
            ad.mul(a, a)
            with Tape() as inner:
                ad.mul(a, a)
            assert len(inner.nodes) == 1
        assert len(outer.nodes) == 1


UNARY_CASES = [
    ("relu", lambda x: ad.relu(x), (-2.0, 2.0)),
    ("sigmoid", lambda x: ad.sigmoid(x), (-4.0, 4.0)),
    ("exp", lambda x: ad.exp(x), (-1.5, 1.5)),
    ("log", lambda x: ad.log(x), (0.2, 3.0)),
    ("sqrt", lambda x: ad.sqrt(x), (0.2, 3.0)),
    ("clamp_min", lambda x: ad.clamp_min(x, 0.3), (0.5, 2.0)),
    ("pow_const", lambda x: ad.pow_const(x, 2.5), (0.2, 2.0)),
    ("add_const", lambda x: ad.add_const(x, 1.7), (-2.0, 2.0)),
    ("mul_const", lambda x: ad.mul_const(x, -0.6), (-2.0, 2.0)),
    ("sum_all", lambda x: ad.sum_all(x), (-2.0, 2.0)),
    ("mean_all", lambda x: ad.mean_all(x), (-2.0, 2.0)),
]


@pytest.mark.parametrize("name,fn,box", UNARY_CASES, ids=[c[0] for c in UNARY_CASES])
def test_unary_gradients(name, fn, box):
    rng = np.random.default_rng(7)
    x = Tensor(rng.uniform(box[0], box[1], size=(3, 4)))
    err = gradcheck(lambda t: mean_all(fn(t)), x)
    assert err < 1e-6, f"{name}: {err}"


BINARY_CASES = [
    ("add", ad.add),
    ("sub", ad.sub),
    ("mul", ad.mul),
]


@pytest.mark.parametrize("name,fn", BINARY_CASES, ids=[c[0] for c in BINARY_CASES])
def test_binary_gradients_both_sides(name, fn):
    rng = np.random.default_rng(8)
    a = Tensor(rng.uniform(0.5, 2.0, size=(2, 3)))
    b = Tensor(rng.uniform(0.5, 2.0, size=(2, 3)), requires_grad=True)
    err_a = gradcheck(lambda t: mean_all(fn(t, b)), a)
    err_b = gradcheck(lambda t: mean_all(fn(a, t)), b)
    assert max(err_a, err_b) < 1e-6, name


def test_binary_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        ad.add(t64([1.0, 2.0]), t64([[1.0], [2.0]]))


def test_structured_op_gradients():
    rng = np.random.default_rng(9)
    x = Tensor(rng.uniform(0.3, 1.5, size=(2, 3, 4, 5)))
    gate = Tensor(rng.uniform(0.2, 0.9, size=(2, 3)), requires_grad=True)
    other = Tensor(rng.uniform(0.3, 1.5, size=(2, 2, 4, 5)))

    assert gradcheck(lambda t: mean_all(ad.mean_spatial(t)), x) < 1e-6
    assert gradcheck(lambda t: mean_all(ad.mul_channels(t, gate)), x) < 1e-6
    assert gradcheck(lambda t: mean_all(ad.mul_channels(x, t)), gate) < 1e-6
    assert gradcheck(lambda t: mean_all(ad.concat_channels(t, other)), x) < 1e-6
    assert gradcheck(lambda t: mean_all(ad.concat_channels(other, t)), x) < 1e-6

    mat = Tensor(rng.uniform(-1.0, 1.0, size=(5, 3)))
    assert gradcheck(lambda t: mean_all(ad.rowsum(t)), mat) < 1e-6
    # repeated gather indices must accumulate
    assert gradcheck(lambda t: mean_all(ad.index_rows(t, [0, 2, 2, 4])), mat) < 1e-6


def test_pow_tensor_gradients_base_and_exponent():
    rng = np.random.default_rng(10)
    x = Tensor(rng.uniform(0.3, 2.0, size=(2, 3)))
    p = Tensor(np.asarray(2.3, dtype=np.float64))
    assert gradcheck(lambda t: mean_all(ad.pow_tensor(t, p)), x) < 1e-6
    assert gradcheck(lambda t: mean_all(ad.pow_tensor(x, t)), p) < 1e-6


def test_mul_scalar_tensor_gradients():
    rng = np.random.default_rng(11)
    x = Tensor(rng.uniform(-1.0, 1.0, size=(3, 2)))
    s = Tensor(np.asarray(0.7, dtype=np.float64))
    assert gradcheck(lambda t: mean_all(ad.mul_scalar_tensor(t, s)), x) < 1e-6
    assert gradcheck(lambda t: mean_all(ad.mul_scalar_tensor(x, t)), s) < 1e-6


def test_index_rows_forward_and_grad_accumulation():
    with Tape() as tape:
        x = t64([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], requires_grad=True)
        g = ad.index_rows(x, [1, 1, 0])
        assert np.allclose(g.data, [[3.0, 4.0], [3.0, 4.0], [1.0, 2.0]])
        loss = ad.sum_all(g)
        backward(tape, loss)
    assert np.allclose(x.grad, [[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]])


def test_relu_masks_negative_gradient():
    with Tape() as tape:
        x = t64([-1.0, 0.0, 2.0], requires_grad=True)
        backward(tape, ad.sum_all(ad.relu(x)))
    assert np.allclose(x.grad, [0.0, 0.0, 1.0])


def test_sigmoid_extreme_inputs_stable():
    x = t64([-500.0, 500.0])
    y = ad.sigmoid(x)
    assert np.all(np.isfinite(y.data))
    assert y.data[0] >= 0.0 and y.data[1] <= 1.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(min_value=-3.0, max_value=3.0,
                          allow_nan=False, allow_infinity=False),
                min_size=2, max_size=8))
def test_recorded_graph_matches_finite_differences(vals):
    # a small composite graph over arbitrary inputs: FD oracle within 1e-4
    x = Tensor(np.asarray(vals, dtype=np.float64).reshape(1, -1))

    def graph(t):
        return mean_all(ad.mul(ad.sigmoid(t), ad.add_const(t, 0.5)))

    assert gradcheck(graph, x) < 1e-4


def test_gradcheck_restores_input_state():
    x = Tensor(np.asarray([0.5, 1.5], dtype=np.float64))
    before = x.data.copy()
    gradcheck(lambda t: ad.sum_all(ad.mul(t, t)), x)
    assert np.array_equal(x.data, before)


def test_gradcheck_flags_wrong_gradient():
    # a deliberately broken backward rule must be caught
    def bad_square(t):
        return ad._record("bad_square", (t,), t.data * t.data,
                          lambda g: (g * t.data,))  # missing factor 2

    x = Tensor(np.asarray([1.0, 2.0], dtype=np.float64), requires_grad=True)
    err = gradcheck(lambda t: ad.sum_all(bad_square(t)), x)
    assert err > 1e-2
