import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cdfkd.tensor import (
    NonFiniteError,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    add,
    concat,
    flatten,
    matmul,
    mean_all,
    mean_scalars,
    mul,
    reshape,
    select,
    sgd_step,
    sub,
    sum_all,
)


def test_constant_tensor_defaults_to_float32():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32
    assert t.shape == (3,)


def test_constant_tensor_preserves_float64():
    t = Tensor(np.zeros(4, dtype=np.float64))
    assert t.dtype == np.float64


def test_scalar_tensor_stays_zero_dim():
    assert Tensor(np.float32(1.5)).shape == ()
    assert sum_all(Tensor(np.ones((2, 3), np.float32))).shape == ()


def test_gradient_of_loss_wrt_itself_is_one():
    with Tape() as tape:
        x = tape.watch(np.array([2.0, 3.0], dtype=np.float32))
        loss = sum_all(mul(x, x))
        grads = tape.backward(loss)
    assert grads[loss.node] == 1.0
    np.testing.assert_allclose(grads[x.node], [4.0, 6.0])


def test_shared_subexpression_accumulates():
    # loss = sum(u + u) with u = x*x, so dloss/dx = 4x.
    with Tape() as tape:
        x = tape.watch(np.array([1.0, -2.0, 0.5], dtype=np.float32))
        u = mul(x, x)
        loss = sum_all(add(u, u))
        grads = tape.backward(loss)
    np.testing.assert_allclose(grads[x.node], [4.0, -8.0, 2.0])


def test_untouched_leaf_gets_zero_gradient():
    with Tape() as tape:
        x = tape.watch(np.ones(3, dtype=np.float32))
        y = tape.watch(np.ones(2, dtype=np.float32))
        loss = sum_all(x)
        grads = tape.backward(loss)
    assert grads[y.node].shape == (2,)
    assert not grads[y.node].any()


def test_constants_are_not_recorded():
    c = Tensor(np.ones(3, dtype=np.float32))
    with Tape() as tape:
        x = tape.watch(np.ones(3, dtype=np.float32))
        out = add(x, c)
        assert out.tracked()
        # an op on constants alone must not touch the tape
        off = add(c, c)
        assert not off.tracked()
        tape.backward(sum_all(out))
    assert c.node is None


def test_backward_rejects_non_scalar_loss():
    with Tape() as tape:
        x = tape.watch(np.ones(3, dtype=np.float32))
        y = mul(x, x)
        with pytest.raises(ShapeError):
            tape.backward(y)


def test_backward_rejects_foreign_loss():
    with Tape() as tape:
        x = tape.watch(np.ones(2, dtype=np.float32))
        loss = sum_all(x)
    with Tape() as other:
        with pytest.raises(ValueError):
            other.backward(loss)


def test_nested_tapes_rejected():
    with Tape():
        with pytest.raises(RuntimeError):
            with Tape():
                pass
    assert active_tape() is None


def test_tape_cleared_after_exception():
    with pytest.raises(RuntimeError, match="boom"):
        with Tape():
            raise RuntimeError("boom")
    assert active_tape() is None


def test_add_shape_mismatch():
    with pytest.raises(ShapeError):
        add(Tensor(np.ones(2, np.float32)), Tensor(np.ones(3, np.float32)))


def test_scalar_broadcast_keeps_tensor_dtype():
    x = Tensor(np.ones(3, np.float32))
    out = mul(x, 2.0)
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out.data, [2, 2, 2])


def test_mixed_dtypes_rejected():
    with pytest.raises(ShapeError):
        add(Tensor(np.ones(2, np.float32)), Tensor(np.ones(2, np.float64)))


def test_scalar_broadcast_gradient_reduces():
    with Tape() as tape:
        s = tape.watch(np.asarray(3.0, dtype=np.float32))
        x = Tensor(np.array([1.0, 2.0, 4.0], np.float32))
        loss = sum_all(mul(x, s))
        grads = tape.backward(loss)
    assert grads[s.node].shape == ()
    assert float(grads[s.node]) == 7.0


def test_matmul_forward_and_gradients():
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    b = np.arange(12, dtype=np.float32).reshape(3, 4)
    with Tape() as tape:
        ta, tb = tape.watch(a.copy()), tape.watch(b.copy())
        loss = sum_all(matmul(ta, tb))
        grads = tape.backward(loss)
    g = np.ones((2, 4), dtype=np.float32)
    np.testing.assert_allclose(grads[ta.node], g @ b.T)
    np.testing.assert_allclose(grads[tb.node], a.T @ g)
    with pytest.raises(ShapeError):
        matmul(Tensor(a), Tensor(a))


def test_sub_and_neg():
    x = Tensor(np.array([3.0, 1.0], np.float32))
    y = Tensor(np.array([1.0, 4.0], np.float32))
    np.testing.assert_array_equal(sub(x, y).data, [2.0, -3.0])
    np.testing.assert_array_equal((-x).data, [-3.0, -1.0])


def test_reshape_flatten_roundtrip_gradient():
    with Tape() as tape:
        x = tape.watch(np.arange(12, dtype=np.float32).reshape(3, 4))
        loss = sum_all(mul(flatten(x), flatten(x)))
        grads = tape.backward(loss)
    np.testing.assert_allclose(grads[x.node], 2 * np.arange(12).reshape(3, 4))
    assert reshape(x, (4, 3)).shape == (4, 3)


def test_concat_routes_gradients_to_pieces():
    with Tape() as tape:
        a = tape.watch(np.ones(2, dtype=np.float32))
        b = tape.watch(np.ones(3, dtype=np.float32))
        out = concat([a, Tensor(np.zeros(1, np.float32)), b])
        loss = sum_all(mul(out, Tensor(np.arange(6, dtype=np.float32))))
        grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[a.node], [0, 1])
    np.testing.assert_array_equal(grads[b.node], [3, 4, 5])
    with pytest.raises(ShapeError):
        concat([])


def test_select_scatters_gradient():
    with Tape() as tape:
        x = tape.watch(np.arange(6, dtype=np.float32).reshape(3, 2))
        loss = sum_all(select(x, 1))
        grads = tape.backward(loss)
    expected = np.zeros((3, 2), np.float32)
    expected[1] = 1
    np.testing.assert_array_equal(grads[x.node], expected)
    with pytest.raises(ShapeError):
        select(x, 3)


def test_mean_all_gradient():
    with Tape() as tape:
        x = tape.watch(np.ones((2, 5), dtype=np.float32))
        grads = tape.backward(mean_all(x))
    np.testing.assert_allclose(grads[x.node], np.full((2, 5), 0.1), rtol=1e-6)


@given(st.lists(st.floats(-1e3, 1e3, width=32), min_size=1, max_size=12), st.randoms())
def test_mean_scalars_is_permutation_invariant(values, shuffler):
    tensors = [Tensor(np.asarray(v, dtype=np.float64)) for v in values]
    ref = float(mean_scalars(tensors).data)
    shuffled = list(tensors)
    shuffler.shuffle(shuffled)
    assert float(mean_scalars(shuffled).data) == ref
    assert ref == math.fsum(values) / len(values)


def test_mean_scalars_rejects_vectors_and_empty():
    with pytest.raises(ShapeError):
        mean_scalars([Tensor(np.ones(2, np.float32))])
    with pytest.raises(ShapeError):
        mean_scalars([])


def test_mean_scalars_gradient_is_uniform_share():
    with Tape() as tape:
        xs = [tape.watch(np.asarray(float(i), dtype=np.float32)) for i in range(4)]
        grads = tape.backward(mean_scalars(xs))
    for x in xs:
        assert float(grads[x.node]) == pytest.approx(0.25)


def test_nonfinite_forward_raises():
    big = Tensor(np.full(2, 1e38, dtype=np.float32))
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        mul(big, big)
    with pytest.raises(NonFiniteError):
        Tensor(np.array([np.nan], dtype=np.float32))


def test_parameter_tensor_is_constant_off_tape():
    p = Parameter("w", np.ones(3, dtype=np.float32))
    assert not p.tensor().tracked()
    with Tape():
        assert p.tensor().tracked()
    p.trainable = False
    with Tape():
        assert not p.tensor().tracked()


def test_sgd_step_matches_reference_update():
    w0 = np.array([1.0, -2.0], dtype=np.float32)
    p = Parameter("w", w0.copy())
    g = np.array([0.5, 0.25], dtype=np.float32)
    lr, mom, wd = 0.1, 0.9, 0.01
    v = np.zeros_like(w0)
    w = w0.copy()
    for _ in range(3):
        sgd_step([p], {"w": g}, lr=lr, momentum=mom, weight_decay=wd)
        v = np.float32(mom) * v + g + np.float32(wd) * w
        w = w - np.float32(lr) * v
    np.testing.assert_array_equal(p.value, w)


def test_sgd_step_requires_gradients_for_trainables():
    p = Parameter("w", np.ones(2, dtype=np.float32))
    with pytest.raises(ValueError, match="missing gradient"):
        sgd_step([p], {})
    with pytest.raises(ShapeError):
        sgd_step([p], {"w": np.ones(3, dtype=np.float32)})


def test_frozen_parameter_is_bit_identical_across_steps():
    p = Parameter("w", np.linspace(0, 1, 5).astype(np.float32), trainable=False)
    before = p.value.tobytes()
    for _ in range(10):
        sgd_step([p], {"w": np.ones(5, dtype=np.float32)})
    assert p.value.tobytes() == before
