import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vgnn import diffcore as dc
from vgnn.checks import check_op_gradients, op_gradient_cases
from vgnn.diffcore import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# forward ops

def test_softmax_uniform_logits():
    out = dc.softmax(Tensor(np.full(4, 3.7)), axis=-1)
    np.testing.assert_array_equal(out.data, np.full(4, 0.25))


def test_masked_softmax_rows():
    rng = np.random.default_rng(0)
    mask = rng.random((6, 6)) < 0.4
    np.fill_diagonal(mask, True)
    out = dc.softmax(Tensor(rng.normal(size=(6, 6)) * 5), axis=-1, mask=mask).data
    assert (out >= 0).all()
    assert np.all(out[~mask] == 0.0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12, rtol=0)


def test_softmax_fully_masked_row_rejected():
    mask = np.array([[True, False], [False, False]])
    with pytest.raises(ValueError):
        dc.softmax(Tensor(np.zeros((2, 2))), axis=-1, mask=mask)


@pytest.mark.parametrize("K", [1, 3, 5, 7])
def test_conv1d_identity_kernel_and_length(K):
    rng = np.random.default_rng(K)
    x = rng.normal(size=(2, 9, 3))
    w = np.zeros((K, 3, 3))
    w[K // 2] = np.eye(3)
    out = dc.conv1d_same(Tensor(x), Tensor(w)).data
    assert out.shape == x.shape
    np.testing.assert_array_equal(out, x)


def test_conv1d_even_kernel_rejected():
    with pytest.raises(dc.ShapeError):
        dc.conv1d_same(Tensor(np.zeros((4, 1))), Tensor(np.zeros((2, 1, 1))))


def test_conv1d_matches_unrolled_loop():
    rng = np.random.default_rng(3)
    L, cin, cout, K = 6, 2, 3, 3
    x, w = rng.normal(size=(L, cin)), rng.normal(size=(K, cin, cout))
    expect = np.zeros((L, cout))
    for t in range(L):
        for k in range(K):
            s = t + k - K // 2
            if 0 <= s < L:
                expect[t] += x[s] @ w[k]
    np.testing.assert_allclose(dc.conv1d_same(Tensor(x), Tensor(w)).data, expect, rtol=0, atol=1e-14)


def test_matmul_by_hand():
    a = np.array([[1.0, 2, 3], [4, 5, 6]])
    b = np.array([[7.0, 8], [9, 10], [11, 12]])
    out = dc.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_array_equal(out, [[58, 64], [139, 154]])


def test_matmul_shape_mismatch():
    with pytest.raises(dc.ShapeError):
        dc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_batchnorm_train_statistics():
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 5.0, size=(8, 7, 4))
    state = dc.BatchNormState.fresh(4)
    out = dc.batchnorm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), state, True, eps=0.0).data
    flat = out.reshape(-1, 4)
    assert np.abs(flat.mean(axis=0)).max() < 1e-9
    assert np.abs(flat.var(axis=0) - 1).max() < 1e-6
    # running statistics moved a tenth of the way toward the batch statistics
    np.testing.assert_allclose(state.mean, 0.1 * x.reshape(-1, 4).mean(axis=0))


def test_batchnorm_eval_uses_running_stats():
    state = dc.BatchNormState(np.array([1.0, -1.0]), np.array([4.0, 0.25]))
    x = np.array([[3.0, 0.0]])
    out = dc.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, False, eps=0.0).data
    np.testing.assert_allclose(out, [[1.0, 2.0]])


def test_leaky_relu_slope():
    out = dc.leaky_relu(Tensor(np.array([-2.0, 0.0, 3.0])), 0.2).data
    np.testing.assert_array_equal(out, [-0.4, 0.0, 3.0])


def test_sigmoid_stable_at_extremes():
    out = dc.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


def test_broadcast_mismatch_is_shape_error():
    with pytest.raises(dc.ShapeError):
        dc.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


# backward

def test_grad_of_sum_is_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    dc.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_grad_of_square_sum():
    x = leaf([1.0, -2.0, 3.5])
    dc.sum(x * x).backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_shared_subexpression_accumulates():
    x = leaf([2.0])
    y = x * x
    dc.sum(y + y).backward()
    np.testing.assert_array_equal(x.grad, [8.0])


def test_backward_requires_scalar():
    with pytest.raises(dc.ShapeError):
        leaf([1.0, 2.0]).backward()


def test_broadcast_gradient_reduces():
    a, b = leaf(np.ones((3, 4))), leaf(np.ones(4))
    dc.sum(a + b).backward()
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_getitem_gradient_scatters():
    x = leaf(np.arange(5.0))
    dc.sum(x[1:3]).backward()
    np.testing.assert_array_equal(x.grad, [0, 1, 1, 0, 0])


# gradient checking

def test_grad_check_linear_is_exact():
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(4, 3)))
    err = dc.grad_check(lambda x: dc.sum(dc.matmul(x, w)), leaf(rng.normal(size=(2, 4))))
    assert err < 1e-9


def test_grad_check_sigmoid_chain():
    rng = np.random.default_rng(1)
    f = lambda x: dc.sum(dc.sigmoid(dc.scale(dc.sigmoid(x), 3.0)))
    assert dc.grad_check(f, leaf(rng.normal(size=(3, 3))), 1e-5) < 1e-6


def test_grad_check_relu_away_from_kink():
    x = leaf([-1.5, -0.3, 0.4, 2.0])
    assert dc.grad_check(lambda t: dc.sum(dc.relu(t) * t), x, 1e-5) < 1e-6


def test_grad_check_excludes_kink_probes():
    x = leaf([1e-7, 1.0])   # first coordinate straddles the relu kink at h=1e-5
    res = dc.grad_check(lambda t: dc.sum(dc.relu(t)), x, 1e-5, detail=True)
    assert res.skipped_kinks == 1 and res.checked == 1
    assert res.max_rel_error < 1e-9


def test_grad_check_catches_wrong_gradient():
    def bad_square(x):
        return dc.custom((x,), x.data ** 2, lambda g: (g * 3 * x.data,))
    assert dc.grad_check(lambda x: dc.sum(bad_square(x)), leaf([1.0, 2.0])) > 0.1


def test_every_op_passes_grad_check():
    res = check_op_gradients(seed=0)
    assert res.passed, res.detail


@pytest.mark.parametrize("seed", range(10))
def test_op_gradients_random_shapes(seed):
    for name, fn, x in op_gradient_cases(np.random.default_rng(100 + seed)):
        assert dc.grad_check(fn, x, 1e-5) < 1e-4, name


def test_relative_error_floor():
    assert dc.relative_error(np.array([1e-12]), np.array([0.0])) == pytest.approx(1e-4)


# Adam

def test_adam_zero_gradient_is_noop():
    p = leaf([1.0, -2.0])
    p.grad = np.zeros(2)
    dc.adam_step(dc.AdamState(), [p])
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_lr_times_sign():
    p = leaf([0.0, 0.0])
    p.grad = np.array([5.0, -0.01])
    dc.adam_step(dc.AdamState(lr=0.003), [p])
    np.testing.assert_allclose(p.data, [-0.003, 0.003], rtol=1e-5)


def test_adam_constant_gradient_step_tends_to_lr():
    p = leaf([0.0])
    st_ = dc.AdamState(lr=0.003)
    prev = 0.0
    for _ in range(500):
        p.grad = np.array([0.7])
        dc.adam_step(st_, [p])
        step, prev = prev - p.data[0], p.data[0]
    assert step == pytest.approx(0.003, rel=1e-6)


# checkpoints

def test_archive_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(2, 3)), "b.c": np.array([1.5]), "s": np.array(2.0)}
    path = tmp_path / "x.ckpt"
    dc.save_archive(path, tensors)
    back = dc.load_archive(path)
    assert list(back) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
    assert (tmp_path / "x.ckpt.manifest.txt").read_text().count("\n") >= 3


def test_archive_bad_magic(tmp_path):
    path = tmp_path / "junk"
    path.write_bytes(b"notacheckpoint")
    with pytest.raises(ValueError):
        dc.load_archive(path)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_rows_sum_to_one(vals):
    out = dc.softmax(Tensor(np.array(vals)), axis=-1).data
    assert math.isclose(out.sum(), 1.0, abs_tol=1e-12)
