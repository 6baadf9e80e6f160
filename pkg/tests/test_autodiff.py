import numpy as np
import pytest

from mvattn import autodiff as ad
from mvattn.autodiff import Tensor, backward, grad_check
from mvattn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint


def leaf(rng, shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


# -- forward values ------------------------------------------------------------


def test_softmax_uniform_logits():
    for n in (1, 3, 17):
        y = ad.softmax(Tensor(np.zeros((2, n))))
        np.testing.assert_allclose(y.data, np.full((2, n), 1.0 / n), atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    y = ad.softmax(Tensor(rng.standard_normal((5, 9)) * 10))
    np.testing.assert_allclose(y.data.sum(axis=-1), np.ones(5), atol=1e-12)


def test_layer_norm_moments():
    rng = np.random.default_rng(1)
    y = ad.layer_norm(Tensor(rng.standard_normal((8, 32)) * 3 + 2), eps=1e-10).data
    assert np.abs(y.mean(axis=-1)).max() < 1e-10
    assert np.abs(y.var(axis=-1) - 1.0).max() < 1e-8


def test_masked_fill_and_gather():
    x = Tensor(np.arange(6.0).reshape(3, 2))
    m = np.array([[True, False], [False, False], [False, True]])
    np.testing.assert_array_equal(
        ad.masked_fill(x, m, -1.0).data, [[-1.0, 1.0], [2.0, 3.0], [4.0, -1.0]]
    )
    np.testing.assert_array_equal(ad.gather_rows(x, [2, 0, 2]).data, [[4, 5], [0, 1], [4, 5]])


def test_shape_errors_name_both_shapes():
    a, b = Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))
    with pytest.raises(ad.ShapeError) as exc:
        ad.add(a, b)
    assert "(2, 3)" in str(exc.value) and "(3, 3)" in str(exc.value)
    with pytest.raises(ad.ShapeError):
        ad.matmul(a, Tensor(np.zeros((2, 2))))


def test_forward_determinism():
    rng1, rng2 = np.random.default_rng(42), np.random.default_rng(42)
    a = ad.gelu(Tensor(rng1.standard_normal((4, 4))))
    b = ad.gelu(Tensor(rng2.standard_normal((4, 4))))
    assert np.array_equal(a.data, b.data)


# -- simple analytic gradients ----------------------------------------------------


def test_grad_of_sum_of_squares():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    backward(ad.tensor_sum(ad.elementwise_mul(x, x)))
    np.testing.assert_allclose(x.grad, 2.0 * x.data, atol=1e-15)


def test_grad_of_product():
    x = Tensor(np.asarray(3.0), requires_grad=True)
    y = Tensor(np.asarray(4.0), requires_grad=True)
    backward(ad.elementwise_mul(x, y))
    assert x.grad == pytest.approx(4.0) and y.grad == pytest.approx(3.0)


def test_backward_requires_scalar_root():
    x = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(ad.scalar_mul(x, 2.0))


def test_constant_root_leaves_no_grads():
    x = Tensor(np.ones(3))  # requires_grad False
    y = ad.tensor_sum(ad.elementwise_mul(x, x))
    backward(y)
    assert x.grad is None


def test_grad_accumulates_across_backwards():
    x = Tensor(np.array([2.0]), requires_grad=True)
    backward(ad.tensor_sum(ad.elementwise_mul(x, x)))
    first = x.grad.copy()
    backward(ad.tensor_sum(ad.elementwise_mul(x, x)))
    np.testing.assert_allclose(x.grad, 2.0 * first)


# -- finite-difference checks per op ------------------------------------------------

EPS = 1e-5
TOL = 1e-6


def check(f, x):
    assert grad_check(f, x, eps=EPS) < TOL


def test_gradcheck_add_sub_mul():
    rng = np.random.default_rng(2)
    other = Tensor(rng.standard_normal((3, 4)))
    check(lambda x: ad.tensor_sum(ad.add(x, other)), leaf(rng, (3, 4)))
    check(lambda x: ad.tensor_sum(ad.sub(other, x)), leaf(rng, (3, 4)))
    check(lambda x: ad.tensor_sum(ad.elementwise_mul(x, other)), leaf(rng, (3, 4)))
    check(lambda x: ad.tensor_sum(ad.scalar_mul(x, -1.7)), leaf(rng, (3, 4)))


def test_gradcheck_matmul_2d_and_batched():
    rng = np.random.default_rng(3)
    b2 = Tensor(rng.standard_normal((4, 2)))
    check(lambda x: ad.tensor_sum(ad.matmul(x, b2)), leaf(rng, (3, 4)))
    b3 = Tensor(rng.standard_normal((2, 4, 3)))
    check(lambda x: ad.tensor_sum(ad.matmul(x, b3)), leaf(rng, (2, 5, 4)))
    a3 = Tensor(rng.standard_normal((2, 5, 4)))
    check(lambda x: ad.tensor_sum(ad.matmul(a3, x)), leaf(rng, (2, 4, 3)))


def test_gradcheck_shape_ops():
    rng = np.random.default_rng(4)
    w = Tensor(rng.standard_normal((4, 3, 2)))
    check(lambda x: ad.tensor_sum(ad.elementwise_mul(ad.transpose(x, (2, 0, 1)), Tensor(np.ones((2, 4, 3))))), leaf(rng, (4, 3, 2)))
    check(lambda x: ad.tensor_sum(ad.elementwise_mul(ad.reshape(x, (6, 4)), Tensor(np.arange(24.0).reshape(6, 4)))), leaf(rng, (4, 3, 2)))
    del w


def test_gradcheck_gather_with_duplicates():
    rng = np.random.default_rng(5)
    idx = np.array([0, 2, 2, 1, 0])
    sel = Tensor(rng.standard_normal((5, 3)))
    check(lambda x: ad.tensor_sum(ad.elementwise_mul(ad.gather_rows(x, idx), sel)), leaf(rng, (4, 3)))


def test_gather_backward_matches_addat_for_large_index_sets():
    # the bincount fast path must agree with ufunc.at scatter
    rng = np.random.default_rng(6)
    idx = rng.integers(0, 50, size=2000)
    x = Tensor(rng.standard_normal((50, 7)), requires_grad=True)
    g = rng.standard_normal((2000, 7))
    backward(ad.tensor_sum(ad.elementwise_mul(ad.gather_rows(x, idx), Tensor(g))))
    expected = np.zeros((50, 7))
    np.add.at(expected, idx, g)
    np.testing.assert_allclose(x.grad, expected, atol=1e-12)


def test_gradcheck_concat():
    rng = np.random.default_rng(7)
    other = Tensor(rng.standard_normal((2, 3)))
    sel = Tensor(rng.standard_normal((5, 3)))

    def f(x):
        return ad.tensor_sum(ad.elementwise_mul(ad.concat([x, other], axis=0), sel))

    check(f, leaf(rng, (3, 3)))


def test_gradcheck_softmax_layernorm_gelu():
    rng = np.random.default_rng(8)
    sel = Tensor(rng.standard_normal((4, 6)))
    check(lambda x: ad.tensor_sum(ad.elementwise_mul(ad.softmax(x), sel)), leaf(rng, (4, 6)))
    check(lambda x: ad.tensor_sum(ad.elementwise_mul(ad.layer_norm(x), sel)), leaf(rng, (4, 6)))
    check(lambda x: ad.tensor_sum(ad.elementwise_mul(ad.gelu(x), sel)), leaf(rng, (4, 6)))


def test_gradcheck_exp_log_sqrt_mean():
    rng = np.random.default_rng(9)
    check(lambda x: ad.tensor_sum(ad.exp(x)), leaf(rng, (3, 3), scale=0.5))
    pos = Tensor(np.abs(rng.standard_normal((3, 3))) + 0.5, requires_grad=True)
    check(lambda x: ad.tensor_sum(ad.log(x)), pos)
    pos2 = Tensor(np.abs(rng.standard_normal((3, 3))) + 0.5, requires_grad=True)
    check(lambda x: ad.tensor_sum(ad.sqrt(x)), pos2)
    check(lambda x: ad.mean(ad.elementwise_mul(x, x)), leaf(rng, (4, 2)))


def test_gradcheck_masked_fill():
    rng = np.random.default_rng(10)
    mask = rng.random((3, 4)) < 0.4
    check(lambda x: ad.tensor_sum(ad.elementwise_mul(ad.masked_fill(x, mask, 3.0), Tensor(np.ones((3, 4))))), leaf(rng, (3, 4)))


def test_gradcheck_add_rowvec_both_args():
    rng = np.random.default_rng(11)
    v = Tensor(rng.standard_normal(4))
    sel = Tensor(rng.standard_normal((3, 4)))
    check(lambda x: ad.tensor_sum(ad.elementwise_mul(ad.add_rowvec(x, v), sel)), leaf(rng, (3, 4)))
    x_fixed = Tensor(rng.standard_normal((3, 4)))
    check(lambda v_: ad.tensor_sum(ad.elementwise_mul(ad.add_rowvec(x_fixed, v_), sel)), leaf(rng, (4,)))


def test_gradcheck_per_token_matvec():
    rng = np.random.default_rng(12)
    mats = rng.standard_normal((5, 3, 3))
    sel2 = Tensor(rng.standard_normal((5, 3)))
    check(lambda x: ad.tensor_sum(ad.elementwise_mul(ad.per_token_matvec(x, mats), sel2)), leaf(rng, (5, 3)))
    sel3 = Tensor(rng.standard_normal((2, 5, 3)))
    check(lambda x: ad.tensor_sum(ad.elementwise_mul(ad.per_token_matvec(x, mats), sel3)), leaf(rng, (2, 5, 3)))


def test_gradcheck_rowwise_dot_and_logsumexp():
    rng = np.random.default_rng(13)
    other = Tensor(rng.standard_normal((6, 4)))
    check(lambda x: ad.tensor_sum(ad.rowwise_dot(x, other)), leaf(rng, (6, 4)))
    check(lambda x: ad.tensor_sum(ad.rowwise_dot(other, x)), leaf(rng, (6, 4)))
    check(lambda x: ad.tensor_sum(ad.logsumexp_rows(x)), leaf(rng, (4, 7)))


def test_gradcheck_l2_normalize_rows():
    rng = np.random.default_rng(14)
    sel = Tensor(rng.standard_normal((5, 3)))
    check(lambda x: ad.tensor_sum(ad.elementwise_mul(ad.l2_normalize_rows(x), sel)), leaf(rng, (5, 3)))


def test_gradcheck_composite_graph():
    rng = np.random.default_rng(15)
    w1 = Tensor(rng.standard_normal((6, 8)))
    w2 = Tensor(rng.standard_normal((8, 4)))

    def f(x):
        h = ad.gelu(ad.matmul(x, w1))
        h = ad.layer_norm(h)
        h = ad.softmax(ad.matmul(h, w2))
        return ad.mean(ad.elementwise_mul(h, h))

    check(f, leaf(rng, (5, 6)))


def test_grad_check_sum_of_squares_tight():
    rng = np.random.default_rng(16)
    x = leaf(rng, (4,))
    assert grad_check(lambda t: ad.tensor_sum(ad.elementwise_mul(t, t)), x, eps=1e-5) < 1e-9


# -- dot-product counter ----------------------------------------------------------


def test_dot_counter_counts_rows():
    ad.reset_dot_product_count()
    a = Tensor(np.ones((7, 3)))
    ad.rowwise_dot(a, a)
    ad.rowwise_dot(a, a)
    assert ad.dot_product_count() == 14
    ad.reset_dot_product_count()
    assert ad.dot_product_count() == 0


# -- debug finite check -------------------------------------------------------------


def test_debug_finite_check_flags_nan():
    ad.set_debug_check_finite(True)
    try:
        with pytest.raises(FloatingPointError):
            ad.log(Tensor(np.array([-1.0])))
    finally:
        ad.set_debug_check_finite(False)


# -- checkpoint io -------------------------------------------------------------------


def test_checkpoint_bit_exact_roundtrip(tmp_path):
    rng = np.random.default_rng(17)
    named = {
        "w": rng.standard_normal((3, 4)),
        "nested.name.b": rng.standard_normal(7),
        "scalar": np.asarray(3.14159),
        "tricky": np.array([np.pi, -0.0, 1e-308, 1e308]),
    }
    path = tmp_path / "state.mvck"
    save_checkpoint(path, named)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(named)
    for key, arr in named.items():
        assert loaded[key].shape == np.asarray(arr).shape
        assert np.array_equal(
            loaded[key].view(np.uint64), np.asarray(arr, dtype=np.float64).view(np.uint64)
        )


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.mvck"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
