import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from greybox import autodiff as ad
from greybox.errors import BackwardStateError, DimensionError, ValidationError
from oracles import numeric_grad, rel_error


def grad_check(fn, *arrays_, seed=0):
    """Compare tape gradients of ``sum(fn(*xs) * R)`` with central differences for every input."""
    xs = [np.array(a, dtype=np.float64) for a in arrays_]
    out_shape = fn(*[ad.Tensor(x) for x in xs]).shape
    weights = np.random.default_rng(seed).uniform(-1, 1, size=out_shape)

    def value():
        return float(np.sum(fn(*[ad.Tensor(x) for x in xs]).data * weights))

    tensors = [ad.Tensor(x, requires_grad=True) for x in xs]
    out = fn(*tensors)
    ad.sum(ad.mul(out, ad.Tensor(weights))).backward()
    return max(rel_error(t.grad, numeric_grad(value, x)) for t, x in zip(tensors, xs))


def uniform(rng, *shape):
    return rng.uniform(-2, 2, size=shape)


# ------------------------------------------------------------------ matmul


def test_matmul_identity():
    out = ad.matmul(ad.Tensor([[1.0, 0], [0, 1]]), ad.Tensor([[3.0, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_dot():
    assert ad.matmul(ad.Tensor([[1.0, 2]]), ad.Tensor([[3.0], [4]])).data.tolist() == [[11.0]]


def test_matmul_gradient(rng):
    assert grad_check(ad.matmul, uniform(rng, 4, 5), uniform(rng, 5, 3)) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


def test_matmul_backward_rule(rng):
    a, b = ad.Tensor(uniform(rng, 3, 4), True), ad.Tensor(uniform(rng, 4, 2), True)
    g = uniform(rng, 3, 2)
    ad.sum(ad.mul(ad.matmul(a, b), ad.Tensor(g))).backward()
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-14)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-14)


# ------------------------------------------------------------------ conv2d


def test_conv_zero_input():
    k = np.random.default_rng(0).normal(size=(3, 2, 3, 3))
    assert not ad.conv2d(ad.Tensor(np.zeros((1, 2, 4, 4))), ad.Tensor(k)).data.any()


def test_conv_counts_overlapping_ones():
    out = ad.conv2d(ad.Tensor(np.ones((1, 1, 3, 3))), ad.Tensor(np.ones((1, 1, 3, 3)))).data[0, 0]
    np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_is_cross_correlation():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 1.0
    k = np.arange(9.0).reshape(1, 1, 3, 3)
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(k)).data[0, 0]
    # an impulse under cross-correlation reproduces the kernel flipped
    np.testing.assert_array_equal(out, k[0, 0, ::-1, ::-1])


def test_conv_matches_direct_loop(rng):
    x, k = uniform(rng, 2, 2, 5, 5), uniform(rng, 3, 2, 3, 3)
    pad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 5, 5))
    for n in range(2):
        for f in range(3):
            for i in range(5):
                for j in range(5):
                    ref[n, f, i, j] = np.sum(pad[n, :, i:i + 3, j:j + 3] * k[f])
    np.testing.assert_allclose(ad.conv2d(ad.Tensor(x), ad.Tensor(k)).data, ref, rtol=1e-12, atol=1e-12)


def test_conv_gradient(rng):
    assert grad_check(ad.conv2d, uniform(rng, 2, 2, 5, 5), uniform(rng, 3, 2, 3, 3)) < 1e-5


def test_conv_with_bias_gradient(rng):
    assert grad_check(ad.conv2d, uniform(rng, 1, 2, 4, 4), uniform(rng, 2, 2, 3, 3), uniform(rng, 2)) < 1e-5


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        ad.conv2d(ad.Tensor(np.ones((1, 2, 4, 4))), ad.Tensor(np.ones((1, 3, 3, 3))))


def test_conv_rejects_non_3x3_kernel():
    with pytest.raises(DimensionError):
        ad.conv2d(ad.Tensor(np.ones((1, 1, 4, 4))), ad.Tensor(np.ones((1, 1, 5, 5))))


# ------------------------------------------------------------------ elementwise


def test_sign_convention():
    assert ad.sign(ad.Tensor([-2.0, 0.0, 3.0])).data.tolist() == [-1, 0, 1]


def test_clip_values():
    assert ad.clip(ad.Tensor([-0.5, 0.5, 1.5]), 0, 1).data.tolist() == [0, 0.5, 1]


def test_relu_subgradient():
    x = ad.Tensor([-1.0, 2.0], requires_grad=True)
    ad.sum(ad.relu(x)).backward()
    assert x.grad.tolist() == [0, 1]


def test_relu_gradient_zero_at_zero():
    x = ad.Tensor([0.0], requires_grad=True)
    ad.sum(ad.relu(x)).backward()
    assert x.grad.tolist() == [0]


@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul])
def test_binary_gradients(op, rng):
    assert grad_check(op, uniform(rng, 3, 4), uniform(rng, 3, 4)) < 1e-4


@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul])
def test_binary_shape_mismatch(op):
    with pytest.raises(DimensionError):
        op(ad.Tensor(np.ones(3)), ad.Tensor(np.ones(4)))


def test_no_implicit_broadcast():
    with pytest.raises(DimensionError):
        ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones(3)))


@pytest.mark.parametrize("fn", [
    ad.relu,
    ad.neg,
    lambda t: ad.scale(t, -1.7),
    lambda t: ad.clip(t, -1.0, 1.0),
    lambda t: ad.add(t, 2.5),
    lambda t: ad.mul(t, 0.3),
    ad.sign,
], ids=["relu", "neg", "scale", "clip", "add-scalar", "mul-scalar", "sign"])
def test_unary_gradients(fn, rng):
    x = uniform(rng, 4, 3)
    x[np.abs(x) < 0.05] = 0.5  # stay away from kinks
    x[np.abs(np.abs(x) - 1.0) < 0.05] = 0.5
    assert grad_check(fn, x) < 1e-4


def test_sign_has_zero_gradient():
    x = ad.Tensor([-2.0, 0.5], requires_grad=True)
    ad.sum(ad.sign(x)).backward()
    assert x.grad.tolist() == [0, 0]


def test_operator_overloads():
    a, b = ad.Tensor([1.0, 2.0]), ad.Tensor([3.0, 5.0])
    assert (a + b).data.tolist() == [4, 7]
    assert (a - b).data.tolist() == [-2, -3]
    assert (a * b).data.tolist() == [3, 10]
    assert (-a).data.tolist() == [-1, -2]
    assert (1.0 - a).data.tolist() == [0, -1]
    assert (2.0 * a).data.tolist() == [2, 4]


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-10, 10)),
       st.floats(-5, 0), st.floats(0, 5))
def test_clip_idempotent(x, lo, hi):
    once = ad.clip(ad.Tensor(x), lo, hi).data
    np.testing.assert_array_equal(ad.clip(ad.Tensor(once), lo, hi).data, once)


# ------------------------------------------------------------------ reductions


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(ad.Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], rtol=1e-15)


def test_cross_entropy_uniform():
    assert ad.cross_entropy(ad.Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-15)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValidationError):
        ad.cross_entropy(ad.Tensor([[0.0, 0.0]]), [2])
    with pytest.raises(ValidationError):
        ad.cross_entropy(ad.Tensor([[0.0, 0.0]]), [-1])


def test_cross_entropy_stable_for_large_logits():
    loss = ad.cross_entropy(ad.Tensor([[1000.0, 0.0]]), [1]).item()
    assert loss == pytest.approx(1000.0)


def test_max_pool_single_window():
    x = ad.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), requires_grad=True)
    out = ad.max_pool2d(x)
    assert out.data.tolist() == [[[[4.0]]]]
    ad.sum(out).backward()
    assert x.grad.tolist() == [[[[0, 0], [0, 1]]]]


@pytest.mark.parametrize("fn", [
    ad.sum,
    ad.mean,
    ad.softmax,
    ad.log_softmax,
    ad.transpose,
    lambda t: ad.reshape(t, (6, 2)),
    lambda t: ad.cross_entropy(t, [0, 2, 1, 0]),
    lambda t: ad.cross_entropy(t, [0, 2, 1, 0], reduction="sum"),
    ad.normalize_rows,
], ids=["sum", "mean", "softmax", "log_softmax", "transpose", "reshape", "ce-mean", "ce-sum", "normalize"])
def test_reduction_gradients(fn, rng):
    assert grad_check(fn, uniform(rng, 4, 3)) < 1e-4


def test_max_pool_gradient(rng):
    assert grad_check(ad.max_pool2d, uniform(rng, 2, 2, 4, 6)) < 1e-4


def test_dense_gradient(rng):
    assert grad_check(ad.dense, uniform(rng, 5, 4), uniform(rng, 4, 3), uniform(rng, 3)) < 1e-4


def test_flatten_gradient(rng):
    assert grad_check(ad.flatten, uniform(rng, 2, 2, 3, 3)) < 1e-4


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(x):
    p = ad.softmax(ad.Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(ad.log_softmax(ad.Tensor(x)).data, np.log(p), atol=1e-9)


def test_softmax_requires_2d():
    with pytest.raises(DimensionError):
        ad.softmax(ad.Tensor([1.0, 2.0]))


# ------------------------------------------------------------------ cosine similarity


@pytest.mark.parametrize("a,b,expected", [
    ([1, 2, 3], [1, 2, 3], 1.0),
    ([1, 0], [0, 1], 0.0),
    ([1, 1], [-1, -1], -1.0),
])
def test_cosine_examples(a, b, expected):
    value = ad.cosine_similarity(ad.Tensor(np.array(a, float)), ad.Tensor(np.array(b, float))).item()
    assert value == pytest.approx(expected, abs=1e-15)


def test_cosine_zero_vector_is_finite():
    a = ad.Tensor(np.zeros(3), requires_grad=True)
    b = ad.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    out = ad.cosine_similarity(a, b)
    out.backward()
    assert out.item() == 0.0
    assert np.all(np.isfinite(a.grad)) and np.all(np.isfinite(b.grad))


def test_cosine_gradient_vectors(rng):
    assert grad_check(ad.cosine_similarity, uniform(rng, 6), uniform(rng, 6)) < 1e-4


def test_cosine_gradient_rows(rng):
    assert grad_check(ad.cosine_similarity, uniform(rng, 4, 5), uniform(rng, 4, 5)) < 1e-4


def test_cosine_length_mismatch():
    with pytest.raises(DimensionError):
        ad.cosine_similarity(ad.Tensor(np.ones(3)), ad.Tensor(np.ones(4)))


# ------------------------------------------------------------------ backward / tape


def test_backward_linear():
    x = ad.Tensor(np.zeros(3), requires_grad=True)
    ad.sum(x).backward()
    assert x.grad.tolist() == [1, 1, 1]


def test_backward_quadratic():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    ad.sum(ad.mul(x, x)).backward()
    assert x.grad.tolist() == [2, 4]


def test_backward_non_scalar_loss():
    with pytest.raises(ValidationError):
        ad.Tensor(np.ones(2), requires_grad=True).backward()


def test_double_backward_needs_reset():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    tape = ad.GradTape(ad.sum(ad.mul(x, x)))
    tape.backward()
    with pytest.raises(BackwardStateError):
        tape.backward()
    tape.reset()
    tape.backward()
    assert x.grad.tolist() == [2, 4]


def test_tensor_backward_twice_is_an_error():
    x = ad.Tensor([1.0], requires_grad=True)
    loss = ad.sum(x)
    loss.backward()
    with pytest.raises(BackwardStateError):
        loss.backward()


def test_tape_records_in_order_and_replays_in_reverse():
    x = ad.Tensor([1.0, -2.0], requires_grad=True)
    a = ad.relu(x)
    b = ad.scale(a, 3.0)
    c = ad.sum(b)
    tape = ad.GradTape(c)
    assert tape.ops == [a, b, c]
    visited = []
    for node in tape.ops:
        original = node._backward
        node._backward = (lambda g, n=node, f=original: (visited.append(n), f(g))[1])
    tape.backward()
    assert visited == [c, b, a]


def test_all_reachable_leaves_get_gradients():
    x = ad.Tensor([1.0], requires_grad=True)
    unused_branch = ad.Tensor([5.0], requires_grad=True)
    loss = ad.sum(ad.add(ad.mul(x, 0.0), ad.mul(unused_branch, 0.0)))
    loss.backward()
    assert x.grad is not None and unused_branch.grad is not None


def test_gradient_accumulates_over_shared_use():
    x = ad.Tensor([3.0], requires_grad=True)
    ad.sum(ad.add(x, x)).backward()
    assert x.grad.tolist() == [2.0]


def test_composite_network_gradient(rng):
    """conv -> relu -> pool -> dense -> cross_entropy, every parameter against finite differences."""
    x = rng.uniform(0, 1, size=(2, 1, 4, 4))
    params = {"k": uniform(rng, 2, 1, 3, 3) * 0.5, "kb": uniform(rng, 2) * 0.1,
              "w": uniform(rng, 8, 3) * 0.5, "b": uniform(rng, 3) * 0.1}
    labels = [0, 2]

    def loss_of(p):
        h = ad.max_pool2d(ad.relu(ad.conv2d(ad.Tensor(x), p["k"], p["kb"])))
        return ad.cross_entropy(ad.dense(ad.flatten(h), p["w"], p["b"]), labels)

    tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
    loss_of(tensors).backward()
    worst = 0.0
    for name, arr in params.items():
        num = numeric_grad(lambda: loss_of({k: ad.Tensor(v) for k, v in params.items()}).item(), arr)
        worst = max(worst, rel_error(tensors[name].grad, num))
    assert worst < 1e-4


# ------------------------------------------------------------------ stop-gradient


def test_stop_gradient_detaches():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    y = ad.Tensor([3.0, 4.0], requires_grad=True)
    ad.sum(ad.mul(ad.stop_gradient(x), y)).backward()
    assert y.grad.tolist() == [1.0, 2.0]
    assert x.grad.tolist() == [0.0, 0.0]


def test_stop_gradient_values_identical(rng):
    x = ad.Tensor(uniform(rng, 3, 3), requires_grad=True)
    sg = ad.stop_gradient(x)
    assert sg.data.tobytes() == x.data.tobytes()
    assert not sg.requires_grad


def test_stop_gradient_changes_backbone_loss_gradient(rng):
    """With the clean branch detached the gradient differs from the fully differentiable loss."""
    w = uniform(rng, 6, 4)
    x = rng.uniform(0, 1, size=(3, 6))
    x_adv = np.clip(x + rng.uniform(-0.05, 0.05, size=x.shape), 0, 1)

    def grad(detach: bool):
        xt = ad.Tensor(x, requires_grad=True)
        xa = ad.Tensor(x_adv, requires_grad=True)
        clean = ad.matmul(xt, ad.Tensor(w))
        if detach:
            clean = ad.stop_gradient(clean)
        loss = ad.sum(ad.sub(ad.Tensor(np.ones(3)), ad.cosine_similarity(clean, ad.matmul(xa, ad.Tensor(w)))))
        loss.backward()
        return xt.grad, xa.grad

    gx_sg, ga_sg = grad(True)
    gx_full, ga_full = grad(False)
    assert not gx_sg.any()
    assert np.abs(gx_full).max() > 0
    np.testing.assert_allclose(ga_sg, ga_full, rtol=1e-12)  # the adversarial side is unaffected


def test_determinism(rng):
    x = uniform(rng, 2, 1, 4, 4)
    k = uniform(rng, 2, 1, 3, 3)

    def run():
        xt, kt = ad.Tensor(x, True), ad.Tensor(k, True)
        ad.sum(ad.max_pool2d(ad.conv2d(xt, kt))).backward()
        return xt.grad.tobytes(), kt.grad.tobytes()

    assert run() == run()


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 5)), elements=st.floats(-2, 2)))
def test_ops_finite_on_finite_inputs(x):
    t = ad.Tensor(x, requires_grad=True)
    out = ad.cross_entropy(ad.softmax(t), [0] * x.shape[0])
    out.backward()
    assert np.isfinite(out.item()) and np.all(np.isfinite(t.grad))


def test_cross_entropy_gradient_saturated_logits():
    # p_0 rounds to 1; the label entry must still be -p_1, not 0
    z = ad.Tensor(np.array([[50.0, 0.0]]), requires_grad=True)
    ad.cross_entropy(z, np.array([0])).backward()
    p1 = np.exp(-50.0) / (1 + np.exp(-50.0))
    np.testing.assert_allclose(z.grad, [[-p1, p1]], rtol=1e-12)
