import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqtrans import autodiff as ad
from seqtrans.errors import NumericError, ShapeError


def fd_grad(f, x, eps=1e-6):
    """Central-difference gradient of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        gf[i] = (up - down) / (2 * eps)
    return g


def analytic_grad(build, tensors):
    with ad.Tape() as tape:
        out = build(*tensors)
        loss = ad.sum_all(ad.mul(out, out))
    grads = ad.backward(tape, loss)
    return [grads.wrt(t) for t in tensors]


def check_op(build, arrays, tol=1e-4):
    """Compare analytic gradients of sum(op(x)^2) against central differences."""
    tensors = [ad.Tensor(a) for a in arrays]
    analytic = analytic_grad(build, tensors)
    for k, arr in enumerate(arrays):
        def scalar(x, k=k):
            ts = [ad.Tensor(a) for a in arrays]
            ts[k] = ad.Tensor(x)
            out = build(*ts)
            return float((out.data ** 2).sum())

        numeric = fd_grad(scalar, arr.copy())
        denom = np.maximum(np.abs(numeric), 1e-6)
        rel = np.abs(analytic[k] - numeric) / denom
        assert rel.max() < tol, f"input {k}: max rel err {rel.max():.2e}"


def rand(rng, *shape):
    x = rng.normal(size=shape)
    # keep values away from relu/pool kinks so central differences are clean
    return np.where(np.abs(x) < 1e-2, np.sign(x) * 1e-2 + x, x)


CASES = {
    "add": lambda rng: (lambda a, b: ad.add(a, b), [rand(rng, 3, 4), rand(rng, 3, 4)]),
    "add_broadcast": lambda rng: (lambda a, b: ad.add(a, b), [rand(rng, 3, 1, 4), rand(rng, 5, 4)]),
    "sub": lambda rng: (lambda a, b: ad.sub(a, b), [rand(rng, 2, 5), rand(rng, 5)]),
    "mul": lambda rng: (lambda a, b: ad.mul(a, b), [rand(rng, 4, 3), rand(rng, 4, 3)]),
    "mul_broadcast": lambda rng: (lambda a, b: ad.mul(a, b), [rand(rng, 4, 1), rand(rng, 4, 3)]),
    "matmul": lambda rng: (lambda a, b: ad.matmul(a, b), [rand(rng, 3, 4), rand(rng, 4, 2)]),
    "matmul3d": lambda rng: (lambda a, b: ad.matmul(a, b), [rand(rng, 2, 3, 4), rand(rng, 4, 2)]),
    "tanh": lambda rng: (ad.tanh, [rand(rng, 3, 3)]),
    "sigmoid": lambda rng: (ad.sigmoid, [rand(rng, 6)]),
    "relu": lambda rng: (ad.relu, [rand(rng, 4, 4)]),
    "exp": lambda rng: (ad.exp, [rand(rng, 3, 2)]),
    "log": lambda rng: (ad.log, [np.abs(rand(rng, 5)) + 0.5]),
    "softmax": lambda rng: (ad.softmax, [rand(rng, 3, 4)]),
    "log_softmax": lambda rng: (ad.log_softmax, [rand(rng, 2, 3, 4)]),
    "layer_norm": lambda rng: (
        ad.layer_norm,
        [rand(rng, 4, 6), rand(rng, 6), rand(rng, 6)],
    ),
    "conv1d": lambda rng: (ad.conv1d, [rand(rng, 7, 3), rand(rng, 3, 3, 4), rand(rng, 4)]),
    "avg_pool1d": lambda rng: (ad.avg_pool1d, [rand(rng, 7, 4)]),
    "sum": lambda rng: (ad.sum_all, [rand(rng, 3, 4)]),
    "mean": lambda rng: (ad.mean_all, [rand(rng, 5, 2)]),
    "narrow_rows": lambda rng: (lambda x: ad.narrow(x, 0, 1, 3), [rand(rng, 5, 4)]),
    "narrow_cols": lambda rng: (lambda x: ad.narrow(x, 1, 2, 2), [rand(rng, 5, 6)]),
    "concat_rows": lambda rng: (lambda a, b: ad.concat([a, b], axis=0), [rand(rng, 2, 3), rand(rng, 4, 3)]),
    "concat_cols": lambda rng: (lambda a, b: ad.concat([a, b], axis=1), [rand(rng, 3, 2), rand(rng, 3, 5)]),
    "transpose": lambda rng: (ad.transpose, [rand(rng, 3, 5)]),
    "reshape": lambda rng: (lambda x: ad.reshape(x, (2, 6)), [rand(rng, 3, 4)]),
    "gather_cols": lambda rng: (
        lambda x: ad.gather_cols(x, np.array([0, 2, 1])),
        [rand(rng, 3, 4)],
    ),
    "embedding": lambda rng: (
        lambda t: ad.embedding(t, np.array([1, 0, 1, 2])),
        [rand(rng, 4, 3)],
    ),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients(name):
    # >= 100 random shapes/values across the suite per primitive family
    for seed in range(8):
        rng = np.random.default_rng(hash((name, seed)) % 2**32)
        build, arrays = CASES[name](rng)
        check_op(build, arrays)


def test_softmax_uniform_cases():
    np.testing.assert_allclose(ad.softmax(ad.Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(
        ad.log_softmax(ad.Tensor([0.0, 0.0, 0.0])).data,
        [-math.log(3.0)] * 3,
        atol=1e-15,
    )


def test_matmul_hand_case():
    out = ad.matmul(ad.Tensor([[1.0, 2.0]]), ad.Tensor([[3.0], [4.0]]))
    assert out.data.shape == (1, 1)
    assert out.data[0, 0] == 11.0


def test_forward_primitive_dispatch():
    out = ad.forward_primitive("matmul", ad.Tensor([[1.0, 2.0]]), ad.Tensor([[3.0], [4.0]]))
    assert out.data[0, 0] == 11.0
    with pytest.raises(ShapeError):
        ad.forward_primitive("no_such_op", ad.Tensor([1.0]))


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError) as err:
        ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)
    with pytest.raises(ShapeError) as err:
        ad.add(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4,))))
    assert "(2, 3)" in str(err.value) and "(4,)" in str(err.value)


def test_backward_of_sum_is_ones():
    x = ad.Tensor(np.arange(6.0).reshape(2, 3))
    with ad.Tape() as tape:
        loss = ad.sum_all(x)
    grads = ad.backward(tape, loss)
    np.testing.assert_array_equal(grads.wrt(x), np.ones((2, 3)))


def test_backward_of_sum_of_squares():
    x = ad.Tensor([1.0, 2.0])
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.mul(x, x))
    grads = ad.backward(tape, loss)
    np.testing.assert_allclose(grads.wrt(x), [2.0, 4.0], atol=1e-15)


def test_backward_requires_scalar_loss():
    x = ad.Tensor([1.0, 2.0])
    with ad.Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ShapeError):
        ad.backward(tape, y)


def test_two_layer_network_matches_finite_differences():
    rng = np.random.default_rng(7)
    params = ad.ParamTree(
        [
            ("w1", ad.Tensor(rng.normal(size=(4, 5)) * 0.5)),
            ("b1", ad.Tensor(rng.normal(size=(5,)) * 0.1)),
            ("w2", ad.Tensor(rng.normal(size=(5, 3)) * 0.5)),
            ("b2", ad.Tensor(rng.normal(size=(3,)) * 0.1)),
        ]
    )
    x = rng.normal(size=(6, 4))

    def f(p):
        h = ad.tanh(ad.add(ad.matmul(ad.Tensor(x), p["w1"]), p["b1"]))
        out = ad.tanh(ad.add(ad.matmul(h, p["w2"]), p["b2"]))
        return ad.sum_all(ad.mul(out, out))

    assert ad.finite_difference_check(f, params, eps=1e-5, max_components_per_leaf=8) <= 1e-4


def test_finite_difference_exact_for_linear_objective():
    params = ad.ParamTree([("w", ad.Tensor(np.array([1.0, -2.0, 3.0])))])
    err = ad.finite_difference_check(lambda p: ad.sum_all(p["w"]), params)
    assert err < 1e-9


def test_finite_difference_rejects_nonfinite():
    params = ad.ParamTree([("w", ad.Tensor(np.array([1.0])))])
    with pytest.raises(NumericError):
        ad.finite_difference_check(lambda p: ad.log(ad.sub(p["w"], p["w"])), params)


def test_reuse_accumulates_like_sum_of_single_use_tapes():
    rng = np.random.default_rng(3)
    x = ad.Tensor(rng.normal(size=(3, 3)))
    w = ad.Tensor(rng.normal(size=(3, 3)))

    # leaf w used twice on one tape
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.add(ad.matmul(x, w), ad.tanh(w)))
    combined = ad.backward(tape, loss).wrt(w)

    with ad.Tape() as t1:
        l1 = ad.sum_all(ad.matmul(x, w))
    g1 = ad.backward(t1, l1).wrt(w)
    with ad.Tape() as t2:
        l2 = ad.sum_all(ad.tanh(w))
    g2 = ad.backward(t2, l2).wrt(w)

    np.testing.assert_allclose(combined, g1 + g2, rtol=0, atol=1e-15)


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(8, 8))
    w = rng.normal(size=(8, 8))
    mask = (rng.random((8, 8)) > 0.3) / 0.7

    def run():
        out = ad.dropout(ad.tanh(ad.matmul(ad.Tensor(x), ad.Tensor(w))), mask)
        return out.data.tobytes()

    assert run() == run()


def test_no_tape_means_no_recording():
    x = ad.Tensor([1.0, 2.0])
    y = ad.mul(x, x)  # outside any tape
    with ad.Tape() as tape:
        z = ad.sum_all(y)
    assert len(tape.nodes) == 1  # only sum recorded
    grads = ad.backward(tape, z)
    np.testing.assert_array_equal(grads.wrt(x), np.zeros(2))


def test_param_tree_rejects_duplicates_and_keeps_order():
    tree = ad.ParamTree([("b", ad.Tensor([1.0])), ("a", ad.Tensor([2.0]))])
    assert tree.names() == ["b", "a"]
    with pytest.raises(ShapeError):
        tree.add("a", ad.Tensor([3.0]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(values):
    out = ad.softmax(ad.Tensor(np.array(values)))
    assert abs(out.data.sum() - 1.0) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_log_softmax_logsumexp_is_zero(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 5)) * 10
    out = ad.log_softmax(ad.Tensor(x)).data
    lse = np.log(np.exp(out).sum(axis=-1))
    assert np.abs(lse).max() < 1e-9
