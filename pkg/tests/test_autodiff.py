"""Reverse-mode gradients against float64 central differences."""

import numpy as np
import pytest

from casdm.netcore import ad
from casdm.netcore.gradcheck import finite_diff_grad, max_rel_error, rel_error_norm

SEEDS = [0, 1, 2, 3, 4]
TOL = 1e-3


def check(fn, shapes, seed, positive=(), h=1e-5, tol=TOL):
    """fn maps a dict of Tensors to a Tensor; a random projection makes it scalar."""
    r = np.random.default_rng(seed)
    inputs = {}
    for k, shp in shapes.items():
        v = r.standard_normal(shp)
        inputs[k] = np.abs(v) + 0.5 if k in positive else v
    out_shape = fn({k: ad.constant(v) for k, v in inputs.items()}).shape
    proj = r.standard_normal(out_shape)

    def scalar(vals):
        return ad.sum(fn(vals) * ad.constant(proj))

    leaves = {k: ad.leaf(v) for k, v in inputs.items()}
    analytic = ad.grad(scalar(leaves), leaves)
    numeric = finite_diff_grad(lambda p: scalar({k: ad.constant(v) for k, v in p.items()}).data, inputs, h=h)
    for k in inputs:
        assert analytic[k].shape == inputs[k].shape
        err = rel_error_norm(analytic[k], numeric[k])
        assert err < tol, f"{k}: relative error {err:.2e}"


UNARY = {
    "neg": lambda v: -v["a"],
    "square": lambda v: ad.square(v["a"]),
    "exp": lambda v: ad.exp(v["a"]),
    "sigmoid": lambda v: ad.sigmoid(v["a"]),
    "silu": lambda v: ad.silu(v["a"]),
    "relu": lambda v: ad.relu(v["a"] + 0.0),
    "sum_all": lambda v: ad.sum(v["a"]),
    "sum_axis": lambda v: ad.sum(v["a"], axis=1, keepdims=True),
    "mean_axes": lambda v: ad.mean(v["a"], axis=(0, 2)),
    "reshape": lambda v: ad.reshape(v["a"], (3, -1)),
    "transpose": lambda v: ad.transpose(v["a"], (2, 0, 1)),
    "getitem": lambda v: v["a"][:, 1:3, ::2],
    "softmax": lambda v: ad.softmax(v["a"], axis=-1),
    "stop_then_square": lambda v: ad.square(v["a"]) + ad.stop_gradient(v["a"]) * 0.0,
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops(name, seed):
    check(UNARY[name], {"a": (3, 4, 5)}, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_sqrt(seed):
    check(lambda v: ad.sqrt(v["a"]), {"a": (4, 5)}, seed, positive=("a",))


BINARY = {
    "add": lambda v: v["a"] + v["b"],
    "sub": lambda v: v["a"] - v["b"],
    "mul": lambda v: v["a"] * v["b"],
    "div": lambda v: v["a"] / v["b"],
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("bshape", [(2, 3, 4), (3, 1), (4,), ()])
def test_binary_broadcast(name, bshape, seed):
    check(BINARY[name], {"a": (2, 3, 4), "b": bshape}, seed, positive=("b",) if name == "div" else ())


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_and_linear(seed):
    check(lambda v: v["a"] @ v["b"], {"a": (3, 4), "b": (4, 2)}, seed)
    check(lambda v: ad.linear(v["x"], v["w"], v["b"]), {"x": (5, 3), "w": (3, 4), "b": (4,)}, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_concat(seed):
    check(lambda v: ad.concat([v["a"], v["b"]], axis=-1), {"a": (2, 3, 2), "b": (2, 3, 1)}, seed)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("k", [1, 3])
def test_conv2d(seed, k):
    check(lambda v: ad.conv2d(v["x"], v["w"], v["b"]), {"x": (2, 5, 4, 3), "w": (k, k, 3, 2), "b": (2,)}, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_pools_and_resize(seed):
    check(lambda v: ad.avg_pool2(v["x"]), {"x": (2, 4, 6, 3)}, seed)
    check(lambda v: ad.global_avg_pool(v["x"]), {"x": (2, 4, 4, 3)}, seed)
    check(lambda v: ad.upsample2(v["x"]), {"x": (1, 3, 2, 2)}, seed)
    check(lambda v: ad.resize_bilinear(v["x"], 7, 5), {"x": (2, 4, 3, 2)}, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_group_norm(seed):
    check(
        lambda v: ad.group_norm(v["x"], 2, v["g"], v["b"]),
        {"x": (2, 3, 3, 4), "g": (4,), "b": (4,)},
        seed,
    )


def test_conv2d_against_loop_oracle(rng):
    x = rng.standard_normal((2, 4, 5, 3))
    w = rng.standard_normal((3, 3, 3, 2))
    b = rng.standard_normal(2)
    got = ad.conv2d(ad.constant(x), ad.constant(w), ad.constant(b)).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    want = np.zeros((2, 4, 5, 2))
    for i in range(4):
        for j in range(5):
            patch = xp[:, i : i + 3, j : j + 3, :]
            want[:, i, j, :] = np.einsum("nhwc,hwco->no", patch, w) + b
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_resize_bilinear_identity_and_constant():
    x = np.random.default_rng(0).standard_normal((1, 4, 4, 1))
    np.testing.assert_allclose(ad.resize_bilinear(ad.constant(x), 4, 4).data, x, atol=1e-12)
    c = np.full((1, 3, 3, 2), 0.7)
    np.testing.assert_allclose(ad.resize_bilinear(ad.constant(c), 8, 8).data, 0.7, atol=1e-12)


def test_bilinear_rows_sum_to_one():
    m = ad.bilinear_matrix(8, 32)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)


def test_stop_gradient_value_and_blocking():
    a = ad.leaf(np.array([1.0, 2.0, 3.0]))
    y = ad.sum(ad.square(ad.stop_gradient(a)) + a)
    np.testing.assert_allclose(y.data, 14.0 + 6.0)
    g = ad.grad(y, {"a": a})["a"]
    np.testing.assert_array_equal(g, np.ones(3))


def test_stop_gradient_makes_unreachable_zero():
    a = ad.leaf(np.ones((2, 2)))
    b = ad.leaf(np.ones((2, 2)))
    y = ad.sum(ad.stop_gradient(a) * b)
    g = ad.grad(y, {"a": a, "b": b})
    assert np.all(g["a"] == 0.0)
    np.testing.assert_array_equal(g["b"], np.ones((2, 2)))


def test_shared_subexpression_accumulates():
    a = ad.leaf(np.array(3.0))
    y = a * a + a
    assert float(ad.grad(y, [a])[0]) == pytest.approx(7.0)


def test_backward_rejects_non_scalar():
    a = ad.leaf(np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(a * 2.0)


def test_numpy_operand_on_left():
    a = ad.leaf(np.ones(2))
    y = np.array([2.0, 3.0]) * a
    assert isinstance(y, ad.Tensor)
    np.testing.assert_array_equal(ad.grad(ad.sum(y), [a])[0], [2.0, 3.0])


def test_max_rel_error_floor():
    assert max_rel_error(np.zeros(3), np.zeros(3)) == 0.0
    assert max_rel_error(np.array([1.0]), np.array([1.001])) == pytest.approx(1e-3, rel=1e-2)
