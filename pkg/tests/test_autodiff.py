"""Per-op and whole-model gradient checks against central finite differences."""

import numpy as np
import pytest

from uvap import autodiff as ad

GEN = np.random.Generator(np.random.Philox(key=2024))


def _check_op(build, params, h=1e-6, tol=1e-6):
    """Gradient-check a scalar-valued builder over a dict of float64 arrays."""
    tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
    out = build(tensors)
    out.backward()
    analytic = {k: tensors[k].grad for k in params}

    def loss_fn(p):
        ts = {k: ad.Tensor(v, requires_grad=True) for k, v in p.items()}
        return float(build(ts).data)

    numeric = ad.finite_difference_gradients(loss_fn, params, h=h)
    err = ad.max_relative_error(analytic, numeric)
    assert err < tol, f"max rel err {err}"


def test_add_mul_broadcast():
    params = {"a": GEN.normal(size=(3, 4)), "b": GEN.normal(size=(4,)),
              "c": GEN.normal(size=(3, 1))}
    _check_op(lambda t: ad.mean_all(ad.mul(ad.add(t["a"], t["b"]), t["c"])), params)


def test_matmul_linear():
    params = {"x": GEN.normal(size=(5, 3)), "w": GEN.normal(size=(3, 4)),
              "b": GEN.normal(size=(4,))}
    _check_op(lambda t: ad.mean_all(ad.linear(t["x"], t["w"], t["b"])), params)


def test_silu():
    params = {"x": GEN.normal(size=(6, 6)) * 3}
    _check_op(lambda t: ad.mean_all(ad.mul(ad.silu(t["x"]), t["x"])), params)


def test_silu_extreme_values_no_overflow():
    x = ad.Tensor(np.array([-1e4, -50.0, 0.0, 50.0, 1e4]))
    with np.errstate(over="raise"):
        y = ad.silu(x)
    assert np.all(np.isfinite(y.data))
    assert y.data[0] == 0.0 and y.data[-1] == 1e4


def test_conv3x3_stride1():
    params = {"x": GEN.normal(size=(2, 6, 6, 3)), "w": GEN.normal(size=(3, 3, 3, 4)),
              "b": GEN.normal(size=(4,))}
    _check_op(lambda t: ad.mean_all(ad.conv3x3(t["x"], t["w"], t["b"])), params)


def test_conv3x3_stride2():
    params = {"x": GEN.normal(size=(2, 8, 8, 3)), "w": GEN.normal(size=(3, 3, 3, 5)),
              "b": GEN.normal(size=(5,))}
    _check_op(lambda t: ad.mean_all(
        ad.conv3x3(t["x"], t["w"], t["b"], stride=2)), params)


def test_upsample_film_concat():
    params = {"h": GEN.normal(size=(2, 4, 4, 3)), "s": GEN.normal(size=(2, 3)),
              "t": GEN.normal(size=(2, 3)), "h2": GEN.normal(size=(2, 8, 8, 2))}

    def build(t):
        up = ad.upsample2(ad.film(t["h"], t["s"], t["t"]))
        return ad.mean_all(ad.mul(ad.concat_channels(up, t["h2"]),
                                  ad.concat_channels(up, t["h2"])))
    _check_op(build, params)


def test_embedding_masked_mean():
    idx = np.array([[0, 2, 1], [2, 2, 0]])
    mask = np.array([[1.0, 1.0, 1.0], [1.0, 1.0, 0.0]])
    params = {"E": GEN.normal(size=(3, 4))}
    _check_op(lambda t: ad.mean_all(
        ad.mul(ad.masked_mean(ad.embedding(t["E"], idx), mask),
               ad.masked_mean(ad.embedding(t["E"], idx), mask))), params)


def test_mse_value_and_gradient():
    pred = ad.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
    target = np.array([[0.0, 2.0], [3.0, 2.0]])
    loss = ad.mse(pred, target)
    assert float(loss.data) == pytest.approx((1 + 0 + 0 + 4) / 4)
    loss.backward()
    assert np.allclose(pred.grad, 2 * (pred.data - target) / 4)


def test_reused_node_accumulates_gradient():
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    y = ad.add(ad.mul(x, x), x)   # x^2 + x -> dy/dx = 2x + 1 = 5
    y.backward()
    assert np.allclose(x.grad, [5.0])
