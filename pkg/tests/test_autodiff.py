import numpy as np
import pytest

from dast import autodiff as ad
from dast.autodiff import ParamSet, Tensor


def test_apply_primitive_matmul():
    out = ad.apply_primitive("matmul", Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert np.allclose(out.data, [[3.0], [7.0]])


def test_apply_primitive_softmax_uniform():
    out = ad.apply_primitive("softmax-rows", Tensor([0.0, 0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [0.25] * 4)


def test_log_exp_inverse():
    x = Tensor(0.7)
    assert ad.log(ad.exp(x)).item() == pytest.approx(0.7, abs=1e-12)


def test_forward_add():
    assert (Tensor(1.0) + Tensor(2.0)).item() == 3.0


def test_forward_dot_uniform_equals_mean():
    L = Tensor([1.0, 2.0, 3.0])
    w = Tensor([1 / 3] * 3)
    assert ad.dot(L, w).item() == pytest.approx(2.0)


def test_forward_dot_weighted():
    assert ad.dot(Tensor([1.0, 2.0, 3.0]), Tensor([0.2, 0.3, 0.5])).item() == pytest.approx(2.3)


def test_backward_quadratic():
    m = Tensor(0.0, requires_grad=True)
    loss = (m - Tensor(2.0)) * (m - Tensor(2.0))
    (g,) = ad.grad(loss, [m])
    assert g.item() == pytest.approx(-4.0, abs=1e-12)


def test_softmax_jacobian_rows_sum_zero():
    x = Tensor([1.0, 1.0, 1.0], requires_grad=True)
    c = Tensor([0.3, 0.5, 0.2])
    y = ad.dot(ad.softmax_last(x), c)
    (g,) = ad.grad(y, [x])
    assert abs(g.data.sum()) < 1e-12


def test_chain_rule_through_weighted_loss():
    # loss_i(m) = (m - t_i)^2, weighted by fixed w; grad = sum w_i * 2(m - t_i)
    m = Tensor(0.5, requires_grad=True)
    targets = [1.0, 3.0]
    w = [0.4, 0.6]
    L = ad.stack([(m - Tensor(t)) * (m - Tensor(t)) for t in targets])
    loss = ad.dot(L, Tensor(w))
    (g,) = ad.grad(loss, [m])
    expected = sum(wi * 2 * (0.5 - t) for wi, t in zip(w, targets))
    assert g.item() == pytest.approx(expected, abs=1e-12)


def test_grad_check_quadratic():
    ps = ParamSet({"m": Tensor(0.0, requires_grad=True)})
    err = ad.grad_check(lambda p: (p["m"] - Tensor(2.0)) * (p["m"] - Tensor(2.0)), ps, eps=1e-5)
    assert err < 1e-8


def test_fast_weight_clone_independent():
    ps = ParamSet({"w": Tensor([1.0, 2.0], requires_grad=True)})
    cp = ad.fast_weight_clone(ps)
    cp["w"].data[0] = 99.0
    assert ps["w"].data[0] == 1.0


def test_fast_weight_clone_empty():
    assert len(ad.fast_weight_clone(ParamSet())) == 0


def test_second_order_quadratic():
    # L(m) = (m-2)^2, inner step alpha=0.1 from m=0; d L(m') / dm = (1 - a L'')(-2)(2 - m')
    m = Tensor(0.0, requires_grad=True)
    loss = (m - Tensor(2.0)) * (m - Tensor(2.0))
    (g,) = ad.grad(loss, [m], create_graph=True)
    m_fast = m - Tensor(0.1) * g
    assert m_fast.item() == pytest.approx(0.4, abs=1e-12)
    outer = (m_fast - Tensor(2.0)) * (m_fast - Tensor(2.0))
    (g2,) = ad.grad(outer, [m])
    assert g2.item() == pytest.approx(-2.56, abs=1e-12)


def test_backward_linear_in_seed():
    x = Tensor(np.arange(6.0).reshape(2, 3) + 1.0, requires_grad=True)
    y = ad.tanh(ad.matmul(x, Tensor(np.ones((3, 2)) * 0.3)))
    seed = Tensor(np.random.default_rng(0).normal(size=y.shape))
    (g1,) = ad.grad(y, [x], seed=seed)
    (g2,) = ad.grad(y, [x], seed=Tensor(2 * seed.data))
    assert np.allclose(2 * g1.data, g2.data, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_primitives_grad_check_random(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    v = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    ps = ParamSet({"a": a, "b": b, "v": v})

    def build(p):
        h = ad.tanh(ad.matmul(p["a"], p["b"]))
        s = ad.softmax_last(h + p["v"])
        return ad.sum_(ad.mul(ad.sigmoid(h), ad.log(s + Tensor(1.0))))

    assert ad.grad_check(build, ps, eps=1e-5) < 1e-4


def test_determinism():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)

    def run():
        y = ad.sum_(ad.softmax_last(ad.matmul(x, w)))
        (g,) = ad.grad(y, [w])
        return y.data.copy(), g.data.copy()

    y1, g1 = run()
    y2, g2 = run()
    assert np.array_equal(y1, y2) and np.array_equal(g1, g2)


def test_nonfinite_rejected():
    with pytest.raises(ad.NumericError):
        ad.log(Tensor(0.0)) * Tensor(1.0)  # log(0) = -inf propagating into mul
    with pytest.raises(ad.NumericError):
        ad.exp(Tensor(1000.0))


def test_shape_mismatch_rejected():
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_scatter_take_roundtrip_grad():
    rng = np.random.default_rng(3)
    vals = Tensor(rng.random((2, 3)), requires_grad=True)
    ids = np.array([[0, 2, 2], [1, 1, 4]])
    ps = ParamSet({"v": vals})

    def build(p):
        grid = ad.scatter_add_last(p["v"], ids, 5)
        return ad.sum_(ad.mul(grid, grid))

    assert ad.grad_check(build, ps, eps=1e-5) < 1e-6


def test_grad_unreached_leaf_is_zero():
    x = Tensor(1.0, requires_grad=True)
    z = Tensor(5.0, requires_grad=True)
    y = x * x
    gx, gz = ad.grad(y, [x, z])
    assert gx.item() == pytest.approx(2.0)
    assert gz.item() == 0.0
