"""Gradient integrity: every registered op against central finite differences,
plus Adam against a hand-rolled scalar oracle and the graph-reuse guards."""

from __future__ import annotations

import math

import numpy as np
import pytest

from latentnav import autodiff as ad
from latentnav.autodiff import (Adam, GraphReused, Mlp, NotScalar, ShapeMismatch,
                                Tensor, backward, bilinear_sample_2d, l1_distance,
                                matmul, mul, no_grad, param, reduce_mean,
                                reduce_sum, softmax, zero_grad)


def scalarize(out: Tensor, cotangent: np.ndarray) -> Tensor:
    """Project an op output to a scalar with a fixed random cotangent, so the
    finite-difference check exercises the whole Jacobian."""
    return reduce_sum(mul(out, Tensor(cotangent)))


def fd_check(probe, seed, h=1e-6, tol=1e-4):
    rng = np.random.default_rng(seed)
    params, fn = probe(rng)
    cot = np.random.default_rng(seed + 1).normal(size=fn(*params).shape)

    loss = scalarize(fn(*params), cot)
    zero_grad(params)
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    for p, ga in zip(params, analytic):
        flat = p.data.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            lp = float(scalarize(fn(*params), cot).data)
            flat[i] = keep - h
            lm = float(scalarize(fn(*params), cot).data)
            flat[i] = keep
            fd = (lp - lm) / (2 * h)
            a = ga.ravel()[i]
            rel = abs(a - fd) / max(1.0, abs(a), abs(fd))
            assert rel < tol, f"param grad [{i}]: analytic {a}, fd {fd}, rel {rel}"


@pytest.mark.parametrize("name", sorted(ad.OPS))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_op_gradients_match_finite_differences(name, seed):
    fd_check(ad.OPS[name], seed=100 * seed + hash(name) % 50)


def test_mlp_gradients_match_finite_differences():
    # random 3-layer net, FD at h=1e-4, max relative error < 1e-4
    rng = np.random.default_rng(5)
    net = Mlp([4, 8, 8, 2], ["relu", "tanh", "none"], rng)
    x = Tensor(rng.normal(size=(6, 4)))
    cot = rng.normal(size=(6, 2))

    def loss_fn():
        return scalarize(net(x), cot)

    loss = loss_fn()
    zero_grad(net.parameters())
    backward(loss)
    h = 1e-4
    for p in net.parameters():
        flat = p.data.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            lp = float(loss_fn().data)
            flat[i] = keep - h
            lm = float(loss_fn().data)
            flat[i] = keep
            fd = (lp - lm) / (2 * h)
            a = p.grad.ravel()[i]
            assert abs(a - fd) / max(1.0, abs(a), abs(fd)) < 1e-4


# -- trivial identities -------------------------------------------------------


def test_l1_distance_of_identical_is_zero():
    x = Tensor(np.random.default_rng(0).normal(size=(5, 3)))
    assert float(l1_distance(x, x).data) == 0.0


def test_bilinear_sample_at_corner_is_exact():
    rng = np.random.default_rng(1)
    grid = Tensor(rng.normal(size=(4, 5, 2)))
    out = bilinear_sample_2d(grid, Tensor([[2.0, 3.0], [0.0, 0.0]]))
    np.testing.assert_array_equal(out.data[0], grid.data[2, 3])
    np.testing.assert_array_equal(out.data[1], grid.data[0, 0])


def test_softmax_of_constant_is_uniform():
    out = softmax(Tensor(np.full(7, 3.25)))
    np.testing.assert_allclose(out.data, 1.0 / 7, atol=1e-15)


def test_weighted_sum_gradient_is_the_weights():
    rng = np.random.default_rng(2)
    w = param(rng.normal(size=(4, 3)))
    x = np.random.default_rng(3).normal(size=(4, 3))
    backward(reduce_sum(mul(w, Tensor(x))))
    np.testing.assert_array_equal(w.grad, x)


def test_constant_loss_has_zero_gradients():
    w = param(np.ones((3, 2)))
    backward(reduce_sum(mul(w, Tensor(np.zeros((3, 2))))))
    np.testing.assert_array_equal(w.grad, np.zeros((3, 2)))


def test_gradients_accumulate_until_zeroed():
    w = param(np.ones(3))
    backward(reduce_sum(mul(w, Tensor([1.0, 2.0, 3.0]))))
    backward(reduce_sum(mul(w, Tensor([1.0, 2.0, 3.0]))))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0, 6.0])
    zero_grad([w])
    assert w.grad is None


# -- graph discipline ----------------------------------------------------------


def test_backward_rejects_nonscalar():
    w = param(np.ones(3))
    with pytest.raises(NotScalar):
        backward(mul(w, w))


def test_backward_twice_raises():
    w = param(np.ones(3))
    loss = reduce_sum(mul(w, w))
    backward(loss)
    with pytest.raises(GraphReused):
        backward(loss)


def test_subgraph_reuse_raises():
    w = param(np.ones(3))
    y = mul(w, w)
    backward(reduce_sum(y))
    with pytest.raises(GraphReused):
        backward(reduce_mean(y))


def test_no_grad_builds_no_graph():
    w = param(np.ones(3))
    with no_grad():
        y = mul(w, w)
    assert not y.requires_grad
    loss = reduce_sum(mul(w, Tensor([1.0, 1.0, 1.0])))
    backward(loss)
    np.testing.assert_array_equal(w.grad, np.ones(3))


def test_shape_mismatch_errors():
    with pytest.raises(ShapeMismatch):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_forward_and_gradients_are_deterministic():
    def run():
        rng = np.random.default_rng(9)
        params, fn = ad.OPS["bilinear_sample_2d"](rng)
        loss = reduce_sum(fn(*params))
        backward(loss)
        return [p.data.tobytes() for p in params], [p.grad.tobytes() for p in params]

    d1, g1 = run()
    d2, g2 = run()
    assert d1 == d2 and g1 == g2


# -- Adam ----------------------------------------------------------------------


def adam_oracle(x0, grads, lr):
    m, v, x = 0.0, 0.0, float(x0)
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1 - 0.9 ** t)
        vh = v / (1 - 0.999 ** t)
        x = x - lr * mh / (math.sqrt(vh) + 1e-8)
    return x


def test_adam_matches_scalar_oracle_over_10_steps():
    rng = np.random.default_rng(11)
    grads = rng.normal(size=10)
    p = param(0.7)
    opt = Adam([p], lr=0.05)
    for g in grads:
        p.grad = np.array(g)
        opt.step()
    assert float(p.data) == pytest.approx(adam_oracle(0.7, grads, 0.05), abs=1e-12)


def test_adam_zero_gradient_is_a_noop():
    p = param(np.array([1.0, -2.0]))
    opt = Adam([p], lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_constant_gradient_strictly_decreases():
    p = param(1.0)
    opt = Adam([p], lr=0.1)
    prev = float(p.data)
    for _ in range(8):
        p.grad = np.array(1.0)
        opt.step()
        assert float(p.data) < prev
        prev = float(p.data)


def test_adam_shape_mismatch():
    p = param(np.ones(3))
    opt = Adam([p], lr=0.1)
    p.grad = np.ones(4)
    with pytest.raises(ShapeMismatch):
        opt.step()


# -- Mlp structure ---------------------------------------------------------------


def test_mlp_width_chain_and_roundtrip(tmp_path):
    from latentnav.checkpoint import load_arrays, save_arrays

    rng = np.random.default_rng(21)
    net = Mlp([3, 5, 2], ["relu", "sigmoid"], rng)
    out = net(Tensor(rng.normal(size=(4, 3))))
    assert out.shape == (4, 2)
    assert ((out.data > 0) & (out.data < 1)).all()  # sigmoid head

    path = tmp_path / "net.rnrk"
    save_arrays(path, net.named_parameters("enc"))
    clone = Mlp([3, 5, 2], ["relu", "sigmoid"], np.random.default_rng(99))
    clone.load_named("enc", load_arrays(path))
    x = Tensor(rng.normal(size=(2, 3)))
    np.testing.assert_array_equal(net(x).data, clone(x).data)

    with pytest.raises(ShapeMismatch):
        Mlp([3, 5, 2], ["relu"], rng)
