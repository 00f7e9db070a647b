import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anflow import autodiff as ad
from anflow.autodiff import BatchNormState, Tape, Tensor, backward, grad_check
from anflow.errors import DegenerateBatchError, InvalidInputError, InvalidShapeError

rng = np.random.default_rng(0)


def grad_of(f, *arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*ts)
    return out, backward(tape, out, wrt=ts), ts


def fd_check(f, *arrays, h=1e-6):
    """Max relative error of every input's gradient against central differences."""
    _, g, ts = grad_of(f, *arrays)
    worst = 0.0
    for k, a in enumerate(arrays):
        for idx in np.ndindex(a.shape):
            p = [x.copy() for x in arrays]
            m = [x.copy() for x in arrays]
            p[k][idx] += h
            m[k][idx] -= h
            fd = (float(f(*map(Tensor, p)).data) - float(f(*map(Tensor, m)).data)) / (2 * h)
            an = g[ts[k]][idx]
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-7))
    return worst


def away_from_zero(shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.1, 0.5, x)


PRIMITIVES = {
    "add": (lambda a, b: ad.tsum((a + b) * (a + b)), [(3, 4), (4,)]),
    "sub": (lambda a, b: ad.tsum((a - b) * a), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: ad.tsum(a * b * a), [(2, 3), (2, 3)]),
    "neg": (lambda a: ad.tsum(-a * a), [(5,)]),
    "matmul": (lambda a, b: ad.tsum(ad.cos(a @ b)), [(3, 4), (4, 2)]),
    "matmul_batched": (lambda a, b: ad.tsum(ad.cos(a @ b)), [(2, 3, 4), (2, 4, 2)]),
    "linear": (lambda x, W, b: ad.tsum(ad.cos(ad.linear(x, W, b))), [(2, 3, 4), (4, 5), (5,)]),
    "transpose": (lambda a: ad.tsum(ad.cos(a.transpose(1, 0, 2)) * np.arange(24.).reshape(3, 2, 4)),
                  [(2, 3, 4)]),
    "reshape": (lambda a: ad.tsum(ad.cos(a.reshape((6, 2))) * np.arange(12.).reshape(6, 2)), [(3, 4)]),
    "relu": (lambda a: ad.tsum(ad.relu(a) * a), [(4, 3)]),
    "exp": (lambda a: ad.tsum(ad.exp(a * 0.5)), [(4,)]),
    "cos": (lambda a: ad.tsum(ad.cos(a) * a), [(4,)]),
    "sum_axis": (lambda a: ad.tsum(ad.cos(ad.tsum(a, axis=1))), [(3, 4)]),
    "mean": (lambda a: ad.tsum(ad.cos(ad.mean(a, axis=0))), [(3, 4)]),
    "mask_apply": (lambda a: ad.tsum(ad.cos(ad.mask_apply(a, np.array([[1., 0.], [0., 1.]])))),
                   [(3, 2, 2)]),
    "getitem": (lambda a: ad.tsum(ad.cos(a[1:, 0])), [(3, 4)]),
    "concat": (lambda a, b: ad.tsum(ad.cos(ad.concat([a, b], axis=0)) * np.arange(10.)[:, None]),
               [(4, 2), (6, 2)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    f, shapes = PRIMITIVES[name]
    assert fd_check(f, *[away_from_zero(s) for s in shapes]) < 1e-5


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradient(training):
    st_ = BatchNormState(3)
    st_.running_mean = rng.normal(size=3)
    st_.running_var = rng.uniform(0.5, 2, 3)
    w = rng.normal(size=(5, 2, 3))

    def f(x, g, b):
        return ad.tsum(ad.cos(ad.batchnorm(x, g, b, st_, training=training, update_stats=False)) * w)
    assert fd_check(f, rng.normal(size=(5, 2, 3)), rng.normal(size=3), rng.normal(size=3)) < 1e-5


def test_relu_values():
    assert np.array_equal(ad.relu(Tensor([-2.0, 0.0, 3.0])).data, [0, 0, 3])


def test_relu_subgradient_zero_at_kink():
    _, g, (x,) = grad_of(lambda x: ad.tsum(ad.relu(x)), np.zeros(3))
    assert np.all(g[x] == 0)


def test_identity_matmul():
    A = rng.normal(size=(3, 5))
    assert np.array_equal((Tensor(np.eye(3)) @ Tensor(A)).data, A)


def test_cos_at_zero():
    out, g, (x,) = grad_of(lambda x: ad.tsum(ad.cos(x)), np.zeros(1))
    assert out.data == 1.0 and g[x][0] == 0.0


def test_square_gradient():
    _, g, (x,) = grad_of(lambda x: ad.tsum(x * x), np.array(3.0))
    assert g[x] == 6.0


def test_sum_exp_neg():
    _, g, (x,) = grad_of(lambda x: ad.tsum(ad.exp(-x)), np.zeros(5))
    assert np.array_equal(g[x], -np.ones(5))


def test_nonscalar_seed_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * x
    with pytest.raises(InvalidInputError):
        backward(tape, y)


def test_shape_mismatch():
    with pytest.raises(InvalidShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(InvalidShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_batchnorm_training_needs_batch():
    with pytest.raises(DegenerateBatchError):
        ad.batchnorm(Tensor(np.ones((1, 3))), np.ones(3), np.zeros(3), BatchNormState(3), training=True)


def test_batchnorm_inference_is_pure():
    st_ = BatchNormState(4)
    ad.batchnorm(Tensor(rng.normal(size=(16, 4))), np.ones(4), np.zeros(4), st_, training=True)
    mean, var = st_.running_mean.copy(), st_.running_var.copy()
    x = rng.normal(size=(8, 4))
    a = ad.batchnorm(Tensor(x), np.ones(4), np.zeros(4), st_, training=False).data
    # a different batch composition must not change per-row outputs
    b = ad.batchnorm(Tensor(np.concatenate([x[3:4], rng.normal(size=(5, 4))])), np.ones(4),
                     np.zeros(4), st_, training=False).data
    assert np.array_equal(a[3], b[0])
    assert np.array_equal(mean, st_.running_mean) and np.array_equal(var, st_.running_var)
    assert np.all(st_.running_var >= 0)


def test_mixer_block_composite():
    """Token- then channel-mixing block with batchnorm on a 2x4 input."""
    bn1, bn2 = BatchNormState(4), BatchNormState(4)
    W = [rng.normal(size=s) * 0.5 for s in [(2, 3), (3, 2), (4, 6), (6, 4)]]

    def block(X, W1, W2, W3, W4):
        Z = ad.batchnorm(X, np.ones(4), np.zeros(4), bn1, training=True, update_stats=False)
        U = X + (ad.relu(Z.transpose(0, 2, 1) @ W1) @ W2).transpose(0, 2, 1)
        Z2 = ad.batchnorm(U, np.ones(4), np.zeros(4), bn2, training=True, update_stats=False)
        return ad.tsum(ad.cos(U + ad.relu(Z2 @ W3) @ W4))

    assert fd_check(block, rng.normal(size=(3, 2, 4)), *W) < 1e-5


@given(st.floats(-5, 5).filter(lambda a: abs(a) > 1e-3))
@settings(max_examples=25, deadline=None)
def test_backward_linear_in_seed(a):
    x0 = np.linspace(-1, 1, 6)
    _, g1, (x,) = grad_of(lambda x: ad.tsum(ad.cos(x) * x), x0)
    _, g2, (y,) = grad_of(lambda x: ad.tsum(ad.cos(x) * x) * a, x0)
    assert np.allclose(g2[y], a * g1[x], rtol=1e-14, atol=1e-15)


class TestGradCheck:
    def test_quadratic(self):
        Q = rng.normal(size=(4, 4))
        Q = Q @ Q.T
        assert grad_check(lambda x: ad.tsum(x * (x @ Q)), rng.normal(size=(1, 4))) < 1e-8

    def test_relu_off_kink(self):
        assert grad_check(lambda x: ad.tsum(ad.relu(x) * x), away_from_zero(6)) < 1e-6

    def test_constant(self):
        assert grad_check(lambda x: ad.tsum(x * 0.0) + 2.0, rng.normal(size=3)) < 1e-10
