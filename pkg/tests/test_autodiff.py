import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptda import autodiff as ad
from conceptda.autodiff import ContractError, ShapeError, Tape, Tensor


def param(values):
    return Tensor(values, requires_grad=True)


def grad_of(f, *params):
    for p in params:
        p.zero_grad()
    with Tape():
        out = f()
    ad.backward(out)
    return out


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.5, -2.0], [0.25, 4.0]])
        np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)

    def test_zero(self):
        m = np.array([[1.5, -2.0], [0.25, 4.0]])
        np.testing.assert_array_equal(ad.matmul(Tensor(np.zeros((2, 2))), Tensor(m)).data, np.zeros((2, 2)))

    def test_hand_product(self):
        out = ad.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_gradients(self):
        a, b = param(np.arange(6.0).reshape(2, 3)), param(np.arange(12.0).reshape(3, 4) / 10)
        g = np.random.default_rng(0).normal(size=(2, 4))
        grad_of(lambda: ad.total(ad.mul(ad.matmul(a, b), g)), a, b)
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)


class TestSigmoid:
    def test_values(self):
        out = ad.sigmoid(Tensor([0.0, 40.0, math.log(3.0), -800.0])).data
        assert out[0] == 0.5
        assert abs(out[1] - 1.0) < 1e-12
        assert out[2] == pytest.approx(0.75, abs=1e-15)
        assert out[3] == 0.0

    def test_gradient_at_zero(self):
        w = param(0.0)
        grad_of(lambda: ad.sigmoid(w), w)
        assert w.grad == pytest.approx(0.25)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = ad.softmax_cross_entropy(Tensor(np.zeros((4, 3))), np.eye(3)[[0, 1, 2, 0]])
        assert loss.item() == pytest.approx(math.log(3.0), abs=1e-14)

    def test_saturated(self):
        assert ad.softmax_cross_entropy(Tensor([[50.0, 0.0]]), [[1.0, 0.0]]).item() < 1e-12

    def test_direct_value(self):
        expected = -math.log(math.e / (math.e + 1))
        assert ad.softmax_cross_entropy(Tensor([[1.0, 0.0]]), [[1.0, 0.0]]).item() == pytest.approx(expected, abs=1e-14)
        assert expected == pytest.approx(0.3133, abs=1e-4)

    def test_rejects_non_one_hot(self):
        with pytest.raises(ContractError):
            ad.softmax_cross_entropy(Tensor([[1.0, 0.0]]), [[0.5, 0.5]])

    def test_stable_for_large_logits(self):
        assert np.isfinite(ad.softmax_cross_entropy(Tensor([[1e4, -1e4]]), [[0.0, 1.0]]).item())


class TestBinaryCrossEntropy:
    def test_values(self):
        assert ad.binary_cross_entropy(Tensor([0.5]), [1.0]).item() == pytest.approx(math.log(2))
        assert ad.binary_cross_entropy(Tensor([1 - 1e-7]), [1.0]).item() == pytest.approx(0.0, abs=1e-6)
        assert ad.binary_cross_entropy(Tensor([0.25]), [0.0]).item() == pytest.approx(-math.log(0.75))

    def test_clamped_endpoints_stay_finite(self):
        loss = ad.binary_cross_entropy(Tensor([0.0, 1.0]), [1.0, 0.0]).item()
        assert loss == pytest.approx(-math.log(1e-7), rel=1e-6)

    def test_rejects_soft_targets(self):
        with pytest.raises(ContractError):
            ad.binary_cross_entropy(Tensor([0.5]), [0.3])


class TestScalarMinConst:
    @pytest.mark.parametrize("a, tau, value, grad", [
        (0.3, 0.5, 0.3, 1.0),
        (0.8, 0.5, 0.5, 0.0),
        (0.5, 0.5, 0.5, 0.0),
    ])
    def test_branches(self, a, tau, value, grad):
        x = param(a)
        out = grad_of(lambda: ad.scalar_min_const(x, tau), x)
        assert out.item() == value
        assert x.grad == grad

    def test_rejects_bad_tau(self):
        with pytest.raises(ContractError):
            ad.scalar_min_const(Tensor(0.1), 0.0)

    @given(st.floats(-10, 10), st.floats(0.01, 10))
    def test_bounded_by_both(self, a, tau):
        out = ad.scalar_min_const(Tensor(a), tau).item()
        assert out <= tau and out <= a


class TestBackward:
    def test_square(self):
        w = param(3.0)
        grad_of(lambda: ad.mul(w, w), w)
        assert w.grad == 6.0

    def test_constant_loss(self):
        w = param(3.0)
        with Tape():
            out = ad.add(Tensor(2.0), Tensor(1.0))
        ad.backward(out)
        assert w.grad is None

    def test_accumulates_without_zeroing(self):
        w = param(3.0)
        for _ in range(2):
            with Tape():
                out = ad.mul(w, w)
            ad.backward(out)
        assert w.grad == 12.0

    def test_rejects_non_scalar(self):
        w = param([1.0, 2.0])
        with Tape():
            out = ad.mul(w, 2.0)
        with pytest.raises(ContractError):
            ad.backward(out)

    def test_tape_is_topologically_ordered(self):
        w = param(np.ones((2, 2)))
        with Tape() as tape:
            ad.total(ad.relu(ad.matmul(w, w)))
        for i, rec in enumerate(tape.records):
            assert rec.output.node_id == i
            assert all(inp.node_id is None or inp.node_id < i for inp in rec.inputs)

    def test_deterministic_repeat(self):
        rng = np.random.default_rng(3)
        w1, w2 = param(rng.normal(size=(4, 5))), param(rng.normal(size=(5, 1)))
        x = Tensor(rng.normal(size=(7, 4)))

        def f():
            return ad.mean(ad.sigmoid(ad.matmul(ad.relu(ad.matmul(x, w1)), w2)))

        grad_of(f, w1, w2)
        first = w1.grad.copy(), w2.grad.copy()
        grad_of(f, w1, w2)
        np.testing.assert_array_equal(first[0], w1.grad)
        np.testing.assert_array_equal(first[1], w2.grad)

    def test_shared_subexpression(self):
        w = param(2.0)
        grad_of(lambda: (lambda s: ad.mul(s, s))(ad.sigmoid(w)), w)
        s = 1 / (1 + math.exp(-2.0))
        assert w.grad == pytest.approx(2 * s * s * (1 - s))


class TestFiniteDiffCheck:
    def test_quadratic(self):
        w = param(3.0)
        assert ad.finite_diff_check(lambda: ad.mul(w, w), [w], h=1e-5) < 1e-8

    def test_constant(self):
        w = param(3.0)
        assert ad.finite_diff_check(lambda: ad.add(Tensor(1.0), ad.mul(w, 0.0)), [w]) == 0.0

    def test_detects_wrong_gradient(self):
        w = param([0.7, -0.2])

        def f():
            out = ad.total(ad.mul(w, w))
            if out.tape is not None:
                out.tape.records[-1].backward = lambda g: (np.broadcast_to(g, (2,)) * 0.5,)
            return out

        assert ad.finite_diff_check(f, [w]) > 0.1


def _random_input(rng, shape):
    x = rng.normal(size=shape)
    # stay away from the relu kink where central differences are not valid
    return np.where(np.abs(x) < 0.05, 0.1, x)


PRIMITIVES = {
    "add": lambda a, b: ad.add(a, b),
    "sub": lambda a, b: ad.sub(a, b),
    "mul": lambda a, b: ad.mul(a, b),
    "relu": lambda a, b: ad.relu(a),
    "sigmoid": lambda a, b: ad.sigmoid(a),
    "mean_axis0": lambda a, b: ad.mean(a, axis=0),
    "mean_axis1": lambda a, b: ad.mean(a, axis=1),
    "concat": lambda a, b: ad.concat([a, b]),
    "slice": lambda a, b: ad.take_last(a, 1, 3),
    "reshape": lambda a, b: ad.reshape(a, (6, 2)),
    "matmul": lambda a, b: ad.matmul(a, ad.reshape(b, (4, 3))),
    "affine": lambda a, b: ad.affine(a, ad.reshape(b, (4, 3)), ad.take_last(ad.reshape(b, (1, 12)), 0, 3)),
    "broadcast_mul": lambda a, b: ad.mul(a, ad.take_last(b, 0, 1)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    op = PRIMITIVES[name]
    for _ in range(50):
        a, b = param(_random_input(rng, (3, 4))), param(_random_input(rng, (3, 4)))
        weights = Tensor(rng.normal(size=op(Tensor(a.data), Tensor(b.data)).shape))
        err = ad.finite_diff_check(lambda: ad.total(ad.mul(op(a, b), weights)), [a, b], h=1e-6)
        assert err < 1e-4, name


@pytest.mark.parametrize("name", ["softmax_cross_entropy", "binary_cross_entropy", "scalar_min_const"])
def test_loss_gradients(name):
    rng = np.random.default_rng(11)
    for _ in range(50):
        logits = param(rng.normal(size=(5, 3)))
        if name == "softmax_cross_entropy":
            target = np.eye(3)[rng.integers(0, 3, 5)]
            f = lambda: ad.softmax_cross_entropy(logits, target)
        elif name == "binary_cross_entropy":
            target = rng.integers(0, 2, (5, 3)).astype(float)
            f = lambda: ad.binary_cross_entropy(ad.sigmoid(logits), target)
        else:
            # threshold 0.3 away from the mean on either side, never at the kink
            m = logits.data.mean()
            options = [t for t in (m + 0.3, m - 0.3) if t > 0] or [0.1]
            tau = options[rng.integers(len(options))]
            f = lambda: ad.scalar_min_const(ad.mean(logits), tau)
        assert ad.finite_diff_check(f, [logits], h=1e-6) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.integers(0, 5))
def test_losses_non_negative(logits, cls):
    cls = cls % len(logits)
    target = np.eye(len(logits))[[cls]]
    assert ad.softmax_cross_entropy(Tensor([logits]), target).item() >= 0
    p = ad.sigmoid(Tensor(logits))
    assert ad.binary_cross_entropy(p, np.ones(len(logits))).item() >= 0
