import threading

import numpy as np
import pytest

from robustcl import autodiff as ad
from robustcl.autodiff import Tape, TapeClosedError, Tensor, TensorError, finite_diff_grad


def grad_of(build, x0):
    """Reverse-mode gradient of a scalar-valued builder at x0."""
    with Tape() as tape:
        x = Tensor(x0)
        tape.watch(x)
        loss = build(x)
        (g,) = tape.grad(loss, [x])
    return g.data


def fd_of(build, x0, h=1e-6):
    def f(v):
        return build(Tensor(v.reshape(np.shape(x0)))).item()

    return finite_diff_grad(f, np.asarray(x0, dtype=float), h=h).reshape(np.shape(x0))


class TestForwardExamples:
    def test_matmul_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(a, Tensor(np.eye(2)))
        assert np.array_equal(out.data, a.data)

    def test_relu_definition(self):
        assert np.array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_softmax_symmetry(self):
        assert np.allclose(ad.softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(TensorError, match=r"\(2, 3\).*\(2, 2\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_nonfinite_rejected(self):
        with pytest.raises(TensorError, match="non-finite"):
            Tensor([1.0, np.nan])
        with pytest.raises(TensorError, match="non-finite"):
            ad.exp(Tensor([1000.0]))  # overflow to inf must not escape


class TestGrad:
    def test_sum_of_squares(self):
        g = grad_of(lambda x: ad.tsum(ad.mul(x, x)), [1.0, 2.0, 3.0])
        assert np.allclose(g, [2.0, 4.0, 6.0])

    def test_unreachable_node_gets_zeros(self):
        with Tape() as tape:
            x = Tensor([1.0, 2.0])
            w = Tensor([3.0, 4.0])
            tape.watch(x)
            tape.watch(w)
            loss = ad.tsum(ad.mul(x, x))
            gx, gw = tape.grad(loss, [x, w])
        assert np.allclose(gx.data, [2.0, 4.0])
        assert np.array_equal(gw.data, [0.0, 0.0])

    def test_fanout_accumulates(self):
        # y used twice: d/dy (y*y + 3y) = 2y + 3
        g = grad_of(lambda x: ad.tsum(ad.add(ad.mul(x, x), ad.scale(x, 3.0))), [2.0])
        assert np.allclose(g, [7.0])

    def test_mlp_loss_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        W1 = rng.normal(size=(4, 8))
        W2 = rng.normal(size=(8, 3))
        yoh = np.zeros((2, 3))
        yoh[[0, 1], [1, 2]] = 1.0

        def build(x):
            h = ad.relu(ad.matmul(x, Tensor(W1)))
            ls = ad.log_softmax(ad.matmul(h, Tensor(W2)))
            return ad.scale(ad.tsum(ad.mul(ls, Tensor(yoh))), -0.5)

        x0 = rng.normal(size=(2, 4)) + 0.3
        g = grad_of(build, x0)
        fd = fd_of(build, x0, h=1e-5)
        rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-6)
        assert rel.max() < 1e-4

    def test_non_scalar_loss_rejected(self):
        with Tape() as tape:
            x = Tensor([1.0, 2.0])
            tape.watch(x)
            y = ad.mul(x, x)
            with pytest.raises(TensorError, match="scalar"):
                tape.grad(y, [x])

    def test_closed_tape_rejected(self):
        with Tape() as tape:
            x = Tensor([1.0])
            tape.watch(x)
            loss = ad.tsum(ad.mul(x, x))
        with pytest.raises(TapeClosedError):
            tape.grad(loss, [x])

    def test_wrt_not_on_tape_rejected(self):
        with Tape() as tape:
            x = Tensor([1.0])
            tape.watch(x)
            loss = ad.tsum(x)
            stranger = Tensor([2.0])
            with pytest.raises(TensorError, match="not on this tape"):
                tape.grad(loss, [stranger])

    def test_linearity(self):
        # grad(a*f + b*g) == a*grad(f) + b*grad(g) on shared inputs
        rng = np.random.default_rng(1)
        x0 = rng.normal(size=5)
        a, b = 2.5, -1.25

        def f(x):
            return ad.tsum(ad.mul(x, x))

        def g(x):
            return ad.tsum(ad.relu(x))

        combined = grad_of(lambda x: ad.add(ad.scale(f(x), a), ad.scale(g(x), b)), x0)
        separate = a * grad_of(f, x0) + b * grad_of(g, x0)
        assert np.abs(combined - separate).max() < 1e-10

    def test_clip_subgradient_convention(self):
        # identity strictly inside the interval, zero outside
        x0 = np.array([-2.0, -0.5, 0.5, 2.0])
        g = grad_of(lambda x: ad.tsum(ad.clip(x, -1.0, 1.0)), x0)
        assert np.array_equal(g, [0.0, 1.0, 1.0, 0.0])

    def test_relu_subgradient_zero_at_kink(self):
        g = grad_of(lambda x: ad.tsum(ad.relu(x)), [0.0, 1.0, -1.0])
        assert np.array_equal(g, [0.0, 1.0, 0.0])

    def test_sign_has_zero_gradient(self):
        with Tape() as tape:
            x = Tensor([1.5, -2.0])
            tape.watch(x)
            loss = ad.tsum(ad.sign(x))
            (g,) = tape.grad(loss, [x])
        assert np.array_equal(g.data, [0.0, 0.0])

    def test_double_backward_hessian_vector_product(self):
        A = np.array([[2.0, 1.0], [1.0, 3.0]])
        v = np.array([1.0, -1.0])
        with Tape() as tape:
            x = Tensor([0.5, 0.2])
            tape.watch(x)
            Ax = ad.reshape(ad.matmul(Tensor(A), ad.reshape(x, (2, 1))), (2,))
            q = ad.scale(ad.tsum(ad.mul(x, Ax)), 0.5)
            (g,) = tape.grad(q, [x], create_graph=True)
            dot = ad.tsum(ad.mul(g, Tensor(v)))
            (hv,) = tape.grad(dot, [x])
        assert np.allclose(hv.data, A @ v)


class TestFiniteDiff:
    def test_norm_squared(self):
        g = finite_diff_grad(lambda v: float(v @ v), np.array([1.0, -1.0]), h=1e-5)
        assert np.abs(g - [2.0, -2.0]).max() < 1e-8

    def test_constant_function(self):
        g = finite_diff_grad(lambda v: 7.0, np.array([1.0, 2.0, 3.0]))
        assert np.array_equal(g, np.zeros(3))

    def test_logistic_loss_cross_check(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(6, 3))
        y = rng.integers(0, 2, size=6).astype(float)

        def build(w):
            z = ad.reshape(ad.matmul(Tensor(X), ad.reshape(w, (3, 1))), (6,))
            # logistic loss via stable log-sum-exp on [0, -z] pairs
            two_col = ad.matmul(ad.reshape(z, (6, 1)), Tensor([[1.0, 0.0]]))
            ls = ad.log_softmax(two_col)
            picked = ad.mul(ls, Tensor(np.stack([y, 1 - y], axis=1)))
            return ad.scale(ad.tsum(picked), -1.0 / 6)

        w0 = rng.normal(size=3)
        g = grad_of(build, w0)
        fd = fd_of(build, w0, h=1e-5)
        assert np.abs(g - fd).max() < 1e-6

    def test_nonfinite_function_rejected(self):
        with pytest.raises(TensorError, match="non-finite"):
            finite_diff_grad(lambda v: float("nan"), np.array([1.0]))

    def test_bad_step_rejected(self):
        with pytest.raises(TensorError):
            finite_diff_grad(lambda v: 0.0, np.array([1.0]), h=0.0)


class TestTapeScoping:
    def test_ops_without_tape_are_plain(self):
        out = ad.mul(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        assert np.array_equal(out.data, [3.0, 8.0])

    def test_constant_inputs_not_recorded(self):
        with Tape() as tape:
            a = ad.mul(Tensor([1.0]), Tensor([2.0]))
            assert tape.node_id(a) is None

    def test_independent_tapes_in_threads(self):
        def worker(seed, out, i):
            rng = np.random.default_rng(seed)
            x0 = rng.normal(size=4)
            out[i] = grad_of(lambda x: ad.tsum(ad.mul(x, x)), x0) - 2 * x0

        results = [None, None]
        threads = [
            threading.Thread(target=worker, args=(s, results, i))
            for i, s in enumerate([1, 2])
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for r in results:
            assert np.abs(r).max() < 1e-12
