"""Operator-level gradient checks against central finite differences."""

import numpy as np
import pytest

from mammochrome import diffcore as dc
from mammochrome.diffcore import Optimizer, OptimizerConfig, ParamSet, Tape


def fd_grad(f, x, h=1e-6):
    """Central finite-difference gradient of scalar f at array x."""
    x = x.astype(np.float64).copy()
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def loss_through(op_builder, *arrays):
    """Scalar loss: fixed random projection of the op output.

    Returns (loss_fn_of_ith_input, analytic_grads). op_builder(tape, *vars)
    must return the output Var.
    """
    rng = np.random.default_rng(99)
    tape = Tape()
    vars_ = [tape.var(a) for a in arrays]
    out = op_builder(tape, *vars_)
    proj = rng.normal(size=out.value.shape)
    seed = proj
    tape.backward(out, seed_grad=seed)
    analytic = [v.grad for v in vars_]

    def make_f(i):
        def f(x):
            t = Tape()
            vs = [t.var(x if j == i else arrays[j]) for j in range(len(arrays))]
            o = op_builder(t, *vs)
            return float((o.value * proj).sum())
        return f

    return make_f, analytic


def check_op(op_builder, *arrays, tol=1e-7):
    make_f, analytic = loss_through(op_builder, *arrays)
    for i, a in enumerate(arrays):
        num = fd_grad(make_f(i), a)
        ana = analytic[i] if analytic[i] is not None else np.zeros_like(a)
        err = np.abs(ana - num).max()
        scale = max(1.0, np.abs(num).max())
        assert err / scale < tol, f"input {i}: max abs err {err}"


class TestOperatorGradients:
    def test_conv2d_same_stride1(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=(4,))
        check_op(lambda t, xv, wv, bv: dc.conv2d(xv, wv, bv), x, w, b)

    def test_conv2d_same_stride2(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 2, 8, 8))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=(3,))
        check_op(lambda t, xv, wv, bv: dc.conv2d(xv, wv, bv, stride=2), x, w, b)

    def test_conv2d_valid(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 2, 7, 5))
        w = rng.normal(size=(2, 2, 3, 3))
        b = rng.normal(size=(2,))
        check_op(lambda t, xv, wv, bv: dc.conv2d(xv, wv, bv, padding="valid"), x, w, b)

    def test_max_pool2(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 6, 6))  # continuous values: ties have measure zero
        check_op(lambda t, xv: dc.max_pool2(xv), x)

    def test_upsample_nearest2(self):
        rng = np.random.default_rng(4)
        check_op(lambda t, xv: dc.upsample_nearest2(xv), rng.normal(size=(2, 3, 4, 4)))

    def test_global_avg_pool(self):
        rng = np.random.default_rng(5)
        check_op(lambda t, xv: dc.global_avg_pool(xv), rng.normal(size=(2, 4, 5, 5)))

    def test_dense(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(3, 5))
        w = rng.normal(size=(5, 4))
        b = rng.normal(size=(4,))
        check_op(lambda t, xv, wv, bv: dc.dense(xv, wv, bv), x, w, b)

    def test_concat_channels(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(2, 2, 4, 4))
        b = rng.normal(size=(2, 3, 4, 4))
        check_op(lambda t, av, bv: dc.concat_channels(av, bv), a, b)

    def test_sigmoid(self):
        rng = np.random.default_rng(8)
        check_op(lambda t, xv: dc.sigmoid(xv), rng.normal(size=(3, 4)))

    def test_bce_with_logits(self):
        rng = np.random.default_rng(9)
        z = rng.normal(size=(6, 1))
        y = (rng.random(6) > 0.5).astype(float)
        tape = Tape()
        zv = tape.var(z)
        loss = dc.bce_with_logits(zv, y)
        tape.backward(loss)
        num = fd_grad(lambda x: float(dc.bce_with_logits(Tape().var(x), y).value), z)
        assert np.abs(zv.grad - num).max() < 1e-8


class TestClosedForms:
    def test_conv_identity_kernel(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 1, 5, 5))
        tape = Tape()
        out = dc.conv2d(tape.var(x), tape.var(np.ones((1, 1, 1, 1))), tape.var(np.zeros(1)))
        np.testing.assert_array_equal(out.value, x)

    def test_relu_all_negative(self):
        tape = Tape()
        out = dc.relu(tape.var(-np.ones((2, 3))))
        assert (out.value == 0).all()

    def test_sigmoid_zero(self):
        tape = Tape()
        assert dc.sigmoid(tape.var(np.zeros(3))).value[0] == 0.5

    def test_dense_weight_grad_closed_form(self):
        # y = x @ W: dL/dW = x^T g
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 2))
        w = rng.normal(size=(2, 2))
        g = rng.normal(size=(2, 2))
        tape = Tape()
        wv = tape.var(w)
        out = dc.dense(tape.var(x), wv, tape.var(np.zeros(2)))
        tape.backward(out, seed_grad=g)
        np.testing.assert_allclose(wv.grad, x.T @ g, rtol=1e-14)

    def test_bce_saturated_gradient_is_zero(self):
        tape = Tape()
        zv = tape.var(np.array([1000.0]))
        loss = dc.bce_with_logits(zv, np.array([1.0]))
        tape.backward(loss)
        assert zv.grad[0] == 0.0
        assert float(loss.value) == 0.0


class TestTapeSemantics:
    def test_tape_reuse_raises(self):
        tape = Tape()
        x = tape.var(np.ones(3))
        out = dc.scale(x, 2.0)
        tape.backward(out, seed_grad=np.ones(3))
        with pytest.raises(dc.TapeConsumedError):
            tape.backward(out, seed_grad=np.ones(3))

    def test_shape_error_names_operator(self):
        tape = Tape()
        x = tape.var(np.ones((1, 2, 4, 4)))
        w = tape.var(np.ones((1, 3, 3, 3)))
        b = tape.var(np.zeros(1))
        with pytest.raises(dc.ShapeError, match="conv2d"):
            dc.conv2d(x, w, b)

    def test_release_consumes_tape(self):
        tape = Tape()
        out = dc.scale(tape.var(np.ones(3)), 2.0)
        tape.release()
        with pytest.raises(dc.TapeConsumedError):
            tape.backward(out, seed_grad=np.ones(3))

    def test_release_breaks_reference_cycles(self):
        # a forward-only graph must become reclaimable by refcounting alone
        # once released; without release the Var <-> record cycle keeps it
        # alive until a garbage-collection pass
        import gc
        import weakref

        tape = Tape()
        out = dc.relu(dc.scale(tape.var(np.ones((2, 2))), -1.0))
        ref = weakref.ref(tape)
        tape.release()
        del tape, out
        assert ref() is None

        tape = Tape()
        out = dc.relu(dc.scale(tape.var(np.ones((2, 2))), -1.0))
        ref = weakref.ref(tape)
        del tape, out
        assert ref() is not None  # the unreleased graph cycle pins it
        gc.collect()
        assert ref() is None

    def test_backward_linearity(self):
        # grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2)
        rng = np.random.default_rng(12)
        x0 = rng.normal(size=(3, 3))
        a, b = 0.7, -1.3

        def grads(coeff1, coeff2):
            tape = Tape()
            xv = tape.var(x0)
            l1 = dc.bce_with_logits(dc.sigmoid(xv), np.ones(9) * 0.5)
            l2 = dc.bce_with_logits(xv, np.zeros(9))
            total = dc.add(dc.scale(l1, coeff1), dc.scale(l2, coeff2))
            tape.backward(total)
            return xv.grad

        combined = grads(a, b)
        g1 = grads(1.0, 0.0)
        g2 = grads(0.0, 1.0)
        np.testing.assert_allclose(combined, a * g1 + b * g2, rtol=1e-12, atol=1e-15)

    def test_concat_backward_no_crosstalk(self):
        rng = np.random.default_rng(13)
        a = rng.normal(size=(1, 2, 2, 2))
        b = rng.normal(size=(1, 3, 2, 2))
        tape = Tape()
        av, bv = tape.var(a), tape.var(b)
        out = dc.concat_channels(av, bv)
        g = np.zeros(out.value.shape)
        g[:, :2] = 1.0  # mask: only the a-half receives gradient
        tape.backward(out, seed_grad=g)
        assert (av.grad == 1.0).all()
        assert (bv.grad == 0.0).all()

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(21)
            x = rng.normal(size=(2, 2, 8, 8))
            w = rng.normal(size=(3, 2, 3, 3))
            tape = Tape()
            wv = tape.var(w)
            out = dc.conv2d(tape.var(x), wv, tape.var(np.zeros(3)), stride=2)
            loss = dc.bce_with_logits(dc.global_avg_pool(out), np.zeros(6))
            tape.backward(loss)
            return out.value.tobytes(), wv.grad.tobytes()

        o1, g1 = run()
        o2, g2 = run()
        assert o1 == o2 and g1 == g2


class TestOptimizer:
    def test_sgd_update_rule(self):
        ps = ParamSet()
        ps.add("w", np.array([1.0]))
        opt = Optimizer(OptimizerConfig(kind="sgd", lr=0.1))
        opt.step(ps, {"w": np.array([0.5])})
        np.testing.assert_allclose(ps["w"].value, [0.95])

    def test_frozen_param_never_moves(self):
        ps = ParamSet()
        ps.add("frozen", np.array([2.0, 3.0]), trainable=False)
        ps.add("free", np.array([1.0]))
        before = ps["frozen"].value.tobytes()
        opt = Optimizer(OptimizerConfig(kind="adam", lr=0.5))
        for _ in range(10):
            opt.step(ps, {"frozen": np.array([9.0, 9.0]), "free": np.array([1.0])})
        assert ps["frozen"].value.tobytes() == before
        assert ps["free"].value[0] != 1.0

    def test_adam_first_step_hand_computed(self):
        # t=1, g=1: m_hat=1, v_hat=1 -> delta = -lr * 1/(1 + eps)
        lr, eps = 0.01, 1e-8
        ps = ParamSet()
        ps.add("w", np.array([0.0]))
        opt = Optimizer(OptimizerConfig(kind="adam", lr=lr, eps=eps))
        opt.step(ps, {"w": np.array([1.0])})
        expected = -lr * 1.0 / (1.0 + eps)
        np.testing.assert_allclose(ps["w"].value, [expected], rtol=1e-15)

    def test_missing_gradient_raises(self):
        ps = ParamSet()
        ps.add("w", np.array([1.0]))
        opt = Optimizer(OptimizerConfig(kind="sgd"))
        with pytest.raises(KeyError, match="w"):
            opt.step(ps, {})

    def test_frozen_flag_survives_many_steps_by_hash(self):
        rng = np.random.default_rng(31)
        ps = ParamSet()
        ps.add("a", rng.normal(size=(4, 4)), trainable=False)
        ps.add("b", rng.normal(size=(4,)))
        frozen_hash = ps.subset_hash(["a"])
        opt = Optimizer(OptimizerConfig(kind="adam", lr=0.1))
        for i in range(50):
            opt.step(ps, {"a": rng.normal(size=(4, 4)), "b": rng.normal(size=(4,))})
        assert ps.subset_hash(["a"]) == frozen_hash
