"""Tensor core: ops against independent oracles, tape backward against
central finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from quadra import tensor as T
from quadra.errors import DimensionError, InputError
from quadra.tensor import Tape, Tensor, backward


def t(arr, **kw):
    return Tensor._wrap(np.asarray(arr, dtype=np.float64), **kw)


def scalarize(y, r, tape):
    """Weighted sum to a (1,1) scalar so any graph can feed backward()."""
    h = T.hadamard(y, r, tape=tape)
    flat = T.reshape(h, (1, h.size), tape=tape)
    return T.rowsum(flat, tape=tape)


def tape_grads(build, inputs, seed=0):
    """Gradients of scalarize(build(inputs)) w.r.t. every input tensor."""
    tape = Tape(T.AUTO)
    y = build(tape, *inputs)
    r = t(np.random.default_rng(seed).normal(size=y.shape))
    loss = scalarize(y, r, tape)
    grads = backward(tape, loss, params=inputs)
    return {x.id: grads[x.id].data for x in inputs}, r


def fd_check(build, arrays, seed=0):
    """Compare tape gradients with finite differences for each input."""
    inputs = [t(a) for a in arrays]
    grads, r = tape_grads(build, inputs, seed)
    for i, x in enumerate(inputs):
        def f(perturbed, i=i):
            vals = [inp.data if j != i else perturbed
                    for j, inp in enumerate(inputs)]
            ts = [t(v) for v in vals]
            y = build(None, *ts)
            return float((y.data * r.data).sum())
        oracles.assert_fd_close(grads[x.id], oracles.fd_grad(f, x.data),
                                what=f"input {i}")


class TestTensorInvariants:
    def test_rejects_nan_inf(self):
        with pytest.raises(InputError):
            Tensor([1.0, np.nan])
        with pytest.raises(InputError):
            Tensor([np.inf])

    def test_rejects_zero_dim(self):
        with pytest.raises(DimensionError):
            Tensor(np.empty((2, 0)))

    def test_immutable(self):
        x = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            x.data[0] = 5.0

    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False,
                              width=64), min_size=1, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_shape_data_product(self, values):
        x = Tensor(values)
        assert int(np.prod(x.shape)) == len(values)

    def test_debug_checks_flag(self):
        from quadra.errors import NumericError
        huge = t([[1e200]])
        with np.errstate(over="ignore"):
            import warnings as _w
            with _w.catch_warnings():
                _w.simplefilter("ignore", RuntimeWarning)
                assert np.isinf(T.matmul(huge, huge).data).all()  # silent by default
        T.set_debug_checks(True)
        try:
            with pytest.raises(NumericError), np.errstate(over="ignore"):
                import warnings as _w
                with _w.catch_warnings():
                    _w.simplefilter("ignore", RuntimeWarning)
                    T.matmul(huge, huge)  # overflow flagged in debug mode
        finally:
            T.set_debug_checks(False)


class TestMatmul:
    def test_identity(self, rng):
        a = rng.normal(size=(3, 3))
        out = T.matmul(t(np.eye(3)), t(a))
        np.testing.assert_array_equal(out.data, np.eye(3) @ a)

    def test_annihilator(self, rng):
        a = rng.normal(size=(3, 4))
        out = T.matmul(t(np.zeros((2, 3))), t(a))
        assert (out.data == 0).all()

    def test_against_loop_oracle(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        out = T.matmul(t(a), t(b))
        assert oracles.rel_err(out.data, oracles.matmul_loops(a, b)) <= 1e-12

    def test_shape_mismatch_names_both(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(t(np.ones((2, 3))), t(np.ones((2, 2))))

    def test_fd(self, rng):
        fd_check(lambda tape, a, b: T.matmul(a, b, tape=tape),
                 [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])


class TestHadamard:
    def test_ones_identity(self, rng):
        a = rng.normal(size=(2, 3))
        np.testing.assert_array_equal(T.hadamard(t(a), t(np.ones((2, 3)))).data, a)

    def test_zeros(self, rng):
        a = rng.normal(size=(2, 3))
        assert (T.hadamard(t(a), t(np.zeros((2, 3)))).data == 0).all()

    def test_elementwise(self):
        out = T.hadamard(t([1.0, 2.0]), t([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [3.0, 8.0])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.hadamard(t(np.ones((2, 3))), t(np.ones((3, 2))))

    def test_fd(self, rng):
        fd_check(lambda tape, a, b: T.hadamard(a, b, tape=tape),
                 [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))])


class TestConv2d:
    def test_one_by_one_identity_kernel(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        w = np.ones((1, 2, 1, 1))
        out = T.conv2d(t(x), t(w), stride=1, pad=0)
        np.testing.assert_allclose(out.data[0, 0], x[0].sum(axis=0), atol=1e-14)

    def test_zero_kernel(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        out = T.conv2d(t(x), t(np.zeros((3, 2, 3, 3))), stride=1, pad=1)
        assert (out.data == 0).all()

    def test_against_loop_oracle(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        out = T.conv2d(t(x), t(w), stride=1, pad=0)
        ref = oracles.conv2d_loops(x, w, 1, 0)
        assert oracles.rel_err(out.data, ref) <= 1e-12

    def test_exhaustive_small_sweep(self, rng):
        for h in range(1, 9):
            for w_ in range(1, 9):
                for r in range(1, 4):
                    for stride in (1, 2):
                        for pad in (0, 1):
                            if r > h + 2 * pad or r > w_ + 2 * pad:
                                continue
                            x = rng.normal(size=(2, 2, h, w_))
                            k = rng.normal(size=(2, 2, r, r))
                            out = T.conv2d(t(x), t(k), stride, pad)
                            ref = oracles.conv2d_loops(x, k, stride, pad)
                            assert oracles.rel_err(out.data, ref) <= 1e-12, \
                                (h, w_, r, stride, pad)

    def test_kernel_too_large(self, rng):
        with pytest.raises(DimensionError):
            T.conv2d(t(np.ones((1, 1, 3, 3))), t(np.ones((1, 1, 5, 5))),
                     stride=1, pad=0)

    def test_fd(self, rng):
        fd_check(lambda tape, x, w: T.conv2d(x, w, 2, 1, tape=tape),
                 [rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))])

    def test_dwconv_against_loop_oracle(self, rng):
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(3, 3, 3))
        out = T.dwconv2d(t(x), t(w), stride=2, pad=1)
        ref = oracles.dwconv2d_loops(x, w, 2, 1)
        assert oracles.rel_err(out.data, ref) <= 1e-12

    def test_dwconv_fd(self, rng):
        fd_check(lambda tape, x, w: T.dwconv2d(x, w, 1, 1, tape=tape),
                 [rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(2, 3, 3))])


class TestBatchnorm:
    def test_constant_input_zero_output(self):
        x = t(np.full((8, 3), 2.5))
        out = T.batchnorm(x, t(np.ones(3), is_param=True),
                          t(np.zeros(3), is_param=True))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-10)

    def test_gamma_zero_gives_beta(self, rng):
        x = t(rng.normal(size=(6, 4)))
        beta = rng.normal(size=4)
        out = T.batchnorm(x, t(np.zeros(4), is_param=True),
                          t(beta, is_param=True))
        np.testing.assert_allclose(out.data, np.broadcast_to(beta, (6, 4)))

    def test_statistics_recompute(self, rng):
        x = t(rng.normal(2.0, 3.0, size=(64, 5)))
        out = T.batchnorm(x, t(np.ones(5), is_param=True),
                          t(np.zeros(5), is_param=True))
        assert np.abs(out.data.mean(axis=0)).max() <= 1e-10
        np.testing.assert_allclose(out.data.var(axis=0), 1.0, atol=1e-4)

    def test_conv_layout_statistics(self, rng):
        x = t(rng.normal(1.0, 2.0, size=(8, 3, 6, 6)))
        out = T.batchnorm(x, t(np.ones(3), is_param=True),
                          t(np.zeros(3), is_param=True))
        assert np.abs(out.data.mean(axis=(0, 2, 3))).max() <= 1e-10

    def test_running_stats_update_and_eval(self, rng):
        x = rng.normal(3.0, 2.0, size=(128, 4))
        rm, rv = np.zeros(4), np.ones(4)
        T.batchnorm(t(x), t(np.ones(4), is_param=True),
                    t(np.zeros(4), is_param=True), training=True,
                    running=(rm, rv), momentum=0.1)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0))
        y = T.batchnorm(t(x), t(np.ones(4), is_param=True),
                        t(np.zeros(4), is_param=True), training=False,
                        running=(rm, rv))
        expect = (x - rm) / np.sqrt(rv + 1e-5)
        np.testing.assert_allclose(y.data, expect)

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            T.batchnorm(t(np.ones((4, 3))), t(np.ones(2), is_param=True),
                        t(np.zeros(2), is_param=True))

    def test_fd(self, rng):
        def build(tape, x, gamma, beta):
            return T.batchnorm(x, gamma, beta, tape=tape)
        fd_check(build, [rng.normal(size=(6, 3)),
                         rng.uniform(0.5, 1.5, 3), rng.normal(size=3)])

    def test_fd_conv_layout(self, rng):
        def build(tape, x, gamma, beta):
            return T.batchnorm(x, gamma, beta, tape=tape)
        fd_check(build, [rng.normal(size=(3, 2, 3, 3)),
                         rng.uniform(0.5, 1.5, 2), rng.normal(size=2)])


class TestReluAndLoss:
    def test_relu_values(self):
        out = T.relu(t([-1.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 2.0])

    def test_uniform_logits_loss(self):
        logits = t(np.zeros((5, 7)))
        loss = T.softmax_cross_entropy(logits, np.arange(5) % 7)
        assert abs(float(loss.data) - np.log(7)) <= 1e-12

    def test_against_logsumexp_oracle(self, rng):
        logits = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, 6)
        loss = T.softmax_cross_entropy(t(logits), labels)
        ref = oracles.logsumexp_loss(logits, labels)
        assert abs(float(loss.data) - ref) <= 1e-12

    def test_label_out_of_range(self, rng):
        with pytest.raises(InputError):
            T.softmax_cross_entropy(t(np.zeros((2, 3))), np.array([0, 3]))
        with pytest.raises(InputError):
            T.softmax_cross_entropy(t(np.zeros((2, 3))), np.array([-1, 0]))

    def test_relu_fd(self, rng):
        # keep inputs away from the kink at zero
        x = rng.normal(size=(3, 4))
        x = np.where(np.abs(x) < 0.1, x + 0.25, x)
        fd_check(lambda tape, a: T.relu(a, tape=tape), [x])

    def test_loss_fd(self, rng):
        logits = rng.normal(size=(4, 5))
        labels = rng.integers(0, 5, 4)
        lt = t(logits)
        tape = Tape(T.AUTO)
        loss = T.softmax_cross_entropy(lt, labels, tape=tape)
        g = backward(tape, loss, params=[lt])[lt.id].data

        def f(arr):
            return float(T.softmax_cross_entropy(t(arr), labels).data)
        oracles.assert_fd_close(g, oracles.fd_grad(f, logits))


class TestBackward:
    def test_scalar_passthrough(self):
        x = t(np.array([[2.0]]))
        tape = Tape(T.AUTO)
        y = T.reshape(x, (1, 1), tape=tape)
        loss = T.rowsum(y, tape=tape)
        g = backward(tape, loss, params=[x])
        np.testing.assert_array_equal(g[x.id].data, [[1.0]])

    def test_constant_gets_zero_gradient(self, rng):
        x = t(rng.normal(size=(2, 2)))
        unused = t(rng.normal(size=(3, 3)), is_param=True)
        tape = Tape(T.AUTO)
        flat = T.reshape(x, (1, 4), tape=tape)
        loss = T.rowsum(flat, tape=tape)
        with pytest.warns(UserWarning, match="not reached"):
            g = backward(tape, loss, params=[x, unused])
        assert (g[unused.id].data == 0).all()

    def test_non_scalar_loss_rejected(self, rng):
        x = t(rng.normal(size=(2, 3)))
        tape = Tape(T.AUTO)
        y = T.relu(x, tape=tape)
        with pytest.raises(InputError, match="scalar"):
            backward(tape, y)

    def test_fanout_accumulates(self, rng):
        # y = x*x + x*x : gradient must be 4x
        x = t(rng.normal(size=(2, 2)))
        tape = Tape(T.AUTO)
        a = T.hadamard(x, x, tape=tape)
        b = T.hadamard(x, x, tape=tape)
        y = T.add(a, b, tape=tape)
        flat = T.reshape(y, (1, 4), tape=tape)
        loss = T.rowsum(flat, tape=tape)
        g = backward(tape, loss, params=[x])
        np.testing.assert_allclose(g[x.id].data, 4 * x.data, rtol=1e-12)

    def test_gradient_accumulation_linearity(self, rng):
        # backward of (f + g) equals backward(f) + backward(g)
        xa = rng.normal(size=(3, 3))
        wa = rng.normal(size=(3, 3))

        def run(mode):
            x = t(xa)
            w = t(wa, is_param=True)
            tape = Tape(T.AUTO)
            f = T.matmul(x, w, tape=tape)
            g2 = T.hadamard(x, x, tape=tape)
            if mode == "sum":
                y = T.add(f, g2, tape=tape)
            elif mode == "f":
                y = f
            else:
                y = g2
            r = t(np.ones_like(xa))
            loss = scalarize(y, r, tape)
            return backward(tape, loss, params=[x, w]), x, w

        gsum, _, _ = run("sum")
        gf, xf, wf = run("f")
        with pytest.warns(UserWarning, match="not reached"):
            gg, xg, wg = run("g")  # w is unused in the g-only graph
        for (s, a, b) in ((list(gsum.values())[0].data,
                           gf[xf.id].data, gg[xg.id].data),
                          (list(gsum.values())[1].data,
                           gf[wf.id].data, gg[wg.id].data)):
            np.testing.assert_allclose(s, a + b, atol=1e-12)

    def test_composite_graph_fd(self, rng):
        def build(tape, x, w1, w2, b):
            h = T.matmul(x, w1, tape=tape)
            h = T.bias_add(h, b, tape=tape)
            h = T.relu(h, tape=tape)
            h2 = T.hadamard(h, h, tape=tape)
            return T.matmul(h2, w2, tape=tape)
        fd_check(build, [rng.normal(size=(3, 4)) + 0.3,
                         rng.normal(size=(4, 5)),
                         rng.normal(size=(5, 2)),
                         rng.normal(size=5)])

    def test_bias_add_ch_fd(self, rng):
        fd_check(lambda tape, x, b: T.bias_add_ch(x, b, tape=tape),
                 [rng.normal(size=(2, 3, 3, 3)), rng.normal(size=3)])

    def test_replay_determinism(self, rng):
        def run():
            g = np.random.default_rng(99)
            x = t(g.normal(size=(4, 6)))
            w = t(g.normal(size=(6, 3)), is_param=True)
            tape = Tape(T.AUTO)
            h = T.matmul(x, w, tape=tape)
            r = t(np.ones((4, 3)))
            loss = scalarize(h, r, tape)
            grads = backward(tape, loss, params=[w])
            return h.data.copy(), grads[w.id].data.copy()
        y1, g1 = run()
        y2, g2 = run()
        assert (y1 == y2).all() and (g1 == g2).all()
