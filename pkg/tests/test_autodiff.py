import numpy as np
import pytest

from qfuse import autodiff as ad


def rng_for(name: str) -> np.random.Generator:
    return np.random.default_rng(abs(hash(name)) % (2**32))


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / denom)


def grad_of(build, x0: np.ndarray):
    """Autodiff gradient of a scalar-valued builder at x0."""
    tape = ad.Tape()
    x = tape.leaf(x0)
    loss = build(tape, x)
    grads = ad.backward(tape, loss)
    return grads.get(x)


def fd_of(build, x0: np.ndarray, eps=1e-5):
    def f(xv):
        tape = ad.Tape()
        x = tape.leaf(xv)
        return float(build(tape, x).data)
    return ad.finite_difference_grad(f, x0, eps)


class TestElementwise:
    def test_sigmoid_at_zero(self):
        t = ad.Tape()
        out = ad.sigmoid(t.leaf([0.0]))
        assert out.data[0] == 0.5

    def test_relu_definition(self):
        t = ad.Tape()
        out = ad.relu(t.leaf([-3.0, 3.0]))
        assert out.data.tolist() == [0.0, 3.0]

    def test_square_gradient_matches_fd(self):
        x0 = np.array([2.0])
        build = lambda tape, x: ad.reduce_sum(ad.square(x))
        g = grad_of(build, x0)
        assert abs(g[0] - 4.0) < 1e-6
        assert rel_err(g, fd_of(build, x0)) < 1e-6

    def test_scalar_broadcast_mul(self):
        t = ad.Tape()
        a = t.leaf([[1.0, 2.0], [3.0, 4.0]])
        s = t.leaf(2.0)
        out = ad.mul(a, s)
        loss = ad.reduce_sum(out)
        grads = ad.backward(t, loss)
        assert np.allclose(out.data, [[2, 4], [6, 8]])
        assert grads.get(s) == pytest.approx(10.0)

    def test_shape_mismatch_raises(self):
        t = ad.Tape()
        with pytest.raises(ValueError):
            ad.add(t.leaf([1.0, 2.0]), t.leaf([1.0, 2.0, 3.0]))

    def test_nonfinite_forward_raises(self):
        t = ad.Tape()
        big = t.leaf(np.full(3, 1e308))
        with np.errstate(over="ignore"), pytest.raises(ad.NonFiniteError):
            ad.square(big)

    def test_forward_elementwise_dispatch(self):
        t = ad.Tape()
        out = ad.forward_elementwise("relu", t.leaf([-1.0, 1.0]))
        assert out.data.tolist() == [0.0, 1.0]
        with pytest.raises(ValueError):
            ad.forward_elementwise("nope", t.leaf([0.0]))


class TestConv2d:
    def test_identity_1x1_kernel(self):
        t = ad.Tape()
        x = t.leaf(rng_for("conv-id").normal(size=(1, 1, 4, 4)))
        w = t.leaf(np.ones((1, 1, 1, 1)))
        out = ad.conv2d(x, w, stride=1)
        assert np.array_equal(out.data, x.data)

    def test_zero_weights_zero_output_and_grad(self):
        t = ad.Tape()
        x = t.leaf(rng_for("conv-zero").normal(size=(1, 2, 5, 5)))
        w = t.leaf(np.zeros((3, 2, 3, 3)))
        out = ad.conv2d(x, w, stride=1)
        assert np.all(out.data == 0.0)
        grads = ad.backward(t, ad.reduce_sum(out))
        assert np.all(grads.get(x) == 0.0)

    def test_weight_gradient_matches_fd(self):
        r = rng_for("conv-fd")
        x0 = r.uniform(-2, 2, size=(1, 2, 5, 5))
        w0 = r.uniform(-1, 1, size=(2, 2, 3, 3))
        u = r.normal(size=(1, 2, 5, 5))

        def loss_w(wv):
            t = ad.Tape()
            out = ad.conv2d(t.leaf(x0), t.leaf(wv), stride=1)
            return float((out.data * u).sum())

        t = ad.Tape()
        w = t.leaf(w0)
        out = ad.conv2d(t.leaf(x0), w, stride=1)
        loss = ad.reduce_sum(ad.mul(out, t.leaf(u)))
        g = ad.backward(t, loss).get(w)
        gfd = ad.finite_difference_grad(loss_w, w0)
        assert rel_err(g, gfd) < 1e-5

    @pytest.mark.parametrize("stride,hw", [(1, 6), (2, 6), (2, 5)])
    def test_input_gradient_matches_fd(self, stride, hw):
        r = rng_for(f"conv-x-{stride}-{hw}")
        x0 = r.uniform(-2, 2, size=(2, 2, hw, hw))
        w0 = r.uniform(-1, 1, size=(3, 2, 3, 3))

        def build(tape, x):
            return ad.reduce_sum(ad.square(ad.conv2d(x, tape.leaf(w0), stride=stride)))

        assert rel_err(grad_of(build, x0), fd_of(build, x0)) < 1e-5

    def test_stride2_output_shape(self):
        t = ad.Tape()
        out = ad.conv2d(t.leaf(np.zeros((1, 1, 32, 32))), t.leaf(np.zeros((4, 1, 3, 3))), stride=2)
        assert out.shape == (1, 4, 16, 16)

    def test_bad_kernel_rejected(self):
        t = ad.Tape()
        with pytest.raises(ValueError):
            ad.conv2d(t.leaf(np.zeros((1, 1, 4, 4))), t.leaf(np.zeros((1, 1, 2, 2))), stride=1)


class TestDense:
    def test_identity(self):
        t = ad.Tape()
        x = t.leaf([[1.0, 2.0], [3.0, 4.0]])
        out = ad.dense(x, t.leaf(np.eye(2)), t.leaf(np.zeros(2)))
        assert np.array_equal(out.data, x.data)

    def test_summation_row(self):
        t = ad.Tape()
        out = ad.dense(t.leaf([[3.0, 4.0]]), t.leaf([[1.0, 1.0]]), t.leaf([0.0]))
        assert out.data[0, 0] == 7.0

    def test_gradients_match_fd(self):
        r = rng_for("dense-fd")
        x0 = r.uniform(-2, 2, size=(3, 3))
        w0 = r.uniform(-1, 1, size=(2, 3))
        b0 = r.uniform(-1, 1, size=2)

        def loss_parts(xv, wv, bv):
            t = ad.Tape()
            out = ad.dense(t.leaf(xv), t.leaf(wv), t.leaf(bv))
            return ad.reduce_sum(ad.square(out)), t

        t = ad.Tape()
        x, w, b = t.leaf(x0), t.leaf(w0), t.leaf(b0)
        loss = ad.reduce_sum(ad.square(ad.dense(x, w, b)))
        grads = ad.backward(t, loss)
        for leaf, v0, pick in [(x, x0, 0), (w, w0, 1), (b, b0, 2)]:
            args = [x0, w0, b0]

            def f(vv, pick=pick):
                a = [x0, w0, b0]
                a[pick] = vv
                return float(loss_parts(*a)[0].data)

            assert rel_err(grads.get(leaf), ad.finite_difference_grad(f, v0)) < 1e-6


class TestConcat:
    def test_shape_arithmetic(self):
        t = ad.Tape()
        out = ad.concat_channels(t.leaf(np.zeros((1, 2, 4, 4))), t.leaf(np.zeros((1, 3, 4, 4))))
        assert out.shape == (1, 5, 4, 4)

    def test_ones_backward_splits(self):
        t = ad.Tape()
        a = t.leaf(rng_for("cc-a").normal(size=(1, 2, 3, 3)))
        b = t.leaf(rng_for("cc-b").normal(size=(1, 4, 3, 3)))
        out = ad.concat_channels(a, b)
        grads = ad.backward(t, ad.reduce_sum(out))
        assert np.all(grads.get(a) == 1.0)
        assert np.all(grads.get(b) == 1.0)

    def test_backward_equals_slicing(self):
        r = rng_for("cc-slice")
        u = r.normal(size=(2, 5, 4, 4))
        t = ad.Tape()
        a = t.leaf(r.normal(size=(2, 2, 4, 4)))
        b = t.leaf(r.normal(size=(2, 3, 4, 4)))
        out = ad.concat_channels(a, b)
        loss = ad.reduce_sum(ad.mul(out, t.leaf(u)))
        grads = ad.backward(t, loss)
        assert np.array_equal(grads.get(a), u[:, :2])
        assert np.array_equal(grads.get(b), u[:, 2:])

    def test_dim_mismatch(self):
        t = ad.Tape()
        with pytest.raises(ValueError):
            ad.concat_channels(t.leaf(np.zeros((1, 2, 4, 4))), t.leaf(np.zeros((1, 2, 5, 4))))


class TestReduceStats:
    def test_constant_input(self):
        t = ad.Tape()
        mean, var = ad.reduce_stats(t.leaf(np.full((3,), 2.5)))
        assert mean.data == pytest.approx(2.5)
        assert var.data == pytest.approx(0.0)

    def test_hand_case(self):
        t = ad.Tape()
        mean, var = ad.reduce_stats(t.leaf([1.0, 3.0]))
        assert mean.data == pytest.approx(2.0)
        assert var.data == pytest.approx(1.0)  # population variance

    def test_var_gradient_matches_fd(self):
        x0 = rng_for("stats-fd").uniform(-2, 2, size=(2, 5))

        def build(tape, x):
            _, var = ad.reduce_stats(x, axes=(1,))
            return ad.reduce_sum(var)

        assert rel_err(grad_of(build, x0), fd_of(build, x0)) < 1e-6

    def test_empty_axis_set_rejected(self):
        t = ad.Tape()
        with pytest.raises(ValueError):
            ad.reduce_stats(t.leaf([1.0, 2.0]), axes=())


class TestBackward:
    def test_sum_gives_ones(self):
        t = ad.Tape()
        x = t.leaf(rng_for("bw-sum").normal(size=(4, 3)))
        grads = ad.backward(t, ad.reduce_sum(x))
        assert np.all(grads.get(x) == 1.0)

    def test_zero_times_f_gives_zeros(self):
        t = ad.Tape()
        x = t.leaf(rng_for("bw-zero").normal(size=(5,)))
        loss = ad.scale(ad.reduce_sum(ad.square(x)), 0.0)
        grads = ad.backward(t, loss)
        assert np.all(grads.get(x) == 0.0)

    def test_unreached_nodes_read_zero(self):
        t = ad.Tape()
        x = t.leaf([1.0, 2.0])
        y = t.leaf([3.0, 4.0])  # never used by the loss
        loss = ad.reduce_sum(x)
        grads = ad.backward(t, loss)
        assert np.all(grads.get(y) == 0.0)

    def test_composite_matches_fd(self):
        r = rng_for("bw-composite")
        w1 = r.uniform(-1, 1, size=(3, 2, 3, 3))
        wd = r.uniform(-1, 1, size=(2, 3))
        bd = r.uniform(-0.5, 0.5, size=2)
        x0 = r.uniform(-2, 2, size=(2, 2, 4, 4))

        def build(tape, x):
            h = ad.relu(ad.conv2d(x, tape.leaf(w1), stride=1))
            pooled = ad.reduce_mean(h, axes=(2, 3))
            out = ad.dense(pooled, tape.leaf(wd), tape.leaf(bd))
            return ad.reduce_sum(ad.square(out))

        assert rel_err(grad_of(build, x0), fd_of(build, x0)) < 1e-5

    def test_non_scalar_loss_rejected(self):
        t = ad.Tape()
        x = t.leaf([1.0, 2.0])
        with pytest.raises(ValueError):
            ad.backward(t, x)

    def test_backward_linear_in_upstream(self):
        r = rng_for("bw-linear")
        t = ad.Tape()
        x = t.leaf(r.normal(size=(3, 3)))
        loss = ad.reduce_sum(ad.square(ad.sigmoid(x)))
        g1 = ad.backward(t, loss, seed=1.0).get(x)
        g2 = ad.backward(t, loss, seed=2.0).get(x)
        assert np.array_equal(g2, 2.0 * g1)


class TestSoftmaxNll:
    def test_softmax_rows_sum_to_one(self):
        t = ad.Tape()
        p = ad.softmax(t.leaf(rng_for("sm").normal(size=(4, 5))))
        assert np.allclose(p.data.sum(axis=1), 1.0, atol=1e-12)

    def test_softmax_gradient_matches_fd(self):
        z0 = rng_for("sm-fd").uniform(-2, 2, size=(2, 4))
        u = rng_for("sm-u").normal(size=(2, 4))

        def build(tape, z):
            return ad.reduce_sum(ad.mul(ad.softmax(z), tape.leaf(u)))

        assert rel_err(grad_of(build, z0), fd_of(build, z0)) < 1e-6

    def test_nll_gradient_matches_fd(self):
        z0 = rng_for("nll-fd").uniform(-1, 1, size=(3, 4))
        labels = np.array([0, 2, 1])

        def build(tape, z):
            return ad.nll_mean(ad.softmax(z), labels)

        assert rel_err(grad_of(build, z0), fd_of(build, z0)) < 1e-6

    def test_nll_rejects_unnormalized(self):
        t = ad.Tape()
        with pytest.raises(ValueError):
            ad.nll_mean(t.leaf([[0.5, 0.2]]), np.array([0]))


class TestUpsample:
    def test_forward_repeats(self):
        t = ad.Tape()
        x = t.leaf([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = ad.upsample_nearest2x(x)
        assert out.shape == (1, 1, 4, 4)
        assert out.data[0, 0, 0, 1] == 1.0
        assert out.data[0, 0, 3, 3] == 4.0

    def test_gradient_matches_fd(self):
        x0 = rng_for("up-fd").uniform(-2, 2, size=(1, 2, 3, 3))

        def build(tape, x):
            return ad.reduce_sum(ad.square(ad.upsample_nearest2x(x)))

        assert rel_err(grad_of(build, x0), fd_of(build, x0)) < 1e-6


class TestFiniteDifferenceOracle:
    def test_sum_gives_ones(self):
        g = ad.finite_difference_grad(lambda x: float(x.sum()), np.array([1.0, -4.0, 2.0]))
        assert np.allclose(g, 1.0, atol=1e-9)

    def test_square_at_three(self):
        g = ad.finite_difference_grad(lambda x: float((x ** 2).sum()), np.array([3.0]))
        assert abs(g[0] - 6.0) < 1e-8

    def test_agrees_with_autodiff_on_random_mlp(self):
        r = rng_for("fd-mlp")
        w1 = r.uniform(-1, 1, size=(4, 3))
        b1 = r.uniform(-1, 1, size=4)
        w2 = r.uniform(-1, 1, size=(1, 4))
        b2 = r.uniform(-1, 1, size=1)
        x0 = r.uniform(-2, 2, size=(2, 3))

        def build(tape, x):
            h = ad.sigmoid(ad.dense(x, tape.leaf(w1), tape.leaf(b1)))
            return ad.reduce_sum(ad.dense(h, tape.leaf(w2), tape.leaf(b2)))

        assert rel_err(grad_of(build, x0), fd_of(build, x0)) < 1e-5

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            ad.finite_difference_grad(lambda x: 0.0, np.array([1.0]), eps=0.0)


class TestDeterminism:
    def test_identical_seed_bit_identical_gradients(self):
        def run():
            r = np.random.default_rng(1234)
            t = ad.Tape()
            x = t.leaf(r.uniform(-2, 2, size=(2, 3, 8, 8)))
            w = t.leaf(r.uniform(-1, 1, size=(4, 3, 3, 3)))
            out = ad.relu(ad.conv2d(x, w, stride=1))
            loss = ad.reduce_sum(ad.square(out))
            grads = ad.backward(t, loss)
            return loss.data.copy(), grads.get(x).copy(), grads.get(w).copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert np.array_equal(l1, l2)
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gw1, gw2)


class TestParameterBinding:
    def test_bind_memoizes_and_accumulates(self):
        p = ad.Parameter("w", np.array([2.0]))
        t = ad.Tape()
        w1 = t.bind(p)
        w2 = t.bind(p)
        assert w1 is w2
        loss = ad.reduce_sum(ad.add(ad.square(w1), ad.scale(w2, 3.0)))
        grads = ad.backward(t, loss)
        assert grads.for_param(p)[0] == pytest.approx(2 * 2.0 + 3.0)

    def test_unbound_param_reads_zero(self):
        p = ad.Parameter("w", np.ones(3))
        t = ad.Tape()
        x = t.leaf([1.0])
        grads = ad.backward(t, ad.reduce_sum(x))
        assert np.all(grads.for_param(p) == 0.0)

    def test_projection(self):
        p = ad.Parameter("s", np.array(-1.0), project=lambda v: np.maximum(v, 1e-8))
        p.apply_projection()
        assert p.value == 1e-8
