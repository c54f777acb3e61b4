import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from nblpcfg import autodiff as ad

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


class TestLeaf:
    def test_construction(self):
        x = ad.leaf(np.array([1.0, 2.0]))
        np.testing.assert_array_equal(x.value, [1.0, 2.0])
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_empty_leaf_backward_is_noop(self):
        x = ad.leaf(np.zeros(0))
        ad.backward(ad.sum_all(x))
        assert x.grad.shape == (0,)

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            ad.leaf(np.array([1.0, np.nan]))

    def test_neg_inf_accepted(self):
        x = ad.leaf(np.array([0.0, -np.inf]))
        assert np.isneginf(x.value[1])


class TestForwardOps:
    def test_matmul_identity(self):
        out = ad.matmul(ad.constant(np.eye(2)), ad.constant([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.value, [[3.0], [4.0]])

    def test_relu(self):
        np.testing.assert_array_equal(ad.relu(ad.constant([-1.0, 0.0, 2.0])).value, [0, 0, 2])

    def test_gather_rows(self):
        table = np.arange(6.0).reshape(3, 2)
        out = ad.gather_rows(ad.constant(table), [2, 0])
        np.testing.assert_array_equal(out.value, [[4, 5], [0, 1]])

    def test_concat(self):
        out = ad.concat([ad.constant(np.ones((2, 1))), ad.constant(np.zeros((2, 2)))], axis=1)
        np.testing.assert_array_equal(out.value, [[1, 0, 0], [1, 0, 0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)|\(2, 3\)"):
            ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))
        with pytest.raises(ad.ShapeError, match=r"\(2,\).*\(3,\)"):
            ad.add(ad.constant(np.ones(2)), ad.constant(np.ones(3)))


class TestReductions:
    def test_logsumexp_closed_form(self):
        out = ad.logsumexp(ad.constant([0.0, np.log(3.0)]), axis=0)
        np.testing.assert_allclose(out.value, np.log(4.0), rtol=1e-14)

    def test_log_softmax_symmetry(self):
        np.testing.assert_allclose(ad.log_softmax(ad.constant([0.0, 0.0])).value, [-np.log(2)] * 2)

    def test_log_softmax_normalizes(self):
        out = ad.log_softmax(ad.constant([5.0, 5.0, 5.0]))
        assert abs(np.exp(out.value).sum() - 1) <= 1e-12

    def test_all_neg_inf_slice_rejected(self):
        with pytest.raises(ValueError):
            ad.logsumexp(ad.constant([[-np.inf, -np.inf], [0.0, 1.0]]), axis=1)

    def test_allow_empty_gives_neg_inf(self):
        out = ad.logsumexp(ad.constant([[-np.inf, -np.inf], [0.0, 0.0]]), axis=1, allow_empty=True)
        assert np.isneginf(out.value[0])
        np.testing.assert_allclose(out.value[1], np.log(2))

    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=finite))
    def test_log_softmax_rows_sum_to_one(self, x):
        out = ad.log_softmax(ad.constant(x), axis=1)
        np.testing.assert_allclose(np.exp(out.value).sum(axis=1), 1.0, atol=1e-12)

    @given(hnp.arrays(np.float64, st.integers(1, 6), elements=finite))
    def test_logsumexp_shift_stability(self, x):
        c = 1e4
        base = ad.logsumexp(ad.constant(x), axis=0).value
        shifted = ad.logsumexp(ad.constant(x + c), axis=0).value - c
        np.testing.assert_allclose(shifted, base, atol=1e-9)


class TestBackward:
    def test_logsumexp_gradient_equal_inputs(self):
        x = ad.leaf(np.zeros(2))
        ad.backward(ad.logsumexp(x, axis=0))
        np.testing.assert_allclose(x.grad, [0.5, 0.5])

    def test_matmul_gradient_matches_formula_and_finite_differences(self):
        rng = np.random.default_rng(0)
        a0, b0 = rng.standard_normal((2, 2)), rng.standard_normal((2, 2))
        col = rng.standard_normal((2, 1))
        upstream = np.ones((2, 1)) @ col.T
        a, b = ad.leaf(a0), ad.leaf(b0)
        ad.backward(ad.sum_all(ad.matmul(ad.matmul(a, b), ad.constant(col))))
        np.testing.assert_allclose(a.grad, upstream @ b0.T, rtol=1e-12)
        report = ad.finite_diff_check(
            lambda xs: ad.sum_all(ad.matmul(ad.matmul(xs[0], xs[1]), ad.constant(col))),
            [a0, b0], step=1e-5, tol=1e-6)
        assert report["ok"], report["max_rel_err"]

    def test_fan_out_accumulates(self):
        x = ad.leaf(np.array([1.0, 2.0]))
        ad.backward(ad.sum_all(ad.add(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ValueError):
            ad.backward(ad.leaf(np.ones(2)))

    def test_constants_keep_zero_grad(self):
        x, c = ad.leaf(np.ones(3)), ad.constant(np.full(3, 2.0))
        ad.backward(ad.sum_all(ad.relu(ad.add(x, c))))
        np.testing.assert_array_equal(c.grad, 0.0)
        np.testing.assert_array_equal(x.grad, 1.0)


class TestFiniteDiffCheck:
    def test_sum_of_squares(self):
        def f(xs):
            return ad.matmul(ad.reshape(xs[0], (1, 2)), ad.reshape(xs[0], (2, 1)))

        report = ad.finite_diff_check(lambda xs: ad.sum_all(f(xs)), [np.array([1.0, 2.0])], tol=1e-6)
        assert report["ok"]
        np.testing.assert_allclose([r[2] for r in report["records"]], [2.0, 4.0])

    def test_constant_function(self):
        report = ad.finite_diff_check(lambda xs: ad.sum_all(ad.constant(np.ones(2))), [np.array([1.0, 2.0])])
        assert report["ok"]
        assert report["max_rel_err"] == 0.0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 6))
    def test_random_graphs(self, seed, depth):
        rng = np.random.default_rng(seed)
        ops = rng.integers(0, 6, size=depth)
        w = rng.standard_normal((3, 3))

        def f(xs):
            h = xs[0]
            for op in ops:
                if op == 0:
                    h = ad.matmul(ad.constant(w), h)
                elif op == 1:
                    h = ad.add(ad.relu(h), ad.scale(h, 0.5))
                elif op == 2:
                    h = ad.log_softmax(h, axis=0)
                elif op == 3:
                    top = ad.reshape(ad.logsumexp(h, axis=0), (1, 2))
                    h = ad.concat([top, ad.getitem(h, (slice(1, None),))], axis=0)
                elif op == 4:
                    h = ad.logaddexp(h, xs[1])
                else:
                    h = ad.matmul(ad.matmul(h, ad.transpose(xs[1])), xs[1])
            return ad.sum_all(h)

        report = ad.finite_diff_check(f, [rng.standard_normal((3, 2)), rng.standard_normal((3, 2))])
        assert report["ok"], report["max_rel_err"]


class TestLogEinsum:
    @pytest.mark.parametrize("exact", [True, False])
    def test_matches_dense_reference(self, exact):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
        a[0, 1, 2] = -np.inf
        ref = np.log(np.einsum("ijk,kl->il", np.exp(a), np.exp(b)))
        out = ad.log_einsum("ijk,kl->il", ad.constant(a), ad.constant(b), exact=exact)
        np.testing.assert_allclose(out.value, ref, rtol=1e-12)

    @pytest.mark.parametrize("exact", [True, False])
    def test_gradient(self, exact):
        rng = np.random.default_rng(2)
        pts = [rng.standard_normal((2, 3)), rng.standard_normal((3, 4)), rng.standard_normal((4,))]
        report = ad.finite_diff_check(
            lambda xs: ad.sum_all(ad.log_einsum("ij,jk,k->ik", *xs, exact=exact)), pts, tol=1e-6)
        assert report["ok"], report["max_rel_err"]

    def test_dead_output_is_neg_inf_with_finite_gradient(self):
        a = ad.leaf(np.array([[-np.inf, -np.inf], [0.0, 1.0]]))
        out = ad.log_einsum("ij,j->i", a, ad.constant(np.zeros(2)), exact=True)
        assert np.isneginf(out.value[0])
        ad.backward(ad.sum_all(ad.getitem(out, (slice(1, 2),))))
        assert np.all(np.isfinite(a.grad))


class TestCheckpoint:
    def test_matches_direct_graph(self):
        rng = np.random.default_rng(3)
        x0, y0 = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))

        def fn(x, y):
            return ad.log_softmax(ad.matmul(ad.relu(x), y), axis=1)

        grads = []
        for use_ckpt in (False, True):
            x, y = ad.leaf(x0), ad.leaf(y0)
            out = ad.checkpoint(fn, x, y) if use_ckpt else fn(x, y)
            ad.backward(ad.sum_all(ad.matmul(out, ad.constant(np.arange(6.0).reshape(2, 3)))))
            grads.append((out.value, x.grad.copy(), y.grad.copy()))
        for a, b in zip(*grads):
            np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_captured_leaf_rejected(self):
        hidden = ad.leaf(np.ones(2))
        x = ad.leaf(np.ones(2))
        with pytest.raises(ValueError):
            ad.checkpoint(lambda v: ad.add(v, hidden), x)


class TestLogWindowSum:
    def setup(self, seed, neg_inf=False):
        rng = np.random.default_rng(seed)
        a = [rng.standard_normal((2, 5, 4, 3)) * 5 for _ in range(3)]
        b = [rng.standard_normal((2, 5, 3)) * 5 for _ in range(3)]
        if neg_inf:
            a[0][:, :, 1] = -np.inf
            b[1][0] = -np.inf
        offsets = [(0, 1), (1, 0), (2, 2)]
        return a, b, offsets

    def naive(self, a, b, offsets, n):
        parts = [a[t][:, s:s + n] + b[t][:, r:r + n, None, :] for t, (s, r) in enumerate(offsets)]
        return np.logaddexp.reduce(np.stack(parts), axis=0)

    def build(self, a, b, offsets, n):
        terms = [(an, ad.shifted_exp(an.value, axis=2), s, bn, r) for an, bn, (s, r) in zip(a, b, offsets)]
        return ad.log_window_sum(terms, n)

    @pytest.mark.parametrize("neg_inf", [False, True])
    def test_value(self, neg_inf):
        a, b, offsets = self.setup(0, neg_inf)
        out = self.build([ad.constant(x) for x in a], [ad.constant(x) for x in b], offsets, 3)
        np.testing.assert_allclose(out.value, self.naive(a, b, offsets, 3), atol=1e-12)

    def test_large_offsets(self):
        a, b, offsets = self.setup(1)
        a = [x - 600.0 * k for k, x in enumerate(a)]
        out = self.build([ad.constant(x) for x in a], [ad.constant(x) for x in b], offsets, 3)
        np.testing.assert_allclose(out.value, self.naive(a, b, offsets, 3), atol=1e-12)
        assert np.all(np.isfinite(out.value))

    def test_gradient(self):
        a, b, offsets = self.setup(2)

        def f(xs):
            return ad.sum_all(self.build(xs[:3], xs[3:], offsets, 3))

        report = ad.finite_diff_check(f, a + b)
        assert report["ok"], report["max_rel_err"]

    def test_empty_slices_get_zero_gradient(self):
        a, b, offsets = self.setup(3, neg_inf=True)
        a[1][:] = -np.inf
        a[2][:] = -np.inf
        leaves = [ad.leaf(x) for x in a + b]
        out = self.build(leaves[:3], leaves[3:], offsets, 3)
        ad.backward(ad.sum_all(ad.getitem(out, (1,))))
        for leaf in leaves:
            assert np.all(np.isfinite(leaf.grad))
