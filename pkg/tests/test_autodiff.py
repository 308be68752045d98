import numpy as np
import pytest

import mmsr.autodiff as ad
from mmsr.autodiff import (
    Graph,
    NumericError,
    ShapeError,
    Tensor,
    active_graph,
    gradcheck,
)
from mmsr.layers import ParamSet

from oracles import conv2d_loops, conv_transpose2d_loops


def t4(rows, requires_grad=False):
    """Wrap a 2-d list as a (1, 1, H, W) tensor."""
    return Tensor(np.asarray(rows, dtype=np.float64)[None, None], requires_grad=requires_grad)


def rand4(rng, shape, lo=0.1, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


def pset(**tensors):
    ps = ParamSet()
    for name, t in tensors.items():
        ps.add(name, t)
    return ps


class TestElementwise:
    def test_add_values(self):
        out = ad.add(t4([[1, 2]]), t4([[3, 4]]))
        assert np.array_equal(out.data, np.array([[4.0, 6.0]])[None, None])

    def test_add_identity(self):
        rng = np.random.default_rng(0)
        x = Tensor(rand4(rng, (2, 3, 4, 5)))
        out = ad.add(x, ad.zeros_like(x))
        assert np.array_equal(out.data, x.data)

    def test_add_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(1, 1, 1, 2\).*\(1, 1, 2, 1\)"):
            ad.add(t4([[1, 2]]), t4([[1], [2]]))

    def test_mul_identity(self):
        rng = np.random.default_rng(1)
        x = Tensor(rand4(rng, (1, 2, 3, 3)))
        out = ad.mul_elementwise(x, ad.ones_like(x))
        assert np.array_equal(out.data, x.data)

    def test_mul_values(self):
        out = ad.mul_elementwise(t4([[2, 3]]), t4([[0.5, 0.5]]))
        assert np.allclose(out.data[0, 0], [[1.0, 1.5]])

    def test_relu_values(self):
        out = ad.relu(t4([[-1, 0, 2]]))
        assert np.array_equal(out.data[0, 0], [[0.0, 0.0, 2.0]])

    def test_relu_all_negative_zero_grad(self):
        x = Tensor(-np.ones((1, 1, 2, 2)), requires_grad=True)
        with Graph() as g:
            out = ad.sum_all(ad.relu(x))
            g.backward(out)
        assert np.array_equal(x.grad, np.zeros_like(x.data))

    def test_sigmoid_at_zero(self):
        out = ad.sigmoid(ad.zeros((1, 1, 1, 1)))
        assert out.data.reshape(()) == 0.5

    def test_sigmoid_symmetry(self):
        rng = np.random.default_rng(2)
        x = rng.normal(0, 3, size=(2, 3, 5, 5))
        a = ad.sigmoid(Tensor(x)).data
        b = 1.0 - ad.sigmoid(Tensor(-x)).data
        assert np.max(np.abs(a - b)) < 1e-12

    def test_sigmoid_strictly_inside_unit_interval(self):
        x = Tensor(np.array([[-1e3, -5.0, 0.0, 5.0, 1e3]])[None, None])
        y = ad.sigmoid(x).data
        assert np.all(y > 0.0) and np.all(y < 1.0)

    def test_no_nan_inf_on_large_finite_inputs(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.uniform(-1e3, 1e3, size=(1, 2, 4, 4)))
        y = Tensor(rng.uniform(-1e3, 1e3, size=(1, 2, 4, 4)))
        for op in (ad.add, ad.sub, ad.mul_elementwise):
            op(x, y)
        for op in (ad.relu, ad.sigmoid, ad.absolute, ad.sum_all):
            op(x)

    def test_nonfinite_input_rejected(self):
        with pytest.raises(NumericError):
            Tensor(np.array([[[[np.nan]]]]))


class TestConcat:
    def test_concat_channel_counts(self):
        rng = np.random.default_rng(4)
        a = Tensor(rand4(rng, (1, 64, 6, 7)))
        b = Tensor(rand4(rng, (1, 64, 6, 7)))
        out = ad.concat_channels([a, b])
        assert out.shape == (1, 128, 6, 7)

    def test_concat_single_part_identity(self):
        rng = np.random.default_rng(5)
        a = Tensor(rand4(rng, (2, 3, 4, 4)))
        out = ad.concat_channels([a])
        assert np.array_equal(out.data, a.data)

    def test_concat_split_round_trip_bit_exact(self):
        rng = np.random.default_rng(6)
        parts = [Tensor(rand4(rng, (2, c, 5, 5))) for c in (1, 3, 2)]
        out = ad.concat_channels(parts)
        back = ad.split_channels(out, [1, 3, 2])
        for p, q in zip(parts, back):
            assert np.array_equal(p.data, q.data)

    def test_concat_empty_rejected(self):
        with pytest.raises(ShapeError):
            ad.concat_channels([])

    def test_concat_spatial_mismatch_rejected(self):
        a = Tensor(np.zeros((1, 2, 4, 4)))
        b = Tensor(np.zeros((1, 2, 5, 4)))
        with pytest.raises(ShapeError):
            ad.concat_channels([a, b])

    def test_concat_backward_slices_gradient(self):
        rng = np.random.default_rng(7)
        a = Tensor(rand4(rng, (1, 2, 3, 3)), requires_grad=True)
        b = Tensor(rand4(rng, (1, 3, 3, 3)), requires_grad=True)
        w = Tensor(rand4(rng, (1, 5, 3, 3)))
        with Graph() as g:
            out = ad.sum_all(ad.mul_elementwise(ad.concat_channels([a, b]), w))
            g.backward(out)
        # re-concatenating the per-part gradients must reproduce the full one
        full = np.concatenate([a.grad, b.grad], axis=1)
        assert np.array_equal(full, w.data)


class TestConv:
    def test_box_filter_case(self):
        x = Tensor(np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, w, padding=0)
        assert out.shape == (1, 1, 3, 3)
        # each output is the local 3x3 sum
        expected = np.array(
            [[x.data[0, 0, i : i + 3, j : j + 3].sum() for j in range(3)] for i in range(3)]
        )
        assert np.allclose(out.data[0, 0], expected)

    def test_output_size_arithmetic(self):
        rng = np.random.default_rng(8)
        x = Tensor(rand4(rng, (1, 1, 10, 10)))
        w = Tensor(rand4(rng, (2, 1, 5, 5)))
        assert ad.conv2d(x, w, padding=0).shape == (1, 2, 6, 6)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        got = ad.conv2d(
            Tensor(x), Tensor(w), Tensor(b.reshape(1, 4, 1, 1)), padding=0
        ).data
        want = conv2d_loops(x, w, b, padding=0)
        assert np.max(np.abs(got - want)) < 1e-10

    def test_matches_loop_oracle_with_padding(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 2, 6, 7))
        w = rng.normal(size=(3, 2, 3, 3))
        got = ad.conv2d(Tensor(x), Tensor(w), padding=1).data
        want = conv2d_loops(x, w, padding=1)
        assert got.shape == (1, 3, 6, 7)
        assert np.max(np.abs(got - want)) < 1e-10

    def test_channel_mismatch_rejected(self):
        x = Tensor(np.zeros((1, 2, 5, 5)))
        w = Tensor(np.zeros((1, 3, 3, 3)))
        with pytest.raises(ShapeError, match="channels"):
            ad.conv2d(x, w)

    def test_kernel_exceeding_input_rejected(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        w = Tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ShapeError):
            ad.conv2d(x, w, padding=0)

    def test_transpose_delta_response(self):
        rng = np.random.default_rng(11)
        w = rng.normal(size=(1, 1, 3, 3))
        b = np.array([0.25])
        x = Tensor(np.ones((1, 1, 1, 1)))
        out = ad.conv_transpose2d(x, Tensor(w), Tensor(b.reshape(1, 1, 1, 1)))
        assert np.allclose(out.data[0, 0], w[0, 0] + 0.25)

    def test_transpose_matches_loop_oracle(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 3, 5, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=2)
        got = ad.conv_transpose2d(
            Tensor(x), Tensor(w), Tensor(b.reshape(1, 2, 1, 1))
        ).data
        want = conv_transpose2d_loops(x, w, b)
        assert np.max(np.abs(got - want)) < 1e-10

    @pytest.mark.parametrize("k", [1, 3, 5, 7])
    def test_shape_restoration(self, k):
        rng = np.random.default_rng(13)
        for h, w_ in [(k, k), (k + 1, k + 3), (12, 9), (16, 16)]:
            x = Tensor(rng.normal(size=(1, 2, h, w_)))
            wc = Tensor(rng.normal(size=(3, 2, k, k)) * 0.1)
            wd = Tensor(rng.normal(size=(3, 2, k, k)) * 0.1)
            y = ad.conv_transpose2d(ad.conv2d(x, wc, padding=0), wd)
            assert y.shape == (1, 2, h, w_)

    def test_adjoint_identity(self):
        rng = np.random.default_rng(14)
        for k in (1, 3, 5):
            x = rng.normal(size=(2, 3, 7, 7))
            w = rng.normal(size=(4, 3, k, k))
            y = rng.normal(size=(2, 4, 7 - k + 1, 7 - k + 1))
            lhs = float((ad.conv2d(Tensor(x), Tensor(w)).data * y).sum())
            rhs = float((ad.conv_transpose2d(Tensor(y), Tensor(w)).data * x).sum())
            assert abs(lhs - rhs) < 1e-10


class TestGradients:
    """Analytic gradients of each op against central differences."""

    def _check(self, build, tensors, tol=1e-6, step=1e-5):
        params = pset(**tensors)
        report = gradcheck(build, params, step=step, tolerance=tol)
        assert report.passed, report.lines()

    def test_add_gradcheck(self):
        rng = np.random.default_rng(20)
        a = Tensor(rand4(rng, (1, 2, 4, 4)), requires_grad=True)
        b = Tensor(rand4(rng, (1, 2, 4, 4)), requires_grad=True)
        m = Tensor(rand4(rng, (1, 2, 4, 4)))
        self._check(lambda p: ad.sum_all(ad.mul_elementwise(ad.add(p["a"], p["b"]), m)),
                    dict(a=a, b=b))

    def test_mul_gradcheck(self):
        rng = np.random.default_rng(21)
        a = Tensor(rand4(rng, (1, 2, 4, 4)), requires_grad=True)
        b = Tensor(rand4(rng, (1, 2, 4, 4)), requires_grad=True)
        self._check(lambda p: ad.sum_all(ad.mul_elementwise(p["a"], p["b"])), dict(a=a, b=b))

    def test_relu_gradcheck_away_from_kink(self):
        rng = np.random.default_rng(22)
        d = rng.uniform(0.1, 1.0, size=(1, 2, 4, 4)) * rng.choice([-1.0, 1.0], size=(1, 2, 4, 4))
        assert np.min(np.abs(d)) >= 1e-3
        x = Tensor(d, requires_grad=True)
        m = Tensor(rand4(rng, (1, 2, 4, 4)))
        self._check(lambda p: ad.sum_all(ad.mul_elementwise(ad.relu(p["x"]), m)), dict(x=x))

    def test_sigmoid_gradcheck(self):
        rng = np.random.default_rng(23)
        x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        self._check(lambda p: ad.sum_all(ad.sigmoid(p["x"])), dict(x=x), tol=1e-5)

    def test_concat_gradcheck(self):
        rng = np.random.default_rng(24)
        a = Tensor(rand4(rng, (1, 2, 3, 3)), requires_grad=True)
        b = Tensor(rand4(rng, (1, 1, 3, 3)), requires_grad=True)
        m = Tensor(rand4(rng, (1, 3, 3, 3)))
        self._check(
            lambda p: ad.sum_all(ad.mul_elementwise(ad.concat_channels([p["a"], p["b"]]), m)),
            dict(a=a, b=b),
        )

    def test_conv2d_gradcheck(self):
        rng = np.random.default_rng(25)
        x = Tensor(rand4(rng, (2, 2, 6, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.3, requires_grad=True)
        b = Tensor(rng.normal(size=(1, 3, 1, 1)) * 0.3, requires_grad=True)
        m = Tensor(rand4(rng, (2, 3, 4, 4)))
        self._check(
            lambda p: ad.sum_all(
                ad.mul_elementwise(ad.conv2d(p["x"], p["w"], p["b"], padding=0), m)
            ),
            dict(x=x, w=w, b=b),
            tol=1e-4,
        )

    def test_conv_transpose2d_gradcheck(self):
        rng = np.random.default_rng(26)
        x = Tensor(rand4(rng, (1, 3, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.3, requires_grad=True)
        b = Tensor(rng.normal(size=(1, 2, 1, 1)) * 0.3, requires_grad=True)
        m = Tensor(rand4(rng, (1, 2, 6, 6)))
        self._check(
            lambda p: ad.sum_all(
                ad.mul_elementwise(ad.conv_transpose2d(p["x"], p["w"], p["b"]), m)
            ),
            dict(x=x, w=w, b=b),
            tol=1e-4,
        )

    def test_absolute_and_sub_gradcheck(self):
        rng = np.random.default_rng(27)
        a = Tensor(rand4(rng, (1, 1, 4, 4)), requires_grad=True)
        b = Tensor(rand4(rng, (1, 1, 4, 4)) + 2.0)  # keep a - b bounded away from 0
        self._check(lambda p: ad.sum_all(ad.absolute(ad.sub(p["a"], b))), dict(a=a))


class TestGradcheckHarness:
    def test_sum_sigmoid_passes(self):
        rng = np.random.default_rng(30)
        x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        report = gradcheck(lambda p: ad.sum_all(ad.sigmoid(p["x"])), pset(x=x), tolerance=1e-5)
        assert report.passed

    def test_corrupted_backward_detected(self):
        def crooked_identity(x):
            # forward is the identity, backward deliberately off by 1%
            out = Tensor(x.data.copy(), requires_grad=x.requires_grad)
            g = active_graph()
            if g is not None and x.requires_grad:

                def backward():
                    if out.grad is not None:
                        x.accumulate_grad(out.grad * 1.01)

                g.record(backward)
            return out

        rng = np.random.default_rng(31)
        x = Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
        report = gradcheck(
            lambda p: ad.sum_all(ad.sigmoid(crooked_identity(p["x"]))),
            pset(x=x),
            tolerance=1e-4,
        )
        assert not report.passed

    def test_sampled_entries_respect_cap(self):
        rng = np.random.default_rng(32)
        x = Tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)
        report = gradcheck(
            lambda p: ad.sum_all(ad.sigmoid(p["x"])),
            pset(x=x),
            max_entries_per_param=5,
        )
        assert report.entries_checked == 5
        assert report.passed

    def test_non_scalar_objective_rejected(self):
        x = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            gradcheck(lambda p: ad.relu(p["x"]), pset(x=x))


class TestGraph:
    def test_backward_outside_graph_records_nothing(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        y = ad.relu(x)
        assert y.requires_grad
        assert active_graph() is None

    def test_node_count_tracks_ops(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Graph() as g:
            ad.sum_all(ad.relu(ad.scale(x, 2.0)))
        assert len(g) == 3

    def test_grad_accumulates_across_reuse(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Graph() as g:
            out = ad.sum_all(ad.add(x, x))
            g.backward(out)
        assert np.array_equal(x.grad, 2.0 * np.ones_like(x.data))
