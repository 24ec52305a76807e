import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gdcan import autodiff as ad
from gdcan.autodiff import ShapeError, Tape, Tensor, grad_check, no_grad, parameter


def finite(shape, lo=-3.0, hi=3.0):
    return arrays(np.float64, shape, elements=st.floats(lo, hi, allow_nan=False, width=64))


class TestConv2d:
    def test_single_pixel(self):
        out = ad.conv2d(Tensor([[[[2.0]]]]), Tensor([[[[3.0]]]]), Tensor([1.0]))
        assert out.data.tolist() == [[[[7.0]]]]

    def test_sum_of_entries(self):
        x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = ad.conv2d(x, Tensor(np.ones((1, 1, 2, 2))), Tensor([0.0]))
        assert out.data.tolist() == [[[[10.0]]]]

    @pytest.mark.parametrize(
        "hw,k,stride,pad,expected",
        [((8, 8), 3, 1, 1, (8, 8)), ((8, 8), 3, 2, 1, (4, 4)), ((7, 5), 3, 2, 0, (3, 2)), ((5, 5), 5, 1, 0, (1, 1))],
    )
    def test_output_extent(self, hw, k, stride, pad, expected):
        x = Tensor(np.zeros((1, 2, *hw)))
        out = ad.conv2d(x, Tensor(np.zeros((3, 2, k, k))), stride=stride, pad=pad)
        assert out.shape == (1, 3, *expected)

    def test_matches_direct_loops(self):
        rng = np.random.default_rng(3)
        x, W, b = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        out = ad.conv2d(Tensor(x), Tensor(W), Tensor(b), stride=2, pad=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for n in range(2):
            for o in range(4):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        ref[n, o, i, j] = (xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * W[o]).sum() + b[o]
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_input_gradient_finite_differences(self):
        rng = np.random.default_rng(0)
        x = parameter(rng.normal(size=(2, 3, 8, 8)))
        W = Tensor(rng.normal(size=(4, 3, 3, 3)))
        report = grad_check(lambda: ad.conv2d(x, W, pad=1).sum(), x)
        assert report.passed and report.max_rel_error <= 1e-4


class TestLinear:
    def test_identity(self):
        out = ad.linear(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
        assert out.data.tolist() == [[1.0, 2.0]]

    def test_row_sum(self):
        out = ad.linear(Tensor([[1.0, 1.0]]), Tensor([[2.0, 3.0]]), Tensor([1.0]))
        assert out.data.tolist() == [[6.0]]

    def test_inner_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            ad.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        x, W, b = parameter(rng.normal(size=(5, 7))), parameter(rng.normal(size=(4, 7))), parameter(rng.normal(size=4))
        w = rng.normal(size=(5, 4))
        assert grad_check(lambda: (ad.linear(x, W, b) * w).sum(), [x, W, b]).passed


class TestActivation:
    def test_sigmoid_zero(self):
        assert ad.activation(Tensor(0.0), "sigmoid").item() == 0.5

    def test_relu(self):
        assert ad.activation(Tensor([-1.0, 2.0]), "relu").data.tolist() == [0.0, 2.0]

    def test_tanh_two(self):
        assert ad.activation(Tensor(2.0), "tanh").item() == pytest.approx(0.9640276, abs=5e-8)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ad.activation(Tensor(1.0), "gelu")

    def test_sigmoid_is_stable_for_large_inputs(self):
        out = ad.sigmoid(Tensor([-800.0, 800.0])).data
        assert out.tolist() == [0.0, 1.0]

    def test_relu_subgradient_at_zero(self):
        x = parameter([0.0])
        ad.relu(x).sum().backward()
        assert x.grad.tolist() == [0.0]


class TestGradCheck:
    def test_polynomial(self):
        x = parameter([1.0, 2.0, 3.0])
        f = lambda: (x * x).sum()
        out = f()
        out.backward()
        assert x.grad.tolist() == [2.0, 4.0, 6.0]
        assert grad_check(f, x, tol=1e-6).passed

    def test_relu_kink_flagged(self):
        x = parameter([0.0, 1.5])
        report = grad_check(lambda: ad.relu(x).sum(), x)
        assert report.passed
        assert report.kinks == [(0, 0)]
        assert report.n_checked == 1

    def test_non_scalar_rejected(self):
        x = parameter([1.0, 2.0])
        with pytest.raises(ShapeError):
            grad_check(lambda: x * 2.0, x)

    def test_bad_step(self):
        x = parameter([1.0])
        with pytest.raises(ValueError):
            grad_check(lambda: x.sum(), x, step=0.0)

    def test_detects_wrong_gradient(self):
        x = parameter([0.3, -0.7])

        def broken():
            # forward is x^2, backward claims 3x
            return Tensor._make(x.data**2, "sq", (x,), lambda g: (g * 3 * x.data,)).sum()

        report = grad_check(broken, x)
        assert not report.passed
        assert report.max_rel_error == pytest.approx(1 / 3, rel=1e-6)

    def test_absolute_floor(self):
        # both gradients below the floor count as agreement
        assert ad.rel_error(np.array(1e-12), np.array(0.0)) == pytest.approx(1e-4)


SMOOTH_UNARY = ["exp", "sigmoid", "tanh"]


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name", SMOOTH_UNARY)
    @settings(max_examples=15, deadline=None)
    @given(x=finite((3, 2)))
    def test_unary(self, name, x):
        p = parameter(x)
        w = np.linspace(-1, 1, 6).reshape(3, 2)
        assert grad_check(lambda: (getattr(ad, name)(p) * w).sum(), p).passed

    @settings(max_examples=15, deadline=None)
    @given(x=finite((2, 3), 0.1, 4.0))
    def test_log_sqrt_xlogx(self, x):
        p = parameter(x)
        f = lambda: ad.log(p).sum() + ad.sqrt(p).sum() * 0.5 + ad.xlogx(p).sum()
        assert grad_check(f, p).passed

    @settings(max_examples=15, deadline=None)
    @given(x=finite((3, 4)), b=finite((1, 4), 0.5, 3.0))
    def test_broadcast_arithmetic(self, x, b):
        a, c = parameter(x), parameter(b)
        w = np.arange(12.0).reshape(3, 4) / 10
        f = lambda: ((a + c) * w).sum() + ((a - c) * (a * c)).sum() + (a / c).sum()
        assert grad_check(f, [a, c]).passed

    @settings(max_examples=15, deadline=None)
    @given(x=finite((3, 5)))
    def test_log_softmax(self, x):
        p = parameter(x)
        w = np.random.default_rng(5).normal(size=(3, 5))
        assert grad_check(lambda: (ad.log_softmax(p, axis=1) * w).sum(), p).passed

    def test_exact_zero_gradient_needs_a_looser_floor(self):
        # evenly spaced weights on zero logits give one coordinate with a true
        # gradient of exactly 0; the h^2 truncation term then exceeds the 1e-8 floor
        p = parameter(np.zeros((1, 5)))
        w = np.linspace(0, 1, 5)[None]
        f = lambda: (ad.log_softmax(p, axis=1) * w).sum()
        assert not grad_check(f, p).passed
        assert grad_check(f, p, floor=1e-6).passed

    def test_take_accumulates_repeated_rows(self):
        x = parameter(np.zeros((3, 2)))
        ad.take(x, np.array([1, 1, 2])).sum().backward()
        assert x.grad.tolist() == [[0.0, 0.0], [2.0, 2.0], [1.0, 1.0]]

    def test_concat_routes_gradient(self):
        a, b = parameter(np.ones((1, 2))), parameter(np.ones((2, 2)))
        out = ad.concat([a, b], axis=0)
        (out * Tensor([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])).sum().backward()
        assert a.grad.tolist() == [[1.0, 1.0]]
        assert b.grad.tolist() == [[2.0, 2.0], [3.0, 3.0]]

    def test_xlogx_zero(self):
        assert ad.xlogx(Tensor([0.0, 1.0])).data.tolist() == [0.0, 0.0]


class TestTape:
    def test_topological_order(self):
        a, b = parameter(1.0), parameter(2.0)
        c = a * b
        d = c + a
        e = d * c
        tape = Tape.from_output(e)
        pos = {id(t): i for i, t in enumerate(tape.outputs)}
        for node, out in zip(tape.nodes, tape.outputs):
            for parent in node.inputs:
                if id(parent) in pos:
                    assert pos[id(parent)] < pos[id(out)]

    def test_each_node_once(self):
        x = parameter(2.0)
        y = x * x
        z = y + y + y  # y reused three times
        tape = Tape.from_output(z)
        assert len(tape.nodes) == len({id(n) for n in tape.nodes}) == 3
        z.backward()
        assert x.grad == pytest.approx(12.0)

    def test_every_reachable_leaf_gets_grad(self):
        rng = np.random.default_rng(0)
        ps = [parameter(rng.normal(size=(2, 2))) for _ in range(3)]
        out = ((ps[0] @ ps[1]) * ps[2]).sum()
        out.backward()
        for p in ps:
            assert p.grad is not None and p.grad.shape == p.shape

    def test_no_grad_records_nothing(self):
        x = parameter([1.0])
        with no_grad():
            y = x * 2.0
        assert y.tape_node is None and not y.requires_grad

    def test_detach_cuts_graph(self):
        x = parameter([1.0, 2.0])
        y = (x.detach() * x).sum()
        y.backward()
        assert x.grad.tolist() == [1.0, 2.0]

    def test_deep_chain(self):
        x = parameter(1.0)
        y = x
        for _ in range(5000):
            y = y + 0.0
        y.backward()
        assert x.grad == 1.0


class TestTapeProperties:
    @settings(max_examples=25, deadline=None)
    @given(x=finite((4,)), a=st.floats(-3, 3), b=st.floats(-3, 3))
    def test_linearity(self, x, a, b):
        def grad_of(fn):
            p = parameter(x)
            fn(p).backward()
            return p.grad

        f = lambda p: ad.tanh(p).sum()
        g = lambda p: (p * p * p).sum()
        combined = grad_of(lambda p: f(p) * a + g(p) * b)
        np.testing.assert_allclose(combined, a * grad_of(f) + b * grad_of(g), rtol=1e-10, atol=1e-10)

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_forward_determinism(self, seed):
        rng = np.random.default_rng(seed)
        x, W = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3))
        run = lambda: ad.softmax(ad.conv2d(Tensor(x), Tensor(W), pad=1).mean(axis=(2, 3)), axis=1).data
        assert run().tobytes() == run().tobytes()

    @settings(max_examples=25, deadline=None)
    @given(x=finite((3, 4)))
    def test_grad_shape_matches_data(self, x):
        p = parameter(x)
        (ad.softmax(p, axis=0) * ad.sigmoid(p)).sum().backward()
        assert p.grad.shape == p.shape
        assert p.data.size == int(np.prod(p.shape))
