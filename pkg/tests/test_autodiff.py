"""Tests for the reverse-mode engine: forward values, adjoints, invariants."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossview import autodiff as ad
from crossview.errors import ConfigError, ContractError, NumericsError, ShapeError


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------

def erf_series(x: float, terms: int = 40) -> float:
    """Maclaurin series for erf, independent of scipy."""
    acc = 0.0
    for n in range(terms):
        acc += (-1) ** n * x ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return 2.0 / math.sqrt(math.pi) * acc


def depthwise_conv_loops(x, k):
    """Straight nested-loop depthwise conv, same padding, stride 1."""
    b, c, h, w = x.shape
    ksize = k.shape[1]
    pad = ksize // 2
    out = np.zeros_like(x)
    for bi in range(b):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for dy in range(ksize):
                        for dx in range(ksize):
                            ii, jj = i + dy - pad, j + dx - pad
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += k[ci, dy, dx] * x[bi, ci, ii, jj]
                    out[bi, ci, i, j] = acc
    return out


def maxpool_loops(x, ksize=3):
    """Straight nested-loop max pooling, same padding, stride 1."""
    b, c, h, w = x.shape
    pad = ksize // 2
    out = np.empty_like(x)
    for bi in range(b):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    best = -np.inf
                    for dy in range(ksize):
                        for dx in range(ksize):
                            ii, jj = i + dy - pad, j + dx - pad
                            if 0 <= ii < h and 0 <= jj < w:
                                best = max(best, x[bi, ci, ii, jj])
                    out[bi, ci, i, j] = best
    return out


def spaced_random(rng, shape, gap=0.01):
    """Random values with pairwise gaps >> fd step, to dodge max-pool ties."""
    n = int(np.prod(shape))
    vals = rng.permutation(4 * n)[:n] * gap
    return vals.reshape(shape)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

class TestMatmul:
    def test_identity(self, rng):
        a = rng.standard_normal((3, 3))
        out = ad.matmul(ad.Tensor(np.eye(3)), ad.Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_hand_arithmetic(self):
        out = ad.matmul(ad.Tensor([[1.0, 2.0], [3.0, 4.0]]), ad.Tensor([[0.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))

    def test_gradient_matches_central_differences(self, rng):
        b = ad.Tensor(rng.standard_normal((4, 5)))
        point = ad.Tensor(rng.standard_normal((3, 4)))
        err = ad.gradcheck(lambda t: ad.tensor_sum(ad.matmul(t, b)), point, step=1e-5)
        assert err <= 1e-8

    def test_leading_broadcast_adjoints(self, rng):
        a = ad.Tensor(rng.standard_normal((2, 3, 4, 5)))
        w = ad.Tensor(rng.standard_normal((5, 6)))
        err = ad.gradcheck(lambda t: ad.tensor_sum(ad.matmul(a, t)), w)
        assert err <= 1e-8


# ---------------------------------------------------------------------------
# softmax / logsumexp
# ---------------------------------------------------------------------------

class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax(ad.Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_forced_quarters(self):
        out = ad.softmax(ad.Tensor([0.0, math.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-15)

    def test_no_overflow_at_large_logits(self):
        out = ad.softmax(ad.Tensor([1000.0, 0.0]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-300)

    def test_nan_input_raises(self):
        with pytest.raises(NumericsError):
            ad.softmax(ad.Tensor([np.nan, 0.0]))

    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=2, max_size=8))
    @settings(max_examples=200, deadline=None)
    def test_rows_sum_to_one(self, row):
        out = ad.softmax(ad.Tensor([row]))
        assert abs(out.data.sum() - 1.0) <= 1e-12

    def test_gradcheck(self, rng):
        w = ad.Tensor(rng.standard_normal((3, 6)))
        point = ad.Tensor(rng.standard_normal((3, 6)))
        err = ad.gradcheck(lambda t: ad.tensor_sum(ad.mul(ad.softmax(t), w)), point)
        assert err <= 1e-6


class TestLogsumexp:
    def test_matches_direct_formula(self, rng):
        x = rng.standard_normal((4, 7))
        out = ad.logsumexp(ad.Tensor(x))
        np.testing.assert_allclose(out.data, np.log(np.exp(x).sum(-1)), atol=1e-12)

    def test_gradcheck(self, rng):
        w = ad.Tensor(rng.standard_normal(4))
        point = ad.Tensor(rng.standard_normal((4, 7)))
        err = ad.gradcheck(lambda t: ad.tensor_sum(ad.mul(ad.logsumexp(t), w)), point)
        assert err <= 1e-6


# ---------------------------------------------------------------------------
# gelu
# ---------------------------------------------------------------------------

class TestGelu:
    def test_zero(self):
        assert ad.gelu(ad.Tensor([0.0])).data[0] == 0.0

    def test_value_at_one_against_erf_series(self):
        expected = 1.0 * 0.5 * (1.0 + erf_series(1.0 / math.sqrt(2.0)))
        assert abs(expected - 0.8413447460685429) < 1e-12  # oracle self-check
        out = ad.gelu(ad.Tensor([1.0]))
        assert abs(out.data[0] - expected) <= 1e-12

    def test_asymptote(self):
        out = ad.gelu(ad.Tensor([20.0]))
        assert abs(out.data[0] - 20.0) < 1e-12

    def test_gradcheck(self, rng):
        point = ad.Tensor(rng.standard_normal(50))
        err = ad.gradcheck(lambda t: ad.tensor_sum(ad.gelu(t)), point)
        assert err <= 1e-6


# ---------------------------------------------------------------------------
# conv2d / maxpool2d
# ---------------------------------------------------------------------------

class TestConv2d:
    def test_depthwise_identity_kernel(self, rng):
        x = rng.standard_normal((2, 3, 6, 6))
        k = np.zeros((3, 3, 3))
        k[:, 1, 1] = 1.0
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(k), mode="depthwise_kxk")
        np.testing.assert_array_equal(out.data, x)

    def test_pointwise_identity(self, rng):
        x = rng.standard_normal((2, 4, 5, 5))
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(np.eye(4)), mode="pointwise_1x1",
                        bias=ad.Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x)

    def test_depthwise_matches_nested_loop_oracle(self, rng):
        x = rng.standard_normal((1, 1, 4, 4))
        k = rng.standard_normal((1, 3, 3))
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(k), mode="depthwise_kxk")
        np.testing.assert_allclose(out.data, depthwise_conv_loops(x, k), atol=1e-12)

    def test_separable_is_depthwise_then_pointwise(self, rng):
        x = rng.standard_normal((2, 4, 5, 5))
        k = rng.standard_normal((4, 3, 3))
        w = rng.standard_normal((2, 4))
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(k), mode="depthwise_separable_kxk",
                        pointwise_kernel=ad.Tensor(w))
        mid = depthwise_conv_loops(x, k)
        ref = np.einsum("oc,bchw->bohw", w, mid)
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    def test_even_kernel_rejected(self, rng):
        x = ad.Tensor(rng.standard_normal((1, 2, 4, 4)))
        with pytest.raises(ConfigError):
            ad.conv2d(x, ad.Tensor(np.zeros((2, 4, 4))), mode="depthwise_kxk")

    @pytest.mark.parametrize("ksize", [1, 3, 5, 7])
    def test_shape_preserved_for_odd_kernels(self, rng, ksize):
        x = ad.Tensor(rng.standard_normal((1, 2, 6, 9)))
        k = ad.Tensor(rng.standard_normal((2, ksize, ksize)))
        assert ad.depthwise_conv2d(x, k).shape == x.shape
        assert ad.maxpool2d(x, ksize).shape == x.shape

    def test_gradchecks(self, rng):
        x = ad.Tensor(rng.standard_normal((1, 2, 4, 4)))
        k = ad.Tensor(rng.standard_normal((2, 3, 3)))
        b = ad.Tensor(rng.standard_normal(2))
        w = ad.Tensor(rng.standard_normal((3, 2)))
        b_out = ad.Tensor(rng.standard_normal(3))
        assert ad.gradcheck(lambda t: ad.tensor_sum(ad.depthwise_conv2d(t, k, b)), x) <= 1e-6
        assert ad.gradcheck(lambda t: ad.tensor_sum(ad.depthwise_conv2d(x, t, b)), k) <= 1e-6
        assert ad.gradcheck(lambda t: ad.tensor_sum(ad.pointwise_conv2d(x, w, t)), b_out) <= 1e-6


class TestMaxpool2d:
    def test_constant_input(self):
        x = np.full((1, 2, 5, 5), 3.25)
        out = ad.maxpool2d(ad.Tensor(x))
        np.testing.assert_array_equal(out.data, x)

    def test_single_peak_dilates_one_cell(self):
        x = np.zeros((1, 1, 7, 7))
        x[0, 0, 3, 3] = 5.0
        out = ad.maxpool2d(ad.Tensor(x)).data
        expected = np.zeros_like(x)
        expected[0, 0, 2:5, 2:5] = 5.0
        np.testing.assert_array_equal(out, expected)

    def test_matches_nested_loop_oracle(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        out = ad.maxpool2d(ad.Tensor(x))
        np.testing.assert_array_equal(out.data, maxpool_loops(x))

    def test_tie_gradient_goes_to_first_argmax(self):
        # Two equal maxima in one window: row-major-first one gets the grad.
        x = ad.Tensor(np.array([[[[1.0, 1.0], [1.0, 1.0]]]]), grad_tracked=True)
        with ad.Tape() as tape:
            out = ad.maxpool2d(x, 3)
            loss = ad.tensor_sum(out)
        tape.backward(loss)
        # Every 3x3 window over the padded 2x2 sees the same constant block;
        # the first in-bounds position in scan order collects each cell's grad.
        assert x.grad.sum() == pytest.approx(4.0)
        assert x.grad[0, 0, 0, 0] == pytest.approx(4.0)

    def test_gradcheck_off_tie_points(self, rng):
        x = ad.Tensor(spaced_random(rng, (1, 2, 5, 5)))
        err = ad.gradcheck(lambda t: ad.tensor_sum(ad.maxpool2d(t)), x)
        assert err <= 1e-6


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

class TestDropout:
    def test_p_zero_is_identity(self, rng):
        x = ad.Tensor(rng.standard_normal((3, 4)))
        out = ad.dropout(x, 0.0, training=True, rng=np.random.default_rng(0))
        assert out is x

    def test_eval_mode_is_bit_identical(self, rng):
        x = ad.Tensor(rng.standard_normal((3, 4)))
        out = ad.dropout(x, 0.5, training=False)
        assert out is x

    def test_invalid_probability(self, rng):
        x = ad.Tensor(rng.standard_normal(3))
        with pytest.raises(ConfigError):
            ad.dropout(x, 1.0, training=True, rng=np.random.default_rng(0))

    def test_inverted_scaling_preserves_mean(self):
        x = ad.Tensor(np.ones(100_000))
        out = ad.dropout(x, 0.5, training=True, rng=np.random.default_rng(99))
        assert abs(out.data.mean() - 1.0) <= 0.02

    def test_gradcheck_with_frozen_mask(self, rng):
        point = ad.Tensor(rng.standard_normal((4, 5)))
        err = ad.gradcheck(
            lambda t: ad.tensor_sum(ad.dropout(t, 0.4, True, np.random.default_rng(7))),
            point,
        )
        assert err <= 1e-6


# ---------------------------------------------------------------------------
# remaining primitives
# ---------------------------------------------------------------------------

class TestLayoutAndNorms:
    def test_layer_norm_normalizes(self, rng):
        x = rng.standard_normal((3, 8))
        out = ad.layer_norm(ad.Tensor(x), ad.Tensor(np.ones(8)), ad.Tensor(np.zeros(8)))
        np.testing.assert_allclose(out.data.mean(-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.std(-1), 1.0, atol=1e-4)

    def test_l2_normalize_unit_norm(self, rng):
        out = ad.l2_normalize(ad.Tensor(rng.standard_normal((5, 9))))
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=-1), 1.0, atol=1e-12)

    def test_concat_roundtrip_gradients(self, rng):
        a = ad.Tensor(rng.standard_normal((2, 3)), grad_tracked=True)
        b = ad.Tensor(rng.standard_normal((2, 5)), grad_tracked=True)
        with ad.Tape() as tape:
            loss = ad.tensor_sum(ad.mul(ad.concat([a, b], axis=1), 2.0))
        tape.backward(loss)
        np.testing.assert_array_equal(a.grad, np.full((2, 3), 2.0))
        np.testing.assert_array_equal(b.grad, np.full((2, 5), 2.0))

    @pytest.mark.parametrize(
        "name,make",
        [
            ("add", lambda rng, w: lambda t: ad.tensor_sum(ad.mul(ad.add(t, 0.7), w))),
            ("sub", lambda rng, w: lambda t: ad.tensor_sum(ad.mul(ad.sub(1.2, t), w))),
            ("mul", lambda rng, w: lambda t: ad.tensor_sum(ad.mul(ad.mul(t, t), w))),
            ("transpose", lambda rng, w: lambda t: ad.tensor_sum(ad.mul(ad.transpose(t), ad.Tensor(w.data.T.copy())))),
            ("reshape", lambda rng, w: lambda t: ad.tensor_sum(ad.mul(ad.reshape(t, (6, 4)), ad.Tensor(w.data.reshape(6, 4)))),),
            ("layer_norm", lambda rng, w: (lambda gain, bias: lambda t: ad.tensor_sum(ad.mul(ad.layer_norm(t, gain, bias), w)))(ad.Tensor(rng.standard_normal(6)), ad.Tensor(rng.standard_normal(6)))),
            ("l2_normalize", lambda rng, w: lambda t: ad.tensor_sum(ad.mul(ad.l2_normalize(t), w))),
        ],
    )
    def test_primitive_gradchecks(self, rng, name, make):
        w = ad.Tensor(rng.standard_normal((4, 6)))
        fn = make(rng, w)
        err = ad.gradcheck(fn, ad.Tensor(rng.standard_normal((4, 6))))
        assert err <= 1e-6, f"{name}: {err}"


# ---------------------------------------------------------------------------
# tape / backward semantics
# ---------------------------------------------------------------------------

class TestBackward:
    def test_sum_gradient_is_ones(self, rng):
        x = ad.Tensor(rng.standard_normal((3, 4)), grad_tracked=True)
        with ad.Tape() as tape:
            loss = ad.tensor_sum(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_sum_of_squares_gradient(self, rng):
        x = ad.Tensor(rng.standard_normal(6), grad_tracked=True)
        with ad.Tape() as tape:
            loss = ad.tensor_sum(ad.mul(x, x))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-12)

    def test_non_scalar_loss_rejected(self, rng):
        x = ad.Tensor(rng.standard_normal(3), grad_tracked=True)
        with ad.Tape() as tape:
            y = ad.mul(x, 2.0)
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_untracked_leaves_get_no_gradient(self, rng):
        x = ad.Tensor(rng.standard_normal(4), grad_tracked=True)
        frozen = ad.Tensor(rng.standard_normal(4), grad_tracked=False)
        with ad.Tape() as tape:
            loss = ad.tensor_sum(ad.mul(x, frozen))
        tape.backward(loss)
        assert frozen.grad is None
        assert x.grad is not None

    def test_replay_accumulates_exactly_twice(self, rng):
        x = ad.Tensor(rng.standard_normal(5), grad_tracked=True)
        with ad.Tape() as tape:
            loss = ad.tensor_sum(ad.mul(x, x))
        tape.backward(loss)
        first = x.grad.copy()
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, 2 * first)

    def test_fanout_accumulates_within_one_pass(self, rng):
        x = ad.Tensor(rng.standard_normal(3), grad_tracked=True)
        with ad.Tape() as tape:
            y = ad.mul(x, 3.0)
            loss = ad.tensor_sum(ad.add(y, y))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, np.full(3, 6.0), atol=1e-12)

    def test_tape_topological_order(self, rng):
        x = ad.Tensor(rng.standard_normal(3), grad_tracked=True)
        with ad.Tape() as tape:
            y = ad.mul(x, 2.0)
            z = ad.add(y, x)
            ad.tensor_sum(z)
        produced = set()
        for entry in tape.entries:
            for inp in entry.inputs:
                if inp.grad_tracked and inp is not x:
                    assert id(inp) in produced, "input used before it was produced"
            produced.add(id(entry.output))


class TestGradcheckFacility:
    def test_linear_map(self, rng):
        # Well-scaled weights keep every gradient entry O(1), so the check
        # measures fd noise rather than cancellation on near-zero entries.
        w = ad.Tensor(0.5 + rng.random((6, 3)))
        err = ad.gradcheck(lambda t: ad.tensor_sum(ad.matmul(t, w)),
                           ad.Tensor(rng.standard_normal((2, 6))))
        assert err <= 1e-9

    def test_softmax_cross_entropy_toy(self, rng):
        def toy(x):
            return ad.tensor_mean(ad.sub(ad.logsumexp(x), ad.select_last(x, 0)))

        err = ad.gradcheck(toy, ad.Tensor(rng.standard_normal((5, 4))))
        assert err <= 1e-6

    def test_constant_function_reports_zero(self, rng):
        c = ad.Tensor([3.0])
        err = ad.gradcheck(lambda t: ad.tensor_sum(ad.mul(c, c)), ad.Tensor(rng.standard_normal(4)))
        assert err == 0.0

    def test_primitives_at_hundred_random_points(self, rng):
        """Each primitive's gradcheck over >=100 random coordinates stays <=1e-6."""
        cases = {
            "matmul": lambda t: ad.tensor_sum(ad.matmul(t, ad.Tensor(np.ones((10, 3))))),
            "gelu": lambda t: ad.tensor_sum(ad.gelu(t)),
            "softmax": lambda t: ad.tensor_sum(ad.mul(ad.softmax(t), ad.Tensor(np.arange(100, dtype=float).reshape(10, 10)))),
            "exp": lambda t: ad.tensor_sum(ad.exp(t)),
        }
        for name, fn in cases.items():
            pt = ad.Tensor(rng.standard_normal((10, 10)) * 0.5)
            err = ad.gradcheck(fn, pt)
            assert err <= 1e-6, f"{name}: {err}"
