import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stegsense.activations import ApamParams, abs_layer, apam_alpha, apam_forward, f_ap, tlu
from stegsense.tensor import DimensionError, Tensor, backward, finite_diff_check, relu, sum_

finite = st.floats(-50, 50, allow_nan=False)


def apam_oracle(x, p):
    """Plain numpy transcription of the two pooled branches and the excitation."""
    pos = np.maximum(x, 0).mean(axis=(2, 3))
    neg = np.minimum(x, 0).mean(axis=(2, 3))
    v = np.concatenate([pos, neg], axis=1)
    h = np.maximum(v @ p.w1.data + p.b1.data, 0)
    alpha = 1 / (1 + np.exp(-(h @ p.w2.data + p.b2.data)))
    return np.maximum(x, -alpha[:, :, None, None]), alpha


class TestTlu:
    @pytest.mark.parametrize("x,expect", [(5.0, 3.0), (-5.0, -3.0), (0.0, 0.0), (2.5, 2.5)])
    def test_branches(self, x, expect):
        assert tlu(Tensor([x]), 3.0).data[0] == expect

    @pytest.mark.parametrize("T", [0.0, -1.0])
    def test_threshold_must_be_positive(self, T):
        with pytest.raises(ValueError):
            tlu(Tensor([1.0]), T)

    @given(arrays(np.float64, st.integers(1, 50), elements=finite), st.floats(0.1, 10))
    def test_range(self, a, T):
        y = tlu(Tensor(a), T).data
        assert np.all(np.abs(y) <= T)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_away_from_threshold(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-6, 6, size=50)
        x = x[np.abs(np.abs(x) - 3) > 0.1]
        assert finite_diff_check(lambda t: sum_(tlu(t, 3.0)), Tensor(x)) < 1e-7


class TestAbs:
    def test_example(self):
        np.testing.assert_array_equal(abs_layer(Tensor([-2.0, 3.0])).data, [2.0, 3.0])

    @given(arrays(np.float64, st.integers(1, 50), elements=finite))
    def test_idempotent_and_non_negative(self, a):
        once = abs_layer(Tensor(a)).data
        assert np.all(once >= 0)
        np.testing.assert_array_equal(abs_layer(Tensor(once)).data, once)

    def test_gradient_away_from_zero(self, rng):
        x = rng.uniform(0.1, 3, size=20) * rng.choice([-1, 1], size=20)
        assert finite_diff_check(lambda t: sum_(abs_layer(t)), Tensor(x)) < 1e-7


class TestFap:
    def test_examples(self):
        alpha = Tensor([[1.0]])
        assert f_ap(Tensor(np.full((1, 1, 1, 1), 2.0)), alpha).data.item() == 2.0
        assert f_ap(Tensor(np.full((1, 1, 1, 1), -2.0)), alpha).data.item() == -1.0

    def test_zero_alpha_is_relu(self, rng):
        for _ in range(1000):
            x = Tensor(rng.normal(size=(2, 3, 2, 2)))
            np.testing.assert_array_equal(f_ap(x, Tensor(np.zeros((2, 3)))).data, relu(x).data)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            f_ap(Tensor(np.zeros((2, 3, 4, 4))), Tensor(np.zeros((3, 2))))

    @given(arrays(np.float64, (2, 2, 3, 3), elements=finite), arrays(np.float64, (2, 2), elements=st.floats(0, 1)),
           st.floats(0, 5))
    def test_monotone_in_x(self, x, a, shift):
        alpha = Tensor(a)
        lo = f_ap(Tensor(x), alpha).data
        hi = f_ap(Tensor(x + shift), alpha).data
        assert np.all(hi >= lo)
        assert np.all(lo >= -a.max())
        np.testing.assert_array_equal(lo[x > 0], x[x > 0])


class TestApam:
    def test_matches_numpy_oracle(self, rng):
        p = ApamParams.init(4, rng)
        x = rng.normal(size=(3, 4, 5, 5))
        y, alpha = apam_forward(Tensor(x), p)
        ey, ealpha = apam_oracle(x, p)
        np.testing.assert_allclose(alpha.data, ealpha, rtol=1e-13)
        np.testing.assert_allclose(y.data, ey, rtol=1e-13)

    def test_alpha_in_open_unit_interval(self, rng):
        p = ApamParams.init(8, rng)
        for _ in range(1000):
            alpha = apam_alpha(Tensor(rng.normal(scale=3.0, size=(2, 8, 3, 3))), p).data
            assert np.all((alpha > 0) & (alpha < 1))

    def test_zero_excitation_gives_one_half(self, rng):
        alpha = apam_alpha(Tensor(rng.normal(size=(4, 6, 3, 3))), ApamParams.zeros(6)).data
        assert np.all(alpha == 0.5)

    def test_positive_input_passes_through(self, rng):
        x = rng.uniform(0.1, 2.0, size=(2, 3, 4, 4))
        y, _ = apam_forward(Tensor(x), ApamParams.init(3, rng))
        np.testing.assert_array_equal(y.data, x)

    def test_duplicated_inputs_give_identical_alpha_rows(self, rng):
        x = rng.normal(size=(1, 5, 4, 4))
        _, alpha = apam_forward(Tensor(np.concatenate([x, x])), ApamParams.init(5, rng))
        np.testing.assert_array_equal(alpha.data[0], alpha.data[1])

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            apam_forward(Tensor(np.zeros((1, 3, 2, 2))), ApamParams.init(4, rng))

    @pytest.mark.parametrize("seed", range(4))
    def test_full_gradient_check(self, seed):
        rng = np.random.default_rng(seed)
        p = ApamParams.init(3, rng)
        # non-zero biases so the kink-skip rule does not hide them
        p.b1.data = rng.uniform(0.1, 0.5, size=3)
        p.b2.data = rng.uniform(-0.5, -0.1, size=3)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))

        def loss(t):
            y, _ = apam_forward(t, p)
            return sum_(y)

        assert finite_diff_check(loss, x) < 1e-4
        for param in p.tensors():
            assert finite_diff_check(lambda _: loss(x), param) < 1e-4

    def test_gradient_reaches_excitation(self, rng):
        p = ApamParams.init(3, rng)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        y, _ = apam_forward(x, p)
        backward(sum_(y))
        assert all(t.grad is not None and np.any(t.grad != 0) for t in (p.w2, p.b2))
