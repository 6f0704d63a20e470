import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stegsense.filterbank import (
    CTR, FilterBank, build_seed_bank, compute_residuals, derive_masks, export_filters, format_filters, project,
    read_filters,
)
from stegsense.tensor import Tensor, conv2d, no_grad, ordered_reductions, pad2d

SEED, CLASSES = build_seed_bank()
MASKS = derive_masks(SEED)


def offcenter_sum(w):
    w = w.reshape(5, 5).copy()
    w[CTR, CTR] = 0.0
    return math.fsum(w.ravel().tolist())


def naive_project(w, mask, seed):
    """Straight transcription of the four projection steps, for comparison."""
    w = w.reshape(5, 5) * mask
    w[CTR, CTR] = 0.0
    s = w.sum()
    if abs(s) >= 1e-8:
        w = w / s
    else:
        w = seed.astype(float).copy()
        w[CTR, CTR] = 0.0
        w = w / w.sum()
    w[CTR, CTR] = -1.0
    return w


class TestSeedBank:
    def test_class_counts(self):
        counts = {c: CLASSES.count(c) for c in set(CLASSES)}
        assert counts == {"first_order": 8, "second_order": 4, "third_order": 8, "edge3": 4,
                          "square3": 1, "edge5": 4, "square5": 1}
        assert SEED.shape == (30, 5, 5)

    def test_every_kernel_sums_to_zero(self):
        np.testing.assert_array_equal(SEED.sum(axis=(1, 2)), np.zeros(30))

    def test_immutable(self):
        with pytest.raises(ValueError):
            SEED[0, 0, 0] = 1.0

    def test_second_order_vertical(self):
        k = SEED[8]
        np.testing.assert_array_equal(k[1:4, CTR], [1, -2, 1])
        assert np.count_nonzero(k) == 3

    def test_kv_row_sums_are_zero(self):
        kv = SEED[29]
        np.testing.assert_array_equal(kv.sum(axis=1), np.zeros(5))
        assert kv[CTR, CTR] == -12

    def test_first_order_rotation_cycle(self):
        k = SEED[0]
        np.testing.assert_array_equal(np.rot90(k, 4), k)
        # a quarter turn of "up" is another first-order direction
        assert any(np.array_equal(np.rot90(k, -1), SEED[i]) for i in range(8))

    @pytest.mark.parametrize("start", [0, 8, 12, 20, 25])
    def test_family_members_are_distinct(self, start):
        fam = [SEED[i] for i in range(30) if CLASSES[i] == CLASSES[start]]
        assert len({f.tobytes() for f in fam}) == len(fam)


class TestMasks:
    def test_class_b_mask(self):
        m = MASKS[8]
        assert m.sum() == 3 and np.all(m[1:4, CTR] == 1)

    def test_kv_mask_is_dense(self):
        np.testing.assert_array_equal(MASKS[29], np.ones((5, 5)))

    def test_first_order_mask_has_two_ones(self):
        assert all(MASKS[i].sum() == 2 for i in range(8))

    def test_center_always_in_support(self):
        assert np.all(MASKS[:, CTR, CTR] == 1)


class TestProjection:
    def test_class_b_example(self):
        out, _ = project(SEED.astype(float).reshape(30, 1, 5, 5), MASKS, SEED)
        np.testing.assert_array_equal(out[8, 0, 1:4, CTR], [0.5, -1.0, 0.5])

    def test_kv_example(self):
        out, _ = project(SEED.astype(float).reshape(30, 1, 5, 5), MASKS, SEED)
        expect = SEED[29] / 12.0
        expect[CTR, CTR] = -1.0
        np.testing.assert_allclose(out[29, 0], expect, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_naive_transcription(self, seed):
        w = np.random.default_rng(seed).normal(size=(30, 1, 5, 5))
        out, resets = project(w, MASKS, SEED)
        assert resets == 0
        for k in range(30):
            np.testing.assert_allclose(out[k, 0], naive_project(w[k], MASKS[k], SEED[k]), rtol=1e-13, atol=1e-13)

    @pytest.mark.parametrize("constraint", ["ours", "direction", "none"])
    def test_invariants_and_idempotence(self, rng, constraint):
        w = rng.normal(size=(30, 1, 5, 5))
        once, _ = project(w, MASKS, SEED, constraint)
        twice, _ = project(once, MASKS, SEED, constraint)
        assert once.tobytes() == twice.tobytes()
        assert np.all(once[:, 0, CTR, CTR] == -1.0)
        for k in range(30):
            assert abs(offcenter_sum(once[k]) - 1.0) <= 1e-9
            if constraint != "none":
                assert np.all(once[k, 0][MASKS[k] == 0] == 0.0)

    def test_direction_keeps_seed_signs(self, rng):
        out, _ = project(rng.normal(size=(30, 1, 5, 5)), MASKS, SEED, "direction")
        for k in range(30):
            w = out[k, 0].copy()
            w[CTR, CTR] = 0.0
            nz = w != 0
            assert np.all(np.sign(w[nz]) == np.sign(SEED[k][nz]))

    def test_degenerate_sum_resets_to_seed(self):
        w = np.zeros((30, 1, 5, 5))
        out, resets = project(w, MASKS, SEED)
        assert resets == 30
        ref, _ = project(SEED.astype(float).reshape(30, 1, 5, 5), MASKS, SEED)
        np.testing.assert_array_equal(out, ref)

    def test_unknown_constraint(self):
        with pytest.raises(ValueError):
            project(np.zeros((30, 1, 5, 5)), MASKS, SEED, "tight")

    @given(arrays(np.float64, (30, 1, 5, 5), elements=st.floats(-1e3, 1e3)))
    def test_idempotent_on_arbitrary_kernels(self, w):
        once, _ = project(w, MASKS, SEED)
        twice, _ = project(once, MASKS, SEED)
        assert once.tobytes() == twice.tobytes()
        assert np.all(once * (1 - MASKS[:, None]) == 0)


class TestFilterBank:
    def test_from_seed_is_projected(self):
        bank = FilterBank.from_seed()
        again, _ = project(bank.kernels.data, bank.masks, bank.seed)
        assert again.tobytes() == bank.kernels.data.tobytes()
        assert bank.kernels.requires_grad

    def test_supports_never_grow(self, rng):
        bank = FilterBank.from_seed()
        for _ in range(20):
            bank.kernels.data = bank.kernels.data + rng.normal(size=bank.kernels.shape)
            bank.project_()
        support = bank.kernels.data[:, 0] != 0
        assert np.all(support <= (MASKS != 0))
        assert bank.projections == 20


class TestResiduals:
    @pytest.mark.parametrize("level", [0.0, 1.0, 137.0, 255.0])
    def test_constant_image_has_zero_response(self, level):
        bank = FilterBank.from_seed()
        with no_grad():
            r = compute_residuals(Tensor(np.full((1, 1, 12, 12), level)), bank).data
        assert np.all(r == 0.0)

    def test_matches_plain_convolution(self, rng):
        bank = FilterBank.from_seed()
        bank.kernels.data = bank.kernels.data + rng.normal(size=bank.kernels.shape)
        bank.project_()
        img = rng.integers(0, 256, size=(2, 1, 10, 9)).astype(float)
        with no_grad(), ordered_reductions():
            plain = conv2d(pad2d(Tensor(img), 2, mode="edge"), bank.kernels).data
        with no_grad():
            r = compute_residuals(Tensor(img), bank).data
        np.testing.assert_allclose(r, plain, rtol=0, atol=1e-10)

    def test_impulse_response_is_flipped_kernel(self):
        bank = FilterBank.from_seed()
        img = np.zeros((1, 1, 11, 11))
        img[0, 0, 5, 5] = 1.0
        with no_grad():
            r = compute_residuals(Tensor(img), bank).data[0]
        for k in range(30):
            # the center tap is evaluated as -(sum of off-center taps): exact to one rounding
            np.testing.assert_allclose(r[k, 3:8, 3:8], bank.kernels.data[k, 0, ::-1, ::-1], rtol=0, atol=1e-15)

    def test_ramp_second_order_horizontal(self):
        bank = FilterBank.from_seed()
        img = np.tile(np.arange(16.0) * 3.0, (16, 1))[None, None]
        with no_grad():
            r = compute_residuals(Tensor(img), bank).data[0]
        horizontal = 9  # second-order kernel along (0, 1)
        np.testing.assert_array_equal(bank.kernels.data[horizontal, 0, CTR, 1:4], [0.5, -1.0, 0.5])
        assert np.abs(r[horizontal, 2:-2, 2:-2]).max() < 1e-12

    def test_output_keeps_spatial_size(self):
        with no_grad():
            r = compute_residuals(Tensor(np.ones((2, 1, 9, 7))), FilterBank.from_seed())
        assert r.shape == (2, 30, 9, 7)


class TestExport:
    def test_round_trip_is_exact(self, tmp_path, rng):
        bank = FilterBank.from_seed()
        bank.kernels.data = bank.kernels.data + rng.normal(size=bank.kernels.shape)
        bank.project_()
        export_filters(bank, tmp_path / "f.txt")
        ks, classes = read_filters(tmp_path / "f.txt")
        np.testing.assert_array_equal(ks, bank.kernels.data[:, 0])
        assert classes == CLASSES

    def test_header_format(self):
        lines = format_filters(FilterBank.from_seed()).splitlines()
        assert lines[0] == "# filter 0 class first_order"
        assert len(lines) == 30 * 6
        assert lines[-6] == "# filter 29 class square5"
