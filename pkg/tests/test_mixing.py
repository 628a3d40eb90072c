"""Group masks, mixing, corruption, attention masks, unmixing."""

import numpy as np
import pytest

from mixpretrain import mixing, tensor as T
from mixpretrain.mixing import (
    GroupMask,
    build_attention_mask,
    corrupt,
    mix_images,
    sample_group_mask,
    unmix_tokens,
    upsample_mask,
    with_unit_px,
)
from mixpretrain.tensor import Tensor, Tape


def full_mask(grid, K, seed=0, **kw):
    return with_unit_px(sample_group_mask(grid, grid, K, seed, **kw), 4)


class TestSampleGroupMask:
    def test_balanced_halves(self):
        m = sample_group_mask(4, 4, 2, seed=1)
        assert m.size_of(0) == 8 and m.size_of(1) == 8

    def test_four_way_masked_fraction(self):
        m = sample_group_mask(4, 4, 4, seed=2)
        for k in range(4):
            assert m.size_of(k) == 4
            assert m.masked_fraction(k) == 12 / 16

    def test_remainder_and_uniformity(self):
        # 3x3 grid, K=2: sizes {5, 4} with the extra unit always in group 0,
        # so the unbiased per-position frequency of group 0 is 5/9. Every
        # position must sit at that frequency (no positional bias).
        hits = np.zeros(9)
        n = 10_000
        for s in range(n):
            m = sample_group_mask(3, 3, 2, seed=s)
            assert [m.size_of(k) for k in range(2)] == [5, 4]
            hits += (m.group_of.reshape(-1) == 0)
        np.testing.assert_allclose(hits / n, 5 / 9, atol=0.02)

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            sample_group_mask(2, 2, 1, seed=0)
        with pytest.raises(ValueError):
            sample_group_mask(2, 2, 5, seed=0)

    def test_masking_ratio_law(self):
        # Per-image masked fraction stays within 1/T of (K-1)/K.
        for K in (2, 3, 4, 5):
            m = sample_group_mask(4, 4, K, seed=K)
            for k in range(K):
                assert abs(m.masked_fraction(k) - (K - 1) / K) <= 1 / 16 + 1e-12

    def test_virtual_units(self):
        m = sample_group_mask(4, 4, 2, seed=3, virtual_fraction=0.5)
        assert m.has_virtual
        assert m.size_of(2) == 8  # virtual id == K
        assert m.size_of(0) == 4 and m.size_of(1) == 4
        assert m.masked_fraction(0) == 0.75

    def test_deterministic(self):
        a = sample_group_mask(5, 5, 3, seed=11)
        b = sample_group_mask(5, 5, 3, seed=11)
        np.testing.assert_array_equal(a.group_of, b.group_of)


class TestMixImages:
    def test_all_group_zero_identity(self):
        mask = GroupMask(2, 2, np.zeros((2, 2), dtype=np.int16), 2, unit_px=4)
        rng = np.random.default_rng(0)
        sources = rng.random((2, 3, 8, 8)).astype(np.float32)
        out = mix_images(sources, mask)
        np.testing.assert_array_equal(out, sources[0])

    def test_balanced_mean(self):
        m = full_mask(4, 2, seed=5)
        sources = np.stack([
            np.zeros((3, 16, 16), dtype=np.float32),
            np.ones((3, 16, 16), dtype=np.float32),
        ])
        out = mix_images(sources, m)
        assert out.mean() == 0.5

    def test_every_unit_bit_equal_to_owner(self):
        m = full_mask(4, 4, seed=6)
        rng = np.random.default_rng(1)
        sources = rng.random((4, 3, 16, 16)).astype(np.float32)
        out = mix_images(sources, m)
        for gy in range(4):
            for gx in range(4):
                k = int(m.group_of[gy, gx])
                sl = np.s_[:, gy * 4:(gy + 1) * 4, gx * 4:(gx + 1) * 4]
                np.testing.assert_array_equal(out[sl], sources[k][sl])

    def test_idempotent(self):
        m = full_mask(4, 3, seed=7)
        rng = np.random.default_rng(2)
        sources = rng.random((3, 3, 16, 16)).astype(np.float32)
        once = mix_images(sources, m)
        again = mix_images(sources, m)
        np.testing.assert_array_equal(once, again)

    def test_shape_mismatch(self):
        m = full_mask(4, 2, seed=8)
        with pytest.raises(ValueError):
            mix_images(np.zeros((2, 3, 12, 12), dtype=np.float32), m)


class TestUpsampleMask:
    def test_factor_one_identity(self):
        m = sample_group_mask(4, 4, 2, seed=9)
        np.testing.assert_array_equal(upsample_mask(m, 1), m.group_of)

    def test_nearest_replication(self):
        grid = np.array([[0, 1], [1, 0]])
        up = upsample_mask(grid, 2)
        expect = np.array([
            [0, 0, 1, 1],
            [0, 0, 1, 1],
            [1, 1, 0, 0],
            [1, 1, 0, 0],
        ])
        np.testing.assert_array_equal(up, expect)

    def test_block_constancy_at_all_factors(self):
        m = sample_group_mask(4, 4, 4, seed=10)
        for f in (1, 2, 4, 8):
            up = upsample_mask(m, f)
            blocks = up.reshape(4, f, 4, f)
            assert (blocks == blocks[:, :1, :, :1]).all()

    def test_composition(self):
        m = sample_group_mask(3, 3, 2, seed=12)
        np.testing.assert_array_equal(
            upsample_mask(upsample_mask(m, 2), 3), upsample_mask(m, 6)
        )

    def test_bad_factor(self):
        with pytest.raises(ValueError):
            upsample_mask(np.zeros((2, 2), dtype=int), 0)


class TestAttentionMask:
    def test_single_group_all_true(self):
        allow = build_attention_mask(np.zeros((4, 4), dtype=int), 2)
        assert allow.all()

    def test_block_diagonal_pattern(self):
        grid = np.array([[0, 0], [1, 1]])
        allow = build_attention_mask(grid, 2)[0]
        expect = np.array([
            [1, 1, 0, 0],
            [1, 1, 0, 0],
            [0, 0, 1, 1],
            [0, 0, 1, 1],
        ], dtype=bool)
        np.testing.assert_array_equal(allow, expect)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(5):
            grid = rng.integers(0, 3, size=(4, 4))
            win = 2
            allow = build_attention_mask(grid, win)
            # Brute force: enumerate token pairs inside each window.
            for wy in range(2):
                for wx in range(2):
                    tokens = grid[wy * 2:(wy + 1) * 2, wx * 2:(wx + 1) * 2].reshape(-1)
                    widx = wy * 2 + wx
                    for i in range(4):
                        for j in range(4):
                            assert allow[widx, i, j] == (tokens[i] == tokens[j])

    def test_symmetric_true_diagonal(self):
        rng = np.random.default_rng(14)
        grid = rng.integers(0, 4, size=(8, 8))
        allow = build_attention_mask(grid, 4)
        assert (allow == allow.swapaxes(-1, -2)).all()
        assert allow[..., np.arange(16), np.arange(16)].all()

    def test_indivisible_window(self):
        with pytest.raises(ValueError):
            build_attention_mask(np.zeros((4, 4), dtype=int), 3)

    def test_batched_maps(self):
        rng = np.random.default_rng(15)
        maps = rng.integers(0, 2, size=(3, 4, 4))
        allow = build_attention_mask(maps, 4)
        assert allow.shape == (3, 1, 16, 16)


class TestUnmixTokens:
    def test_single_group_unchanged(self):
        tokens = Tensor(np.random.default_rng(16).random((1, 4, 8)).astype(np.float32))
        mask = GroupMask(2, 2, np.zeros((2, 2), dtype=np.int16), 1, unit_px=4)
        out = unmix_tokens(tokens, mask, 0, Tensor(np.zeros(8, dtype=np.float32)))
        np.testing.assert_array_equal(out.data, tokens.data)

    def test_kept_count_matches_group_size(self):
        m = sample_group_mask(4, 4, 3, seed=17)
        tokens = Tensor(np.random.default_rng(18).random((1, 16, 8)).astype(np.float32))
        mt = Tensor(np.full(8, 7.5, dtype=np.float32))
        for k in range(3):
            out = unmix_tokens(tokens, m, k, mt)
            kept = ~(out.data == 7.5).all(axis=-1)[0]
            assert kept.sum() == m.size_of(k)

    def test_concatenated_keeps_form_permutation(self):
        m = sample_group_mask(4, 4, 4, seed=19)
        data = np.random.default_rng(20).random((1, 16, 8)).astype(np.float32)
        tokens = Tensor(data)
        mt = Tensor(np.full(8, np.nan, dtype=np.float32))
        rows = []
        for k in range(4):
            out = unmix_tokens(tokens, m, k, mt).data[0]
            rows.extend(row for row in out if not np.isnan(row).any())
        rows = np.stack(rows)
        original = data[0]
        # Multiset equality of rows.
        order_a = np.lexsort(rows.T)
        order_b = np.lexsort(original.T)
        np.testing.assert_array_equal(rows[order_a], original[order_b])

    def test_k_out_of_range(self):
        m = sample_group_mask(2, 2, 2, seed=21)
        tokens = Tensor(np.zeros((1, 4, 8), dtype=np.float32))
        with pytest.raises(ValueError):
            unmix_tokens(tokens, m, 2, Tensor(np.zeros(8, dtype=np.float32)))

    def test_mask_token_receives_gradient(self):
        m = sample_group_mask(2, 2, 2, seed=22)
        tokens = Tensor(np.zeros((1, 4, 8), dtype=np.float32))
        mt = Tensor(np.zeros(8, dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            out = unmix_tokens(tokens, m, 0, mt)
            loss = T.tsum(T.mul(out, out))
        tape.backward(loss)
        assert mt.grad is not None and mt.grad.shape == (8,)


class TestCorrupt:
    def img(self, seed=23):
        return np.random.default_rng(seed).random((3, 8, 8)).astype(np.float32)

    def test_zero_all_masked(self):
        out = corrupt(self.img(), np.ones((2, 2), dtype=bool), "zero", unit_px=4)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_zero_visible_untouched(self):
        image = self.img()
        mask = np.array([[True, False], [False, False]])
        out = corrupt(image, mask, "zero", unit_px=4)
        np.testing.assert_array_equal(out.data[:, 4:, :], image[:, 4:, :])
        np.testing.assert_array_equal(out.data[:, :4, :4], 0.0)

    def test_shuffle_single_masked_unit_is_identity(self):
        image = self.img()
        mask = np.array([[False, True], [False, False]])
        out = corrupt(image, mask, "shuffle", unit_px=4, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(out.data, image)

    def test_shuffle_preserves_multiset(self):
        rng = np.random.default_rng(24)
        for trial in range(5):
            image = rng.random((3, 16, 16)).astype(np.float32)
            mask = rng.random((4, 4)) < 0.6
            out = corrupt(image, mask, "shuffle", unit_px=4, rng=np.random.default_rng(trial)).data
            units_in = image.reshape(3, 4, 4, 4, 4).transpose(1, 3, 0, 2, 4).reshape(16, -1)
            units_out = out.reshape(3, 4, 4, 4, 4).transpose(1, 3, 0, 2, 4).reshape(16, -1)
            masked = mask.reshape(-1)
            np.testing.assert_array_equal(units_in[~masked], units_out[~masked])
            a = units_in[masked][np.lexsort(units_in[masked].T)]
            b = units_out[masked][np.lexsort(units_out[masked].T)]
            np.testing.assert_array_equal(a, b)

    def test_learnable_fills_and_differentiates(self):
        image = self.img()
        mask = np.array([[True, False], [True, True]])
        unit = Tensor(np.full((3, 4, 4), 0.25, dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            out = corrupt(image, mask, "learnable", unit_px=4, learnable_unit=unit)
            loss = T.tsum(out)
        np.testing.assert_array_equal(out.data[:, :4, :4], 0.25)
        np.testing.assert_array_equal(out.data[:, :4, 4:], image[:, :4, 4:])
        tape.backward(loss)
        # Three masked units, each pixel of the unit used once per unit.
        np.testing.assert_array_equal(unit.grad, np.full((3, 4, 4), 3.0))

    def test_zoomin_keeps_visible_and_changes_scale(self):
        image = self.img()
        mask = np.array([[False, True], [True, False]])
        out = corrupt(image, mask, "zoomin", unit_px=4, rng=np.random.default_rng(7)).data
        np.testing.assert_array_equal(out[:, :4, :4], image[:, :4, :4])
        assert not np.array_equal(out, image)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            corrupt(self.img(), np.ones((2, 2), dtype=bool), "blur", unit_px=4)
        with pytest.raises(ValueError):
            corrupt(self.img(), np.ones((2, 2), dtype=bool), "mix", unit_px=4)
