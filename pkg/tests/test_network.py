import numpy as np
import pytest

from stegsense.data import EmbedSpec, embed_lsb_matching, interleave, synthesize_cover
from stegsense.losses import LossConfig, combined_loss, cross_entropy
from stegsense.network import ALL_RELU, ConfigError, NetworkConfig, forward, init_model
from stegsense.tensor import Tensor, backward, finite_diff_check, no_grad


def pair_batch(n_pairs, size, seed):
    covers = np.stack([synthesize_cover(size, size, seed * 10 + k) for k in range(n_pairs)])
    stegos = np.stack([embed_lsb_matching(c, EmbedSpec(1.0, seed * 10 + k)) for k, c in enumerate(covers)])
    return interleave(covers, stegos)


def network_gradient_error(cfg, seed, n_pairs=2, size=16, per_tensor=4, n_pixels=8):
    """Worst frozen-branch error over sampled input pixels and entries of every parameter."""
    rng = np.random.default_rng(seed)
    model = init_model(cfg, seed).train()
    images, labels = pair_batch(n_pairs, size, seed)
    x = Tensor(images)

    def loss(t):
        p, feats = forward(t, model)
        if n_pairs < 2:  # the pairing term needs two pairs
            return cross_entropy(p, labels)
        return combined_loss(p, labels, feats, LossConfig())

    worst = finite_diff_check(loss, x, indices=rng.choice(x.data.size, n_pixels, replace=False),
                              freeze_branches=True)
    for _, t in model.named_parameters():
        idx = rng.choice(t.data.size, size=min(per_tensor, t.data.size), replace=False)
        worst = max(worst, finite_diff_check(lambda _: loss(x), t, indices=idx, freeze_branches=True))
    return worst


class TestConstruction:
    def test_default_parameter_count(self):
        assert init_model(NetworkConfig(), 0).n_parameters() == 920535

    def test_parameter_names(self):
        names = [n for n, _ in init_model(NetworkConfig(), 0).named_parameters()]
        assert names[0] == "srm.kernels" and names[-2:] == ["fc.w", "fc.b"]
        assert "block1.apam_w1" in names and "block2.apam_w1" not in names
        assert len(names) == len(set(names))

    def test_without_batch_norm_blocks_get_biases(self):
        model = init_model(NetworkConfig(use_batch_norm=False), 0)
        names = [n for n, _ in model.named_parameters()]
        assert "block3.bias" in names and not any("bn_" in n for n in names)
        assert model.named_buffers() == []

    def test_same_seed_same_weights(self, tiny_config):
        a, b = init_model(tiny_config, 3), init_model(tiny_config, 3)
        for (_, ta), (_, tb) in zip(a.named_parameters(), b.named_parameters()):
            assert ta.data.tobytes() == tb.data.tobytes()

    def test_seed_changes_weights_but_not_the_filter_bank(self, tiny_config):
        a, b = init_model(tiny_config, 1), init_model(tiny_config, 2)
        assert a.bank.kernels.data.tobytes() == b.bank.kernels.data.tobytes()
        assert not np.array_equal(a.blocks[0].conv.data, b.blocks[0].conv.data)

    @pytest.mark.parametrize("kwargs,match", [
        ({"block_channels": (4,) * 7}, "8 entries"),
        ({"pool_schedule": ("none", "avg") + ("none",) * 6}, "must not pool"),
        ({"pool_schedule": ("none", "none", "max") + ("none",) * 5}, "unknown pool"),
        ({"activation_schedule": ("gelu",) + ("relu",) * 7}, "unknown activation"),
        ({"kernel_size": 4}, "odd"),
        ({"tlu_T": 0.0}, "tlu_T"),
        ({"constraint": "tight"}, "constraint"),
        ({"block_channels": (4, 4, 0, 4, 4, 4, 4, 4)}, "positive"),
    ])
    def test_invalid_configs(self, kwargs, match):
        with pytest.raises(ConfigError, match=match):
            NetworkConfig(**kwargs)


class TestForward:
    def test_shapes_and_range(self):
        model = init_model(NetworkConfig(), 0).eval()
        images, _ = pair_batch(1, 32, 0)
        with no_grad():
            p, feats = forward(images, model)
        assert p.shape == (2,) and feats.shape == (2, 256)
        assert np.all(np.isfinite(p.data)) and np.all((p.data > 0) & (p.data < 1))

    def test_three_dimensional_input_is_accepted(self, tiny_config):
        model = init_model(tiny_config, 0).eval()
        with no_grad():
            p, _ = forward(np.zeros((2, 16, 16)), model)
        assert p.shape == (2,)

    def test_input_too_small_for_the_pools(self, tiny_config):
        with pytest.raises(ConfigError, match="underflows"):
            forward(np.zeros((1, 1, 7, 16)), init_model(tiny_config, 0))

    def test_wrong_channel_count(self, tiny_config):
        with pytest.raises(ConfigError):
            forward(np.zeros((1, 3, 16, 16)), init_model(tiny_config, 0))

    def test_constant_images_give_identical_output(self):
        model = init_model(NetworkConfig(), 5).eval()
        levels = [0.0, 1.0, 64.0, 128.0, 200.0, 255.0]
        images = np.stack([np.full((1, 16, 16), v) for v in levels])
        with no_grad():
            p, feats = forward(images, model)
        assert len(set(p.data.tolist())) == 1
        assert all(feats.data[i].tobytes() == feats.data[0].tobytes() for i in range(len(levels)))

    def test_duplicate_rows_agree_in_eval_mode(self, tiny_config):
        model = init_model(tiny_config, 0).eval()
        img = synthesize_cover(16, 16, 9)[None].astype(float)
        with no_grad():
            p, _ = forward(np.stack([img, img, img]), model)
        assert p.data[0] == p.data[1] == p.data[2]

    def test_eval_mode_does_not_touch_running_stats(self, tiny_config):
        model = init_model(tiny_config, 0).eval()
        before = [b.copy() for _, b in model.named_buffers()]
        with no_grad():
            forward(pair_batch(1, 16, 0)[0], model)
        for (_, b), old in zip(model.named_buffers(), before):
            np.testing.assert_array_equal(b, old)

    def test_taps(self, tiny_config):
        model = init_model(tiny_config, 0).eval()
        taps = {}
        with no_grad():
            forward(pair_batch(1, 16, 0)[0], model, taps=taps)
        assert taps["residuals"].shape == (2, 30, 16, 16)
        assert taps["block1_pre_act"].shape == (2, 4, 16, 16)
        assert taps["block8_pre_act"].shape == (2, 8, 2, 2)
        alpha = taps["block1_alpha"].data
        assert alpha.shape == (2, 4) and np.all((alpha > 0) & (alpha < 1))
        assert "block2_alpha" not in taps

    def test_all_relu_has_no_apam(self):
        model = init_model(NetworkConfig(activation_schedule=ALL_RELU), 0)
        assert all(b.apam is None for b in model.blocks)


class TestNetworkGradient:
    @pytest.mark.parametrize("seed", range(3))
    def test_pair_batch_16(self, seed):
        assert network_gradient_error(NetworkConfig(), seed) < 1e-4

    def test_without_batch_norm(self):
        assert network_gradient_error(NetworkConfig(use_batch_norm=False, constraint="none"), 7) < 1e-4

    def test_two_images_32(self):
        assert network_gradient_error(NetworkConfig(), 11, n_pairs=1, size=32, per_tensor=2) < 1e-4

    def test_backward_reaches_every_parameter(self, tiny_config):
        model = init_model(tiny_config, 0).train()
        images, labels = pair_batch(2, 16, 1)
        p, feats = forward(images, model)
        backward(combined_loss(p, labels, feats, LossConfig()))
        for name, t in model.named_parameters():
            assert t.grad is not None and np.any(t.grad != 0), name
