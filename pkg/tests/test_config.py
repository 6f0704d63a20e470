import pytest
from hypothesis import given
from hypothesis import strategies as st

from stegsense import PRESETS, ConfigError, RunConfig, ablation_variants, load_config, parse_config
from stegsense.network import ALL_RELU, DEFAULT_ACTIVATIONS


class TestParse:
    def test_defaults(self):
        cfg = parse_config("")
        assert cfg == RunConfig()
        assert cfg.lam == 0.05 and cfg.margin == 3.0 and cfg.epochs == 300

    def test_comments_blank_lines_and_spaces(self):
        cfg = parse_config("# header\n\n  epochs = 7   # short run\nlambda=0\ndeterministic=false\n")
        assert (cfg.epochs, cfg.lam, cfg.deterministic) == (7, 0.0, False)

    def test_tuples(self):
        cfg = parse_config("block_channels=4,4,4,6,6,8,8,8\nactivation_schedule=" + ",".join(ALL_RELU))
        assert cfg.block_channels == (4, 4, 4, 6, 6, 8, 8, 8)
        assert cfg.network().activation_schedule == ALL_RELU

    @pytest.mark.parametrize("text,match", [
        ("colour=red", "unknown key"),
        ("epochs=3\nepochs=4", "duplicate"),
        ("epochs", "key=value"),
        ("epochs=three", "invalid value"),
        ("deterministic=maybe", "invalid value"),
        ("payload=0", "payload"),
        ("split_train=0.9", "sum to 1"),
        ("constraint=loose", "constraint"),
        ("block_channels=4,4", "8 entries"),
        ("pool_schedule=avg,none,none,none,none,none,none,none", "must not pool"),
        ("rho=1.5", "rho"),
        ("margin=0", "margin"),
    ])
    def test_errors(self, text, match):
        with pytest.raises(ConfigError, match=match):
            parse_config(text)

    def test_base_is_layered(self):
        base = parse_config("epochs=5")
        assert parse_config("seed=2", base).epochs == 5

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.cfg")


class TestCanonicalText:
    def test_round_trip_default(self):
        text = RunConfig().to_text()
        assert parse_config(text) == RunConfig()
        assert "lambda=0.05\n" in text and "deterministic=true\n" in text

    @given(st.integers(0, 2**31), st.floats(0.01, 1.0), st.floats(0.0, 10.0), st.booleans())
    def test_round_trip(self, seed, payload, lam, bn):
        cfg = RunConfig(seed=seed, payload=payload, lam=lam, use_batch_norm=bn)
        assert parse_config(cfg.to_text()) == cfg

    def test_text_lists_every_key_once(self):
        keys = [line.split("=")[0] for line in RunConfig().to_text().splitlines()]
        assert len(keys) == len(set(keys)) == 29


class TestPresets:
    def test_eight_presets(self):
        variants = ablation_variants()
        assert tuple(variants) == PRESETS

    @pytest.mark.parametrize("name", PRESETS)
    def test_components(self, name):
        cfg = ablation_variants()[name]
        parts = set(name.split("+"))
        full = name == "full"
        assert (cfg.activation_schedule == DEFAULT_ACTIVATIONS) == (full or "apam" in parts)
        assert (cfg.constraint == "ours") == (full or "constraint" in parts)
        assert (cfg.lam > 0) == (full or "contrastive" in parts)
        if name == "origin":
            assert cfg.activation_schedule == ALL_RELU and cfg.constraint == "none" and cfg.lam == 0.0

    def test_presets_keep_the_base(self):
        base = RunConfig(epochs=4, seed=9)
        for cfg in ablation_variants(base).values():
            assert (cfg.epochs, cfg.seed) == (4, 9)

    def test_full_equals_default(self):
        assert ablation_variants()["full"] == RunConfig()
