import pytest

from config.errors import ConfigError
from config.presets import get_preset
from config.settings import (
    BmmcConfig,
    ClmsaConfig,
    EncoderConfig,
    RunConfig,
    TrainConfig,
    load_run_config,
    resolve_seed,
)


class TestPresets:
    def test_desk(self):
        cfg = get_preset("desk")
        enc = cfg.encoder
        assert (enc.n_layers, enc.hidden, enc.n_heads, enc.max_len, enc.vocab_size) == (4, 64, 4, 64, 512)
        assert cfg.clmsa.channel_pyramid == (16, 8, 8, 4)
        assert cfg.clmsa.flat_width == 64
        assert cfg.train.lr == 1e-3

    def test_full(self):
        cfg = get_preset("FULL")
        assert (cfg.encoder.n_layers, cfg.encoder.hidden, cfg.encoder.max_len) == (12, 768, 200)
        assert cfg.clmsa.pool_out == (25, 96)
        assert cfg.clmsa.flat_width == 768
        assert cfg.clmsa.proj_dim == 128
        assert cfg.train.lr == 2e-5

    def test_presets_are_independent_copies(self):
        a = get_preset("desk")
        a.train.lr = 0.5
        assert get_preset("desk").train.lr == 1e-3

    def test_unknown(self):
        with pytest.raises(ConfigError):
            get_preset("huge")


class TestValidation:
    @pytest.mark.parametrize("factory", [
        lambda: EncoderConfig(hidden=30, n_heads=4),
        lambda: EncoderConfig(vocab_size=200),
        lambda: EncoderConfig(dropout=1.0),
        lambda: ClmsaConfig(channel_pyramid=()),
        lambda: ClmsaConfig(gmlp_expansion=3),
        lambda: BmmcConfig(alpha_min=1.0),
        lambda: BmmcConfig(n_classes=4),
        lambda: TrainConfig(mask_rate=0.0),
        lambda: TrainConfig(tacl_tau=0.0),
        lambda: TrainConfig(tacl_lambda=-1.0),
    ])
    def test_rejected(self, factory):
        with pytest.raises(ConfigError):
            factory()

    def test_override_validates_and_copies(self):
        cfg = get_preset("desk")
        changed = cfg.override("train", tacl_tau=0.05, tacl_lambda=None)
        assert changed.train.tacl_tau == 0.05
        assert changed.train.tacl_lambda == cfg.train.tacl_lambda
        assert cfg.train.tacl_tau == 0.1
        with pytest.raises(ConfigError):
            cfg.override("train", tacl_tau=-1.0)
        with pytest.raises(ConfigError):
            cfg.override("train", warmup=3)
        with pytest.raises(ConfigError):
            cfg.override("optimizer", lr=1.0)

    def test_dict_round_trip(self):
        cfg = get_preset("full").override("bmmc", n_classes=3)
        back = RunConfig.from_dict(cfg.to_dict())
        assert back == cfg
        assert back.clmsa.pool_out == (25, 96)


class TestLoadRunConfig:
    def test_defaults_to_desk(self):
        assert load_run_config() == get_preset("desk")

    def test_toml_overrides(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text('preset = "desk"\n\n[encoder]\nn_layers = 2\n\n[train]\ntacl_tau = 0.05\n')
        cfg = load_run_config(str(path))
        assert cfg.encoder.n_layers == 2
        assert cfg.encoder.hidden == 64
        assert cfg.train.tacl_tau == 0.05

    def test_explicit_preset_wins_over_file(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text('preset = "desk"\n[bmmc]\nalpha_min = 0.2\n')
        cfg = load_run_config(str(path), preset="full")
        assert cfg.encoder.n_layers == 12
        assert cfg.bmmc.alpha_min == 0.2

    @pytest.mark.parametrize("text", ['[encoder]\nlayers = 2\n', '[optimizer]\nlr = 1.0\n',
                                      'encoder = 3\n', '[encoder\n'])
    def test_bad_files(self, tmp_path, text):
        path = tmp_path / "bad.toml"
        path.write_text(text)
        with pytest.raises(ConfigError):
            load_run_config(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(str(tmp_path / "nope.toml"))


class TestResolveSeed:
    def test_cli_then_default(self):
        assert resolve_seed(7) == 7
        assert resolve_seed(None, default=3) == 3

    def test_environment_wins(self, monkeypatch):
        monkeypatch.setenv("CURLIP_SEED", "42")
        assert resolve_seed(7) == 42

    def test_bad_environment_value(self, monkeypatch):
        monkeypatch.setenv("CURLIP_SEED", "seven")
        with pytest.raises(ConfigError):
            resolve_seed(None)
