import copy
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict

from config.errors import ConfigError
from config.settings import (
    BmmcConfig,
    ClmsaConfig,
    EncoderConfig,
    EvalConfig,
    RunConfig,
    TrainConfig,
)


class Preset(Enum):
    DESK = "desk"
    FULL = "full"


@dataclass
class ModelPreset:
    encoder: EncoderConfig
    clmsa: ClmsaConfig
    bmmc: BmmcConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def run_config(self, name: str) -> RunConfig:
        return RunConfig(
            preset=name,
            encoder=copy.deepcopy(self.encoder),
            clmsa=copy.deepcopy(self.clmsa),
            bmmc=copy.deepcopy(self.bmmc),
            train=copy.deepcopy(self.train),
            eval=copy.deepcopy(self.eval),
        )


MODEL_PRESETS: Dict[str, ModelPreset] = {
    # laptop-sized; 4 * 16 = 64 flattened width per pooled token
    Preset.DESK.value: ModelPreset(
        encoder=EncoderConfig(n_layers=4, hidden=64, n_heads=4, ffn_mult=2, max_len=64, vocab_size=512),
        clmsa=ClmsaConfig(channel_pyramid=(16, 8, 8, 4), pool_out=(8, 16), proj_dim=32),
        bmmc=BmmcConfig(block_size=16, alpha_min=0.1, block_dropout=0.1, context_dim=16),
        # the "full" preset keeps the 2e-5 default
        train=TrainConfig(lr=1e-3),
    ),
    # 8 * 96 = 768 flattened width, 25 pooled tokens, f_url in R^128
    Preset.FULL.value: ModelPreset(
        encoder=EncoderConfig(n_layers=12, hidden=768, n_heads=12, ffn_mult=4, max_len=200, vocab_size=8000),
        clmsa=ClmsaConfig(channel_pyramid=(64, 32, 16, 8), pool_out=(25, 96), proj_dim=128),
        bmmc=BmmcConfig(block_size=16, alpha_min=0.1, block_dropout=0.1, context_dim=16),
    ),
}


def get_preset(name: str) -> RunConfig:
    key = str(name).lower()
    if key not in MODEL_PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(MODEL_PRESETS)}")
    return MODEL_PRESETS[key].run_config(key)
