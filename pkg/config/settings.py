import copy
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

from dotenv import load_dotenv

from config.errors import ConfigError

load_dotenv()

SEED_ENV_VAR = "CURLIP_SEED"


@dataclass
class EncoderConfig:
    n_layers: int = 4
    hidden: int = 64
    n_heads: int = 4
    ffn_mult: int = 2
    max_len: int = 64
    vocab_size: int = 512
    dropout: float = 0.1

    def __post_init__(self):
        if self.n_layers < 1 or self.hidden < 1 or self.n_heads < 1:
            raise ConfigError(f"encoder dimensions must be positive: {self}")
        if self.hidden % self.n_heads != 0:
            raise ConfigError(f"hidden={self.hidden} is not divisible by n_heads={self.n_heads}")
        if self.max_len < 3:
            raise ConfigError(f"max_len must be >= 3, got {self.max_len}")
        if self.vocab_size < 261:
            raise ConfigError(f"vocab_size must be >= 261, got {self.vocab_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads


@dataclass
class ClmsaConfig:
    channel_pyramid: Tuple[int, ...] = (16, 8, 8, 4)
    pool_out: Tuple[int, int] = (8, 16)
    proj_dim: int = 32
    gmlp_expansion: int = 2

    def __post_init__(self):
        self.channel_pyramid = tuple(int(c) for c in self.channel_pyramid)
        self.pool_out = tuple(int(p) for p in self.pool_out)
        if not self.channel_pyramid or min(self.channel_pyramid) < 1:
            raise ConfigError(f"channel_pyramid must be non-empty and positive: {self.channel_pyramid}")
        if len(self.pool_out) != 2 or min(self.pool_out) < 1:
            raise ConfigError(f"pool_out must be two positive ints: {self.pool_out}")
        if self.proj_dim < 1:
            raise ConfigError(f"proj_dim must be positive, got {self.proj_dim}")
        if self.gmlp_expansion < 2 or self.gmlp_expansion % 2:
            raise ConfigError(f"gmlp_expansion must be an even factor >= 2, got {self.gmlp_expansion}")

    @property
    def flat_width(self) -> int:
        """Width C_last * Q of each pooled token after the channel-major reshape."""
        return self.channel_pyramid[-1] * self.pool_out[1]


@dataclass
class BmmcConfig:
    block_size: int = 16
    alpha_min: float = 0.1
    block_dropout: float = 0.1
    n_classes: int = 2
    context_dim: int = 16
    ip_dim: int = 13

    def __post_init__(self):
        if self.block_size < 1:
            raise ConfigError(f"block_size must be >= 1, got {self.block_size}")
        if not 0.0 <= self.alpha_min < 1.0:
            raise ConfigError(f"alpha_min must be in [0, 1), got {self.alpha_min}")
        if not 0.0 <= self.block_dropout < 1.0:
            raise ConfigError(f"block_dropout must be in [0, 1), got {self.block_dropout}")
        if self.n_classes not in (2, 3):
            raise ConfigError(f"n_classes must be 2 or 3, got {self.n_classes}")
        if self.context_dim < 1 or self.ip_dim < 1:
            raise ConfigError("context_dim and ip_dim must be positive")


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 2e-5
    weight_decay: float = 1e-4
    epochs: int = 10
    pretrain_epochs: int = 1
    pretrain_max_steps: int = 200
    pretrain_lr: float = 1e-3
    mask_rate: float = 0.15
    tacl_lambda: float = 1.0
    tacl_tau: float = 0.1
    teacher_ema: float = 0.0
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigError(f"mask_rate must be in (0, 1), got {self.mask_rate}")
        if self.tacl_lambda < 0:
            raise ConfigError(f"tacl_lambda must be >= 0, got {self.tacl_lambda}")
        if self.tacl_tau <= 0:
            raise ConfigError(f"tacl_tau must be > 0, got {self.tacl_tau}")
        if not 0.0 <= self.teacher_ema < 1.0:
            raise ConfigError(f"teacher_ema must be in [0, 1), got {self.teacher_ema}")


@dataclass
class EvalConfig:
    threshold: float = 0.5
    fpr_levels: Tuple[float, ...] = (1e-4, 1e-3, 1e-2, 1e-1)
    roc_grid_points: int = 1001

    def __post_init__(self):
        self.fpr_levels = tuple(float(level) for level in self.fpr_levels)
        if self.roc_grid_points < 2:
            raise ConfigError(f"roc_grid_points must be >= 2, got {self.roc_grid_points}")


SECTIONS = {
    "encoder": EncoderConfig,
    "clmsa": ClmsaConfig,
    "bmmc": BmmcConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    preset: str = "desk"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    clmsa: ClmsaConfig = field(default_factory=ClmsaConfig)
    bmmc: BmmcConfig = field(default_factory=BmmcConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> Dict:
        data = {"preset": self.preset}
        for name in SECTIONS:
            section = asdict(getattr(self, name))
            data[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "RunConfig":
        unknown = set(data) - set(SECTIONS) - {"preset"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {"preset": str(data.get("preset", "desk"))}
        for name, section_cls in SECTIONS.items():
            kwargs[name] = _build_section(name, section_cls, data.get(name, {}))
        return cls(**kwargs)

    def override(self, section: str, **values) -> "RunConfig":
        """Copy with some keys of one section replaced; None values are ignored."""
        values = {k: v for k, v in values.items() if v is not None}
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section: {section}")
        _check_keys(section, SECTIONS[section], values)
        updated = copy.deepcopy(self)
        setattr(updated, section, replace(getattr(self, section), **values))
        return updated


def _check_keys(name: str, section_cls, values: Dict):
    allowed = {f.name for f in fields(section_cls)}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")


def _build_section(name: str, section_cls, values: Dict):
    if not isinstance(values, dict):
        raise ConfigError(f"section [{name}] must be a table")
    _check_keys(name, section_cls, values)
    try:
        return section_cls(**values)
    except TypeError as e:
        raise ConfigError(f"invalid values in [{name}]: {e}") from e


def load_run_config(path: Optional[str] = None, preset: Optional[str] = None) -> RunConfig:
    """Preset defaults overlaid with the sections of an optional TOML file."""
    from config.presets import get_preset

    overrides: Dict = {}
    if path is not None:
        config_file = Path(path)
        if not config_file.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(config_file, "rb") as f:
                overrides = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"invalid TOML in {path}: {e}") from e

    base = get_preset(preset or overrides.get("preset", "desk")).to_dict()
    unknown = set(overrides) - set(SECTIONS) - {"preset"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for name in SECTIONS:
        section = overrides.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section [{name}] must be a table")
        _check_keys(name, SECTIONS[name], section)
        base[name].update(section)
    return RunConfig.from_dict(base)


def resolve_seed(cli_seed: Optional[int], default: int = 0) -> int:
    """CURLIP_SEED wins over --seed when it is set."""
    env_value = os.getenv(SEED_ENV_VAR)
    if env_value not in (None, ""):
        try:
            return int(env_value)
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_value!r}") from e
    return default if cli_seed is None else int(cli_seed)
