from pathlib import Path

import numpy as np
import pytest

from config.presets import get_preset
from config.settings import RunConfig
from data_processing.tokenizer import Vocab

# p=117 a=102 y=126 l=113 in byte-id space: "pa", "pay", "pal"
PAYPAL_MERGES = [(117, 102), (261, 126), (261, 113)]


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv("CURLIP_SEED", raising=False)


@pytest.fixture
def write_csv(tmp_path):
    def _write(rows, header="url,ip,label", name="data.csv") -> Path:
        path = tmp_path / name
        path.write_text("\n".join([header] + list(rows)) + "\n", encoding="utf-8")
        return path

    return _write


@pytest.fixture
def paypal_vocab() -> Vocab:
    return Vocab(PAYPAL_MERGES)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg() -> RunConfig:
    """Desk preset shrunk so a training step takes milliseconds."""
    cfg = get_preset("desk")
    cfg = cfg.override("encoder", n_layers=2, hidden=16, n_heads=2, max_len=24, vocab_size=300)
    cfg = cfg.override("clmsa", channel_pyramid=(4, 2), pool_out=(4, 4), proj_dim=16)
    return cfg.override("train", batch_size=8, epochs=2)
