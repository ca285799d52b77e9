"""End-to-end gradient check of the detector loss (encoder -> CLMSA -> BMMC -> head) in 64-bit."""

import logging
from typing import Optional

import numpy as np

from config.presets import get_preset
from config.settings import RunConfig
from data_processing.synthetic import generate_corpus
from data_processing.tokenizer import Vocab
from neural.gradcheck import GradCheckReport, grad_check
from url_detection.model import batch_loss, init_model_state, make_batch

logger = logging.getLogger(__name__)

E2E_MAX_COORDS = 4


def deterministic_config(cfg: RunConfig) -> RunConfig:
    """Dropouts off so the loss is a fixed function of the parameters."""
    return cfg.override("encoder", dropout=0.0).override("bmmc", block_dropout=0.0)


def end_to_end_grad_check(seed: int = 0, cfg: Optional[RunConfig] = None, batch_size: int = 4,
                          max_coords: int = E2E_MAX_COORDS) -> GradCheckReport:
    """
    Cross-entropy of a small synthetic batch in training mode (batch
    statistics in every batchnorm), checked against central differences.
    """
    cfg = deterministic_config(cfg if cfg is not None else get_preset("desk"))
    vocab = Vocab([])
    state = init_model_state(cfg, seed, vocab).astype(np.float64)
    batch = make_batch(generate_corpus(batch_size, seed=seed, n_classes=cfg.bmmc.n_classes).records, vocab, cfg)

    def loss():
        return batch_loss(state, batch, cfg, training=True, rng=np.random.default_rng(seed))

    report = grad_check(loss, state, seed=seed, max_coords=max_coords)
    logger.info("seed %d: max rel err %.3e (%s)", seed, report.max_rel_err, report.worst)
    return report
