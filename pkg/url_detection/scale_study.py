"""
Training-size study: fine-tune on nested subsets of the training set and
score each model on one fixed test set.
"""

import logging
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from config.errors import UsageError
from config.settings import RunConfig
from data_processing.ip_featurizer import IpEmbeddingTable
from data_processing.tokenizer import Vocab
from data_processing.url_corpus import Dataset
from evaluation.metrics import level_key
from neural.state import ModelState
from url_detection.finetune import finetune, start_state
from url_detection.predictor import UrlPredictor

logger = logging.getLogger(__name__)


def nested_subsets(train: Dataset, sizes: Sequence[int], seed: int) -> List[Dataset]:
    """Each subset contains every smaller one; members keep file order."""
    if not sizes:
        raise UsageError("no subset sizes given")
    if min(sizes) < 2:
        raise UsageError(f"subset sizes must be >= 2, got {sorted(sizes)}")
    too_big = [s for s in sizes if s > len(train)]
    if too_big:
        raise UsageError(f"sizes {too_big} exceed the {len(train)} training records")
    order = np.random.default_rng([seed, 11]).permutation(len(train))
    return [train.subset(sorted(order[:size].tolist())) for size in sorted(sizes)]


def run_scale_study(train: Dataset, test: Dataset, sizes: Sequence[int], cfg: RunConfig, vocab: Vocab,
                    seed: int = 0, pretrained: Optional[ModelState] = None, epochs: Optional[int] = None,
                    ip_table: Optional[IpEmbeddingTable] = None, zero_ip: bool = False,
                    progress: bool = False) -> pd.DataFrame:
    rows = []
    for subset in nested_subsets(train, sizes, seed):
        logger.info("Scale study: fine-tuning on %d records", len(subset))
        state = start_state(cfg, vocab, seed, pretrained)
        state = finetune(subset, state, cfg, vocab, epochs=epochs, seed=seed, zero_ip=zero_ip,
                         ip_table=ip_table, progress=progress)
        predictor = UrlPredictor(state, vocab, ip_table=ip_table, zero_ip=zero_ip, progress=progress)
        report = predictor.evaluate(test, by_origin=False).report
        row = {"size": len(subset), "accuracy": report.accuracy, "precision": report.precision,
               "recall": report.recall, "f1": report.f1, "auc": report.auc}
        for level in cfg.eval.fpr_levels:
            row[f"tpr@{level_key(level)}"] = report.tpr_at_fpr.get(level_key(level))
        rows.append(row)
    return pd.DataFrame(rows)
