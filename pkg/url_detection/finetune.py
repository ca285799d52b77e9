"""
End-to-end fine-tuning of encoder + CLMSA + IP branch + BMMC + head on
cross-entropy, keeping the parameters of the epoch with the lowest
validation loss.
"""

import logging
from typing import List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from config.settings import RunConfig
from data_processing.ip_featurizer import IpEmbeddingTable
from data_processing.tokenizer import Vocab
from data_processing.url_corpus import Dataset
from neural.optim import adamw_step
from neural.state import ModelState
from url_detection.model import (
    batch_loss,
    check_vocab_fits,
    init_model_state,
    iter_batches,
    make_batch,
    mean_loss,
)
from url_detection.run_logger import FINETUNE_COLUMNS, LossLogger
from url_detection.tacl_encoder import PREFIX as ENCODER_PREFIX

logger = logging.getLogger(__name__)


def holdout_split(ds: Dataset, fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Carve a validation subset off the training set (at least one record each side)."""
    n = len(ds)
    n_val = min(max(1, int(np.floor(n * fraction))), n - 1) if n > 1 else 0
    perm = np.random.default_rng([seed, 7]).permutation(n)
    val_idx, train_idx = sorted(perm[:n_val].tolist()), sorted(perm[n_val:].tolist())
    return ds.subset(train_idx), ds.subset(val_idx)


def start_state(cfg: RunConfig, vocab: Vocab, seed: int, pretrained: Optional[ModelState] = None) -> ModelState:
    """Fresh full model, with the encoder copied from a pretraining checkpoint when one is given."""
    state = init_model_state(cfg, seed, vocab)
    if pretrained is not None:
        copied = state.load_values(pretrained, prefix=ENCODER_PREFIX)
        logger.info("Loaded %d pretrained encoder tensors", copied)
    return state


class Finetuner:
    def __init__(self, cfg: RunConfig, vocab: Vocab, state: ModelState, seed: int = 0,
                 ip_table: Optional[IpEmbeddingTable] = None, zero_ip: bool = False,
                 log_file: Optional[str] = None, progress: bool = True):
        check_vocab_fits(vocab, cfg)
        self.cfg = cfg
        self.vocab = vocab
        self.state = state
        self.seed = seed
        self.ip_table = ip_table
        self.zero_ip = zero_ip
        self.loss_log = LossLogger(log_file, FINETUNE_COLUMNS)
        self.progress = progress
        self.val_curve: List[float] = []

    def train_epoch(self, train: Dataset, epoch: int, batch_size: int, lr: float) -> float:
        order = np.random.default_rng([self.seed, epoch, 3]).permutation(len(train))
        losses = []
        # batch-norm statistics need at least two examples
        batches = list(iter_batches(train.records, batch_size, order, min_last=2))
        for i, chunk in enumerate(tqdm(batches, desc=f"epoch {epoch + 1}", disable=not self.progress, leave=False)):
            batch = make_batch(chunk, self.vocab, self.cfg, self.ip_table)
            rng = np.random.default_rng([self.seed, epoch, i, 5])
            self.state.zero_grad()
            loss = batch_loss(self.state, batch, self.cfg, training=True, rng=rng, zero_ip=self.zero_ip)
            loss.backward()
            adamw_step(self.state, lr=lr, weight_decay=self.cfg.train.weight_decay)
            losses.append(loss.item())
            self.loss_log.log_step(step=self.state.step_count, epoch=epoch + 1, train_loss=losses[-1])
        return float(np.mean(losses)) if losses else 0.0

    def validation_loss(self, val: Dataset, batch_size: int) -> float:
        return mean_loss(self.state, val.records, self.vocab, self.cfg, batch_size, self.ip_table, self.zero_ip)

    def run(self, train: Dataset, val: Optional[Dataset] = None, epochs: Optional[int] = None,
            batch_size: Optional[int] = None, lr: Optional[float] = None) -> ModelState:
        tcfg = self.cfg.train
        epochs = tcfg.epochs if epochs is None else epochs
        batch_size = batch_size or tcfg.batch_size
        lr = tcfg.lr if lr is None else lr
        if epochs <= 0:
            return self.state
        if val is None or len(val) == 0:
            train, val = holdout_split(train, tcfg.val_fraction, self.seed)
            logger.info("No validation set given; held out %d of %d records", len(val), len(train) + len(val))

        best_loss, best_state, best_epoch = np.inf, None, 0
        for epoch in range(epochs):
            train_loss = self.train_epoch(train, epoch, batch_size, lr)
            val_loss = self.validation_loss(val, batch_size)
            self.val_curve.append(val_loss)
            self.loss_log.log_epoch(epoch + 1, train_loss=train_loss, val_loss=val_loss)
            logger.info("epoch %d/%d: train %.4f, val %.4f", epoch + 1, epochs, train_loss, val_loss)
            if val_loss < best_loss:
                best_loss, best_state, best_epoch = val_loss, self.state.copy(), epoch + 1

        if best_state is None:
            logger.warning("validation loss was never finite; keeping the last epoch")
        else:
            self.state = best_state
        self.state.meta.update({
            "val_loss": float(best_loss),
            "best_epoch": best_epoch,
            "val_curve": [float(v) for v in self.val_curve],
            "zero_ip": self.zero_ip,
        })
        return self.state


def finetune(train: Dataset, state: ModelState, cfg: RunConfig, vocab: Vocab, epochs: Optional[int] = None,
             batch_size: Optional[int] = None, lr: Optional[float] = None, seed: int = 0,
             val: Optional[Dataset] = None, zero_ip: bool = False, ip_table: Optional[IpEmbeddingTable] = None,
             log_file: Optional[str] = None, progress: bool = False) -> ModelState:
    trainer = Finetuner(cfg, vocab, state, seed=seed, ip_table=ip_table, zero_ip=zero_ip,
                        log_file=log_file, progress=progress)
    return trainer.run(train, val, epochs=epochs, batch_size=batch_size, lr=lr)
