"""
Student-teacher pretraining of the URL encoder: the teacher encodes the
clean sequence, the student the masked one, and the student is updated on
MLM + lambda * token-contrastive loss.
"""

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from config.errors import NoMaskablePositions
from config.settings import RunConfig
from data_processing.tokenizer import MaskedSeq, TokenSeq, Vocab, encode, mask_tokens
from data_processing.url_corpus import Dataset
from neural.optim import adamw_step
from neural.state import ModelState
from neural.tensor import no_grad
from neural.ops import normalize
from url_detection.model import check_vocab_fits, init_encoder_state
from url_detection.run_logger import PRETRAIN_COLUMNS, LossLogger
from url_detection.tacl_encoder import (
    PREFIX,
    TeacherHandle,
    encoder_forward,
    mlm_logits,
    mlm_loss,
    tacl_loss,
    total_pretrain_loss,
)

logger = logging.getLogger(__name__)


def mask_batch(seqs: Sequence[TokenSeq], rate: float, seed: int, vocab_size: int) -> List[MaskedSeq]:
    """Mask each sequence with its own derived seed; sequences with nothing to mask are dropped."""
    masked = []
    for i, seq in enumerate(seqs):
        child = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        try:
            masked.append(mask_tokens(seq, rate, seed=child, vocab_size=vocab_size))
        except NoMaskablePositions:
            continue
    return masked


class Pretrainer:
    def __init__(self, cfg: RunConfig, vocab: Vocab, seed: int = 0, state: Optional[ModelState] = None,
                 log_file: Optional[str] = None, progress: bool = True):
        check_vocab_fits(vocab, cfg)
        self.cfg = cfg
        self.vocab = vocab
        self.seed = seed
        self.state = state if state is not None else init_encoder_state(cfg, seed, vocab)
        self.teacher = TeacherHandle(self.state, ema=cfg.train.teacher_ema)
        self.loss_log = LossLogger(log_file, PRETRAIN_COLUMNS)
        self.progress = progress
        self.history: List[Dict] = []

    def step(self, urls: Sequence[str], step_seed: int) -> Optional[Dict]:
        enc, train = self.cfg.encoder, self.cfg.train
        clean = [encode(url, self.vocab, enc.max_len) for url in urls]
        masked = mask_batch(clean, train.mask_rate, step_seed, len(self.vocab))
        if not masked:
            return None
        clean_ids = np.stack([m.restore().ids for m in masked])
        attn_mask = np.stack([m.attn_mask for m in masked])

        _, teacher_final = self.teacher.forward((clean_ids, attn_mask), enc)
        self.state.zero_grad()
        rng = np.random.default_rng([self.seed, step_seed, 1])
        _, student_final = encoder_forward(masked, self.state, enc, training=True, rng=rng)
        mlm = mlm_loss(mlm_logits(student_final, self.state), masked)
        tacl = tacl_loss(student_final, teacher_final, [m.mask_positions for m in masked], train.tacl_tau, attn_mask)
        total = total_pretrain_loss(mlm, tacl, train.tacl_lambda)
        total.backward()
        adamw_step(self.state, lr=train.pretrain_lr, weight_decay=train.weight_decay)
        self.teacher.update(self.state)

        record = {"step": self.state.step_count, "mlm": mlm.item(), "tacl": tacl.item(), "total": total.item()}
        self.loss_log.log_step(**record)
        self.history.append(record)
        return record

    def run(self, corpus: Dataset, epochs: Optional[int] = None, batch_size: Optional[int] = None,
            max_steps: Optional[int] = None) -> ModelState:
        train = self.cfg.train
        epochs = train.pretrain_epochs if epochs is None else epochs
        batch_size = batch_size or train.batch_size
        max_steps = train.pretrain_max_steps if max_steps is None else max_steps
        urls = [r.raw for r in corpus.records]
        if epochs <= 0 or not urls:
            return self.state

        steps_per_epoch = -(-len(urls) // batch_size)
        total_steps = epochs * steps_per_epoch if not max_steps else min(max_steps, epochs * steps_per_epoch)
        logger.info("Pretraining on %d URLs: %d steps (batch %d, lambda=%s, tau=%s)",
                    len(urls), total_steps, batch_size, train.tacl_lambda, train.tacl_tau)

        done = 0
        bar = tqdm(total=total_steps, desc="pretrain", disable=not self.progress)
        for epoch in range(epochs):
            order = np.random.default_rng([self.seed, epoch]).permutation(len(urls))
            for start in range(0, len(order), batch_size):
                if done >= total_steps:
                    break
                record = self.step([urls[i] for i in order[start:start + batch_size]], step_seed=done)
                done += 1
                bar.update(1)
                if record is not None:
                    bar.set_postfix(loss=f"{record['total']:.3f}")
        bar.close()
        if not self.teacher.ema and not self.teacher.unchanged():
            raise RuntimeError("frozen teacher parameters changed during pretraining")
        self.state.meta["pretrain_steps"] = done
        return self.state


def pretrain(corpus: Dataset, cfg: RunConfig, vocab: Vocab, lam: Optional[float] = None, tau: Optional[float] = None,
             epochs: Optional[int] = None, batch_size: Optional[int] = None, seed: int = 0,
             max_steps: Optional[int] = None, log_file: Optional[str] = None, progress: bool = False) -> ModelState:
    cfg = cfg.override("train", tacl_lambda=lam, tacl_tau=tau)
    trainer = Pretrainer(cfg, vocab, seed=seed, log_file=log_file, progress=progress)
    return trainer.run(corpus, epochs=epochs, batch_size=batch_size, max_steps=max_steps)


def contrastive_separation(state: ModelState, teacher: ModelState, urls: Sequence[str], vocab: Vocab,
                           cfg: RunConfig, seed: int = 0) -> Dict[str, float]:
    """
    Mean cosine between each masked student state and its own teacher state,
    against the mean cosine to the other non-PAD teacher states of the sequence.
    """
    enc = cfg.encoder
    masked = mask_batch([encode(u, vocab, enc.max_len) for u in urls], cfg.train.mask_rate, seed, len(vocab))
    clean_ids = np.stack([m.restore().ids for m in masked])
    attn_mask = np.stack([m.attn_mask for m in masked])
    with no_grad():
        _, student = encoder_forward(masked, state, enc)
        _, teacher_final = encoder_forward((clean_ids, attn_mask), teacher, enc)
        s_unit = normalize(student, valid=attn_mask.astype(bool)).data
        t_unit = normalize(teacher_final, valid=attn_mask.astype(bool)).data

    positives, negatives = [], []
    for b, m in enumerate(masked):
        valid = np.flatnonzero(attn_mask[b])
        for i in m.mask_positions:
            sims = t_unit[b, valid] @ s_unit[b, i]
            is_self = valid == i
            positives.append(float(sims[is_self][0]))
            negatives.extend(float(s) for s in sims[~is_self])
    pos, neg = float(np.mean(positives)), float(np.mean(negatives)) if negatives else 0.0
    return {"positive": pos, "negative": neg, "margin": pos - neg}


def encoder_checksum(state: ModelState) -> str:
    return state.checksum(PREFIX)
