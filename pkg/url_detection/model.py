"""
The full detector: encoder -> CLMSA -> f_url, IP features -> IP branch ->
f_ip, both fused by BMMC into class logits. Also batch assembly and the
label/class-id mapping shared by training and inference.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from config.errors import ConfigError
from config.settings import RunConfig
from data_processing.ip_featurizer import IpEmbeddingTable, featurize_ips
from data_processing.tokenizer import Vocab, encode_batch
from data_processing.url_corpus import Label, UrlRecord
from neural.ops import cross_entropy, softmax
from neural.state import ModelState
from neural.tensor import Tensor, no_grad
from url_detection import bmmc, clmsa, tacl_encoder

logger = logging.getLogger(__name__)

VOCAB_META_KEY = "vocab"
CLASS_NAMES = {2: ["benign", "malicious"], 3: ["benign", "malicious", "phishing"]}


def label_to_class(label: Label, n_classes: int) -> int:
    if label is Label.BENIGN:
        return 0
    if n_classes == 2 or label is Label.MALICIOUS:
        return 1
    return 2


def class_targets(records: Sequence[UrlRecord], n_classes: int) -> np.ndarray:
    return np.asarray([label_to_class(r.label, n_classes) for r in records], dtype=np.int64)


@dataclass
class Batch:
    ids: np.ndarray         # (B, T)
    attn_mask: np.ndarray   # (B, T)
    ip_feats: np.ndarray    # (B, F)
    targets: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.ids)


def make_batch(records: Sequence[UrlRecord], vocab: Vocab, cfg: RunConfig,
               ip_table: Optional[IpEmbeddingTable] = None, with_targets: bool = True) -> Batch:
    ids, mask = encode_batch([r.raw for r in records], vocab, cfg.encoder.max_len)
    feats = featurize_ips([r.ip for r in records], ip_table)
    if feats.shape[1] != cfg.bmmc.ip_dim:
        raise ConfigError(f"IP features have dimension {feats.shape[1]} but bmmc.ip_dim is {cfg.bmmc.ip_dim}")
    targets = class_targets(records, cfg.bmmc.n_classes) if with_targets else None
    return Batch(ids, mask, feats, targets)


def iter_batches(records: Sequence[UrlRecord], batch_size: int, order: Optional[np.ndarray] = None,
                 min_last: int = 1):
    """A trailing batch shorter than min_last is folded into the one before it."""
    order = np.arange(len(records)) if order is None else order
    starts = list(range(0, len(order), batch_size))
    if len(starts) > 1 and len(order) - starts[-1] < min_last:
        starts.pop()
    for k, start in enumerate(starts):
        end = starts[k + 1] if k + 1 < len(starts) else len(order)
        yield [records[i] for i in order[start:end]]


def run_config_of(state: ModelState) -> RunConfig:
    return RunConfig.from_dict(state.config)


def vocab_of(state: ModelState) -> Optional[Vocab]:
    data = state.meta.get(VOCAB_META_KEY)
    return Vocab.from_dict(data) if data is not None else None


def check_vocab_fits(vocab: Vocab, cfg: RunConfig) -> None:
    if len(vocab) > cfg.encoder.vocab_size:
        raise ConfigError(f"vocab has {len(vocab)} pieces but encoder.vocab_size is {cfg.encoder.vocab_size}")


def init_encoder_state(cfg: RunConfig, seed: int, vocab: Optional[Vocab] = None) -> ModelState:
    """Encoder-only state for pretraining."""
    state = ModelState(config=cfg.to_dict())
    tacl_encoder.init_encoder(state, cfg.encoder, np.random.default_rng([seed, 0]))
    if vocab is not None:
        check_vocab_fits(vocab, cfg)
        state.meta[VOCAB_META_KEY] = vocab.to_dict()
    return state


def init_model_state(cfg: RunConfig, seed: int, vocab: Optional[Vocab] = None) -> ModelState:
    """Encoder, CLMSA and BMMC parameters; the encoder part matches init_encoder_state(seed)."""
    state = init_encoder_state(cfg, seed, vocab)
    clmsa.init_clmsa(state, cfg.encoder, cfg.clmsa, np.random.default_rng([seed, 1]))
    bmmc.init_bmmc(state, cfg.clmsa.proj_dim, cfg.bmmc, np.random.default_rng([seed, 2]))
    logger.info("Initialised model: %d trainable parameters", state.num_params())
    return state


@dataclass
class ModelOutput:
    logits: Tensor
    f_url: Tensor
    f_ip: Tensor
    fused: bmmc.FusedOutput


def forward(state: ModelState, batch: Batch, cfg: RunConfig, training: bool = False,
            rng: Optional[np.random.Generator] = None, zero_ip: bool = False) -> ModelOutput:
    hidden, _ = tacl_encoder.encoder_forward((batch.ids, batch.attn_mask), state, cfg.encoder, training, rng)
    f_url = clmsa.clmsa_forward(hidden, state, cfg.clmsa, training)
    f_ip = bmmc.ip_branch(batch.ip_feats, state)
    if zero_ip:
        f_ip = Tensor(np.zeros(f_ip.shape, dtype=f_ip.dtype))
    fused = bmmc.bmmc_forward(f_url, f_ip, state, cfg.bmmc, training, rng)
    return ModelOutput(fused.logits, f_url, f_ip, fused)


def batch_loss(state: ModelState, batch: Batch, cfg: RunConfig, training: bool = False,
               rng: Optional[np.random.Generator] = None, zero_ip: bool = False) -> Tensor:
    return cross_entropy(forward(state, batch, cfg, training, rng, zero_ip).logits, batch.targets)


def predict_proba(state: ModelState, batch: Batch, cfg: RunConfig, zero_ip: bool = False) -> np.ndarray:
    with no_grad():
        logits = forward(state, batch, cfg, training=False, zero_ip=zero_ip).logits
        return softmax(logits, axis=-1).data.astype(np.float64)


def mean_loss(state: ModelState, records: Sequence[UrlRecord], vocab: Vocab, cfg: RunConfig, batch_size: int,
              ip_table: Optional[IpEmbeddingTable] = None, zero_ip: bool = False) -> float:
    """Example-weighted mean cross-entropy in inference mode."""
    total, count = 0.0, 0
    with no_grad():
        for chunk in iter_batches(records, batch_size):
            batch = make_batch(chunk, vocab, cfg, ip_table)
            loss = batch_loss(state, batch, cfg, training=False, zero_ip=zero_ip)
            total += loss.item() * len(batch)
            count += len(batch)
    return total / max(count, 1)


def class_names(n_classes: int) -> List[str]:
    return CLASS_NAMES[n_classes]
