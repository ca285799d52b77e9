"""
Pre-norm transformer encoder over URL subword ids, plus the masked-LM and
token-aware contrastive objectives used to pretrain it against a frozen
teacher copy.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from config.errors import EmptyMaskSet, ShapeMismatch
from config.settings import EncoderConfig
from data_processing.tokenizer import MaskedSeq, TokenSeq
from neural import ops
from neural.state import ModelState, init_normal
from neural.tensor import Tensor, concat, no_grad, permute

logger = logging.getLogger(__name__)

PREFIX = "encoder."
MLM_BIAS = "mlm.bias"


@dataclass
class HiddenStack:
    """Every transformer layer's output, (B, L, T, D); embeddings excluded."""

    layers: Tensor

    @property
    def n_layers(self) -> int:
        return self.layers.shape[1]


SeqInput = Union[TokenSeq, MaskedSeq, Sequence[Union[TokenSeq, MaskedSeq]], Tuple[np.ndarray, np.ndarray]]


def as_batch(seq: SeqInput) -> Tuple[np.ndarray, np.ndarray]:
    """(ids, attn_mask) as (B, T) int arrays from one sequence, a list, or an array pair."""
    if isinstance(seq, (TokenSeq, MaskedSeq)):
        return seq.ids[None, :], seq.attn_mask[None, :]
    if isinstance(seq, tuple) and len(seq) == 2 and isinstance(seq[0], np.ndarray):
        ids, mask = seq
        return np.atleast_2d(ids), np.atleast_2d(mask)
    return np.stack([s.ids for s in seq]), np.stack([s.attn_mask for s in seq])


def init_encoder(state: ModelState, cfg: EncoderConfig, rng: np.random.Generator) -> None:
    d, hidden = cfg.hidden, cfg.hidden * cfg.ffn_mult
    state.add(PREFIX + "tok_emb", init_normal(rng, (cfg.vocab_size, d)))
    state.add(PREFIX + "pos_emb", init_normal(rng, (cfg.max_len, d)))
    for layer in range(cfg.n_layers):
        p = f"{PREFIX}layers.{layer}."
        state.add(p + "ln1.gamma", np.ones(d))
        state.add(p + "ln1.beta", np.zeros(d))
        for name in ("wq", "wk", "wv", "wo"):
            state.add(p + f"attn.{name}", init_normal(rng, (d, d)))
        # no key bias: it shifts every logit of a query equally
        state.add(p + "attn.bq", np.zeros(d))
        state.add(p + "attn.bv", np.zeros(d))
        state.add(p + "attn.bo", np.zeros(d))
        state.add(p + "ln2.gamma", np.ones(d))
        state.add(p + "ln2.beta", np.zeros(d))
        state.add(p + "ffn.w1", init_normal(rng, (d, hidden)))
        state.add(p + "ffn.b1", np.zeros(hidden))
        state.add(p + "ffn.w2", init_normal(rng, (hidden, d)))
        state.add(p + "ffn.b2", np.zeros(d))
    state.add(PREFIX + "ln_f.gamma", np.ones(d))
    state.add(PREFIX + "ln_f.beta", np.zeros(d))
    state.add(MLM_BIAS, np.zeros(cfg.vocab_size))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return permute(x.reshape(b, t, n_heads, d // n_heads), (0, 2, 1, 3))


def _self_attention(x: Tensor, state: ModelState, p: str, cfg: EncoderConfig, key_mask: np.ndarray,
                    training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    b, t, d = x.shape
    q = _split_heads(ops.linear(x, state[p + "wq"], state[p + "bq"]), cfg.n_heads)
    k = _split_heads(ops.linear(x, state[p + "wk"]), cfg.n_heads)
    v = _split_heads(ops.linear(x, state[p + "wv"], state[p + "bv"]), cfg.n_heads)
    scores = ops.matmul(q, permute(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(cfg.head_dim))
    attn = ops.softmax(scores, axis=-1, mask=key_mask)
    attn = ops.dropout(attn, cfg.dropout, rng, training)
    context = permute(ops.matmul(attn, v), (0, 2, 1, 3)).reshape(b, t, d)
    return ops.linear(context, state[p + "wo"], state[p + "bo"])


def encoder_forward(seq: SeqInput, state: ModelState, cfg: EncoderConfig, training: bool = False,
                    rng: Optional[np.random.Generator] = None) -> Tuple[HiddenStack, Tensor]:
    """
    Returns the per-layer hidden stack and the final-layer-normed states.
    Hidden states at PAD positions are held at zero after every layer, so the
    result does not depend on what ids sit under PAD.
    """
    ids, attn_mask = as_batch(seq)
    if ids.shape[1] != cfg.max_len or attn_mask.shape != ids.shape:
        raise ShapeMismatch(f"encoder expects (B, {cfg.max_len}) ids and mask, got {ids.shape} / {attn_mask.shape}")
    if training and rng is None:
        rng = np.random.default_rng(0)

    dtype = state.dtype
    keep = attn_mask.astype(dtype)[:, :, None]
    key_mask = attn_mask.astype(bool)[:, None, None, :]

    x = state[PREFIX + "tok_emb"][ids] + state[PREFIX + "pos_emb"]
    x = ops.dropout(x * keep, cfg.dropout, rng, training)

    outputs: List[Tensor] = []
    for layer in range(cfg.n_layers):
        p = f"{PREFIX}layers.{layer}."
        h = ops.layernorm(x, state[p + "ln1.gamma"], state[p + "ln1.beta"])
        x = x + ops.dropout(_self_attention(h, state, p + "attn.", cfg, key_mask, training, rng),
                            cfg.dropout, rng, training)
        h = ops.layernorm(x, state[p + "ln2.gamma"], state[p + "ln2.beta"])
        ff = ops.linear(ops.gelu(ops.linear(h, state[p + "ffn.w1"], state[p + "ffn.b1"])),
                        state[p + "ffn.w2"], state[p + "ffn.b2"])
        x = (x + ops.dropout(ff, cfg.dropout, rng, training)) * keep
        outputs.append(x)

    b, t, d = x.shape
    stack = concat([o.reshape(b, 1, t, d) for o in outputs], axis=1)
    final = ops.layernorm(x, state[PREFIX + "ln_f.gamma"], state[PREFIX + "ln_f.beta"]) * keep
    return HiddenStack(stack), final


def mlm_logits(final: Tensor, state: ModelState) -> Tensor:
    """Vocabulary logits through the tied token embedding, (B, T, V)."""
    return ops.matmul(final, permute(state[PREFIX + "tok_emb"], (1, 0))) + state[MLM_BIAS]


def _mask_indices(mask_positions: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    if not len(mask_positions) or any(len(p) == 0 for p in mask_positions):
        raise EmptyMaskSet("every example needs at least one masked position")
    rows = np.concatenate([np.full(len(p), b, dtype=np.int64) for b, p in enumerate(mask_positions)])
    cols = np.concatenate([np.asarray(p, dtype=np.int64) for p in mask_positions])
    return rows, cols


def mlm_loss(logits: Tensor, masked: Union[MaskedSeq, Sequence[MaskedSeq]]) -> Tensor:
    """Mean over every masked position of -log p(original id)."""
    masked = [masked] if isinstance(masked, MaskedSeq) else list(masked)
    rows, cols = _mask_indices([m.mask_positions for m in masked])
    targets = np.concatenate([m.original_ids for m in masked]).astype(np.int64)
    log_probs = ops.log_softmax(logits[rows, cols], axis=-1)
    return -log_probs[np.arange(len(targets)), targets].mean()


def tacl_loss(student_final: Tensor, teacher_final: Union[Tensor, np.ndarray], mask_positions: Sequence[np.ndarray],
              tau: float, attn_mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Token-aware contrastive loss: each masked student state must pick out its
    own teacher state among the teacher states of the same sequence.
    Summed over masked positions, averaged over the batch; no gradient
    reaches the teacher.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    b, t, d = student_final.shape
    teacher = Tensor(teacher_final.data if isinstance(teacher_final, Tensor) else teacher_final)
    if teacher.shape != student_final.shape:
        raise ShapeMismatch(f"student {student_final.shape} vs teacher {teacher.shape}")
    valid = np.ones((b, t), dtype=bool) if attn_mask is None else attn_mask.astype(bool)
    rows, cols = _mask_indices(mask_positions)

    student_unit = ops.normalize(student_final[rows, cols], valid=valid[rows, cols])
    teacher_unit = ops.normalize(teacher, valid=valid)
    sims = ops.matmul(student_unit.reshape(len(rows), 1, d), permute(teacher_unit[rows], (0, 2, 1)))
    log_probs = ops.log_softmax(sims.reshape(len(rows), t) * (1.0 / tau), axis=-1, mask=valid[rows])
    return -log_probs[np.arange(len(rows)), cols].sum() * (1.0 / b)


def total_pretrain_loss(mlm, tacl, lam: float):
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if lam == 0:
        return mlm
    return mlm + tacl * lam


class TeacherHandle:
    """
    Gradient-free copy of the encoder. Frozen at the snapshot moment unless
    `ema` > 0, in which case `update` blends the student in after each step.
    """

    def __init__(self, student: ModelState, ema: float = 0.0):
        self.state = student.snapshot()
        self.ema = ema
        self.frozen_checksum = self.state.checksum(PREFIX)

    def forward(self, seq: SeqInput, cfg: EncoderConfig) -> Tuple[HiddenStack, Tensor]:
        with no_grad():
            return encoder_forward(seq, self.state, cfg, training=False)

    def update(self, student: ModelState) -> None:
        if self.ema > 0:
            self.state.blend_from(student, self.ema, prefix=PREFIX)

    def checksum(self) -> str:
        return self.state.checksum(PREFIX)

    def unchanged(self) -> bool:
        return self.checksum() == self.frozen_checksum
