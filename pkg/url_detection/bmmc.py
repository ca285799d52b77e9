"""
IP branch and the blockwise multimodal coupler: URL and IP features are cut
into fixed-size channel blocks, a joint context scores every block, scores
are rescaled to [alpha_min, 1], blocks are gated (and randomly dropped while
training) and the features are reassembled for the classification head.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config.errors import ShapeMismatch
from config.settings import BmmcConfig
from neural import ops
from neural.state import ModelState, init_uniform_fan_in
from neural.tensor import Tensor, as_tensor, concat

PREFIX = "bmmc."


@dataclass
class ModalityBlocks:
    blocks: List[Tensor]          # per modality (B, N_m, C_b, D_ext)
    channels: List[int]           # C_m before padding
    pad_masks: List[np.ndarray]   # per modality (N_m, C_b), True on padded channels

    @property
    def n_blocks(self) -> List[int]:
        return [b.shape[1] for b in self.blocks]

    @property
    def total_blocks(self) -> int:
        return sum(self.n_blocks)


@dataclass
class FusedOutput:
    features: List[Tensor]        # per modality (B, C_m, D_ext)
    alpha: Tensor                 # (B, N_total)
    scores: Tensor                # softmax before rescaling
    keep_mask: np.ndarray         # (B, N_total)
    logits: Optional[Tensor] = None


def n_blocks_for(channels: int, block_size: int) -> int:
    return -(-channels // block_size)


def init_bmmc(state: ModelState, d_f: int, cfg: BmmcConfig, rng: np.random.Generator) -> None:
    n_total = 2 * n_blocks_for(d_f, cfg.block_size)
    state.add(PREFIX + "ip.weight", init_uniform_fan_in(rng, (cfg.ip_dim, d_f)))
    state.add(PREFIX + "joint.weight", init_uniform_fan_in(rng, (cfg.block_size, cfg.context_dim)))
    state.add(PREFIX + "joint.bn.gamma", np.ones(cfg.context_dim))
    state.add(PREFIX + "joint.bn.beta", np.zeros(cfg.context_dim))
    state.add(PREFIX + "joint.bn.running_mean", np.zeros(cfg.context_dim), trainable=False)
    state.add(PREFIX + "joint.bn.running_var", np.ones(cfg.context_dim), trainable=False)
    state.add(PREFIX + "attn.weight", init_uniform_fan_in(rng, (cfg.context_dim, n_total)))
    state.add(PREFIX + "attn.bias", np.zeros(n_total))
    state.add(PREFIX + "head.weight", init_uniform_fan_in(rng, (2 * d_f, cfg.n_classes)))
    state.add(PREFIX + "head.bias", np.zeros(cfg.n_classes))


def ip_branch(feat, state: ModelState) -> Tensor:
    """f_ip = relu(IP_embed @ W_ip)."""
    weight = state[PREFIX + "ip.weight"]
    feat = as_tensor(np.asarray(feat, dtype=weight.dtype) if not isinstance(feat, Tensor) else feat)
    if feat.ndim != 2 or feat.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"IP features must be (B, {weight.shape[0]}), got {feat.shape}")
    return ops.relu(ops.matmul(feat, weight))


def partition_blocks(features: Sequence[Tensor], block_size: int) -> ModalityBlocks:
    blocks, channels, pad_masks = [], [], []
    for x in features:
        if x.ndim == 2:
            x = x.reshape(x.shape[0], x.shape[1], 1)
        b, c, d = x.shape
        n = n_blocks_for(c, block_size)
        pad = n * block_size - c
        if pad:
            x = concat([x, Tensor(np.zeros((b, pad, d), dtype=x.dtype))], axis=1)
        mask = np.zeros(n * block_size, dtype=bool)
        mask[c:] = True
        blocks.append(x.reshape(b, n, block_size, d))
        channels.append(c)
        pad_masks.append(mask.reshape(n, block_size))
    return ModalityBlocks(blocks, channels, pad_masks)


def reconstruct(blocks: ModalityBlocks) -> List[Tensor]:
    """Inverse of partition_blocks: back to (B, C_m, D_ext) with padding dropped."""
    out = []
    for x, c in zip(blocks.blocks, blocks.channels):
        b, n, cb, d = x.shape
        out.append(x.reshape(b, n * cb, d)[:, :c, :])
    return out


def global_context(blocks: ModalityBlocks, state: ModelState, training: bool = False) -> Tuple[Tensor, Tensor]:
    """
    g_raw: sum over modalities of the D_ext-average of each modality's block
    sum, (B, C_b). g: relu(batchnorm(g_raw @ W_j)), (B, d_ctx).
    """
    if not blocks.blocks:
        raise ShapeMismatch("global context needs at least one modality")
    block_size = blocks.blocks[0].shape[2]
    if any(x.shape[2] != block_size for x in blocks.blocks):
        raise ShapeMismatch(f"block sizes differ: {[x.shape for x in blocks.blocks]}")
    g_raw = None
    for x in blocks.blocks:
        g_m = x.sum(axis=1).mean(axis=-1)
        g_raw = g_m if g_raw is None else g_raw + g_m
    p = PREFIX + "joint."
    joint = ops.matmul(g_raw, state[p + "weight"])
    g = ops.relu(ops.batchnorm(joint, state[p + "bn.gamma"], state[p + "bn.beta"],
                               state[p + "bn.running_mean"].data, state[p + "bn.running_var"].data, training))
    return g_raw, g


def rescale(scores: Tensor, alpha_min: float) -> Tensor:
    return scores * (1.0 - alpha_min) + alpha_min


def block_attention(g: Tensor, state: ModelState, alpha_min: float) -> Tuple[Tensor, Tensor]:
    """(alpha, softmax scores): one score per block across all modalities, softmaxed jointly."""
    raw = ops.linear(g, state[PREFIX + "attn.weight"], state[PREFIX + "attn.bias"])
    scores = ops.softmax(raw, axis=-1)
    return rescale(scores, alpha_min), scores


def sample_block_mask(shape: Tuple[int, int], p: float, rng: Optional[np.random.Generator], training: bool) -> np.ndarray:
    """Bernoulli(1-p) keep mask per (example, block); all ones at inference."""
    if not training or p == 0.0:
        return np.ones(shape)
    rng = rng if rng is not None else np.random.default_rng(0)
    return (rng.random(shape) >= p).astype(np.float64)


def apply_block_dropout(blocks: ModalityBlocks, alpha: Tensor, p: float, rng: Optional[np.random.Generator],
                        training: bool) -> Tuple[List[Tensor], np.ndarray]:
    """
    x_i <- x_i * m_i * alpha_i, then reshape back with padding dropped. Kept
    blocks are not rescaled by 1/(1-p).
    """
    b = alpha.shape[0]
    if alpha.shape[1] != blocks.total_blocks:
        raise ShapeMismatch(f"{alpha.shape[1]} attention weights for {blocks.total_blocks} blocks")
    keep = sample_block_mask((b, blocks.total_blocks), p, rng, training).astype(alpha.dtype)
    gate = alpha * keep

    gated, start = [], 0
    for x in blocks.blocks:
        n = x.shape[1]
        weights = gate[:, start:start + n].reshape(b, n, 1, 1)
        gated.append(x * weights)
        start += n
    return reconstruct(ModalityBlocks(gated, blocks.channels, blocks.pad_masks)), keep


def classify(x_url: Tensor, x_ip: Tensor, state: ModelState) -> Tensor:
    if x_url.ndim != 2 or x_url.shape != x_ip.shape:
        raise ShapeMismatch(f"head inputs must match: {x_url.shape} vs {x_ip.shape}")
    weight = state[PREFIX + "head.weight"]
    if weight.shape[0] != x_url.shape[1] + x_ip.shape[1]:
        raise ShapeMismatch(f"head expects {weight.shape[0]} features, got {x_url.shape[1] + x_ip.shape[1]}")
    return ops.linear(concat([x_url, x_ip], axis=1), weight, state[PREFIX + "head.bias"])


def bmmc_forward(f_url: Tensor, f_ip: Tensor, state: ModelState, cfg: BmmcConfig, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> FusedOutput:
    blocks = partition_blocks([f_url, f_ip], cfg.block_size)
    _, g = global_context(blocks, state, training)
    alpha, scores = block_attention(g, state, cfg.alpha_min)
    (x_url, x_ip), keep = apply_block_dropout(blocks, alpha, cfg.block_dropout, rng, training)
    b = f_url.shape[0]
    logits = classify(x_url.reshape(b, -1), x_ip.reshape(b, -1), state)
    return FusedOutput([x_url, x_ip], alpha, scores, keep, logits)
