"""
Cross-layer multi-scale aggregation: all encoder layers are treated as the
channels of a (D x T) image, reduced by a conv pyramid, pooled to a fixed
token grid, projected, mixed by a gMLP block and averaged into f_url.
"""

from typing import Optional

import numpy as np

from config.errors import ShapeMismatch
from config.settings import ClmsaConfig, EncoderConfig
from neural import ops
from neural.state import ModelState, init_uniform_fan_in
from neural.tensor import Tensor, permute
from url_detection.tacl_encoder import HiddenStack

PREFIX = "clmsa."
SPATIAL_INIT_STD = 1e-3


def init_clmsa(state: ModelState, enc: EncoderConfig, cfg: ClmsaConfig, rng: np.random.Generator) -> None:
    channels = (enc.n_layers,) + cfg.channel_pyramid
    for i, (c_in, c_out) in enumerate(zip(channels, channels[1:])):
        std = np.sqrt(2.0 / (c_in * 9))
        state.add(f"{PREFIX}conv.{i}.weight", rng.normal(0.0, std, size=(c_out, c_in, 3, 3)))
        state.add(f"{PREFIX}conv.{i}.bn.gamma", np.ones(c_out))
        state.add(f"{PREFIX}conv.{i}.bn.beta", np.zeros(c_out))
        state.add(f"{PREFIX}conv.{i}.bn.running_mean", np.zeros(c_out), trainable=False)
        state.add(f"{PREFIX}conv.{i}.bn.running_var", np.ones(c_out), trainable=False)

    d_f, p = cfg.proj_dim, cfg.pool_out[0]
    wide = cfg.gmlp_expansion * d_f
    state.add(PREFIX + "proj.weight", init_uniform_fan_in(rng, (cfg.flat_width, d_f)))
    state.add(PREFIX + "proj.bias", np.zeros(d_f))
    state.add(PREFIX + "gmlp.ln.gamma", np.ones(d_f))
    state.add(PREFIX + "gmlp.ln.beta", np.zeros(d_f))
    state.add(PREFIX + "gmlp.in.weight", init_uniform_fan_in(rng, (d_f, wide)))
    state.add(PREFIX + "gmlp.in.bias", np.zeros(wide))
    state.add(PREFIX + "gmlp.gate_ln.gamma", np.ones(wide // 2))
    state.add(PREFIX + "gmlp.gate_ln.beta", np.zeros(wide // 2))
    state.add(PREFIX + "gmlp.spatial.weight", rng.normal(0.0, SPATIAL_INIT_STD, size=(p, p)))
    state.add(PREFIX + "gmlp.spatial.bias", np.ones(p))
    state.add(PREFIX + "gmlp.out.weight", init_uniform_fan_in(rng, (wide // 2, d_f)))
    state.add(PREFIX + "gmlp.out.bias", np.zeros(d_f))


def stack_and_permute(h: HiddenStack) -> Tensor:
    """(B, L, T, D) -> (B, L, D, T)."""
    layers = h.layers if isinstance(h, HiddenStack) else h
    if layers.ndim != 4:
        raise ShapeMismatch(f"hidden stack must be (B, L, T, D), got {layers.shape}")
    return permute(layers, (0, 1, 3, 2))


def conv_pyramid(x: Tensor, state: ModelState, cfg: ClmsaConfig, training: bool = False) -> Tensor:
    """conv3x3 -> batchnorm -> relu per pyramid level; spatial dims are preserved."""
    if x.ndim != 4:
        raise ShapeMismatch(f"conv pyramid expects (B, L, D, T), got {x.shape}")
    expected = state[f"{PREFIX}conv.0.weight"].shape[1]
    if x.shape[1] != expected:
        raise ShapeMismatch(f"conv pyramid built for {expected} input layers, got {x.shape[1]}")
    for i in range(len(cfg.channel_pyramid)):
        p = f"{PREFIX}conv.{i}."
        x = ops.conv2d(x, state[p + "weight"])
        x = ops.batchnorm(x, state[p + "bn.gamma"], state[p + "bn.beta"],
                          state[p + "bn.running_mean"].data, state[p + "bn.running_var"].data, training)
        x = ops.relu(x)
    return x


def pool_project(x: Tensor, state: ModelState, cfg: ClmsaConfig) -> Tensor:
    """Pool to (P, Q), flatten channel-major per token to (B, P, C*Q), project to d_f."""
    p, q = cfg.pool_out
    pooled = ops.adaptive_avg_pool2d(x, (p, q))
    b, c = pooled.shape[:2]
    tokens = permute(pooled, (0, 2, 1, 3)).reshape(b, p, c * q)
    weight = state[PREFIX + "proj.weight"]
    if weight.shape[0] != c * q:
        raise ShapeMismatch(f"projection expects width {weight.shape[0]}, got {c}x{q}={c * q}")
    return ops.linear(tokens, weight, state[PREFIX + "proj.bias"])


def spatial_gate(v: Tensor, state: ModelState) -> Tensor:
    """v' = SpatialW @ LN(v) + bias, mixing along the token axis."""
    p = PREFIX + "gmlp."
    normed = ops.layernorm(v, state[p + "gate_ln.gamma"], state[p + "gate_ln.beta"])
    bias = state[p + "spatial.bias"]
    return ops.matmul(state[p + "spatial.weight"], normed) + bias.reshape(bias.shape[0], 1)


def gmlp_block(x: Tensor, state: ModelState, cfg: Optional[ClmsaConfig] = None) -> Tensor:
    p = PREFIX + "gmlp."
    if x.ndim != 3 or x.shape[1] != state[p + "spatial.weight"].shape[0]:
        raise ShapeMismatch(f"gMLP expects (B, {state[p + 'spatial.weight'].shape[0]}, d_f), got {x.shape}")
    h = ops.layernorm(x, state[p + "ln.gamma"], state[p + "ln.beta"])
    h = ops.gelu(ops.linear(h, state[p + "in.weight"], state[p + "in.bias"]))
    half = h.shape[-1] // 2
    u, v = h[..., :half], h[..., half:]
    gated = u * spatial_gate(v, state)
    return x + ops.linear(gated, state[p + "out.weight"], state[p + "out.bias"])


def clmsa_forward(h: HiddenStack, state: ModelState, cfg: ClmsaConfig, training: bool = False) -> Tensor:
    """f_url, (B, d_f): the token-axis mean of the gMLP output."""
    x = conv_pyramid(stack_and_permute(h), state, cfg, training)
    tokens = gmlp_block(pool_project(x, state, cfg), state, cfg)
    return tokens.mean(axis=1)
