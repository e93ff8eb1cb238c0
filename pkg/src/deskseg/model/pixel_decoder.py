"""Pixel decoder: multi-scale token encoder plus per-pixel embedding head.

Encoder levels are projected to ``embed_dim`` by 1×1 convs, flattened to
token sequences and concatenated low resolution first.  Learnable
positional and level encodings (one row per token) are added to queries and
keys at every self-attention call.  The encoded sequence is split back into
maps; the 1/4 map comes from a 2× upsample of the encoded 1/8 map plus a
1×1-projected lateral skip from the backbone's 1/4 map.  Two 2×2 stride-2
transposed convs then lift it to full resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import nn
from .. import tensor as T
from ..tensor import DimensionError, Tensor
from .backbone import FeaturePyramid
from .config import ModelConfig

PREFIX = "pixel_decoder"


@dataclass
class EncodedPyramid:
    maps: dict[int, Tensor]  # level -> C_e×H_i×W_i
    key_pos: dict[int, Tensor]  # level -> (H_i·W_i)×C_e positional + level code
    pixel_embedding: Tensor  # C_e×H×W

    def __getitem__(self, level: int) -> Tensor:
        return self.maps[level]


def init_pixel_decoder(init: nn.ParamInit, cfg: ModelConfig) -> None:
    ce = cfg.embed_dim
    for lvl in cfg.encoder_levels:
        init.conv(f"{PREFIX}.proj{lvl}", cfg.backbone_channels[lvl - 1], ce, 1)
    k = cfg.num_tokens
    init.normal(f"{PREFIX}.pos_enc", (k, ce), cfg.init_std)
    init.normal(f"{PREFIX}.level_enc", (k, ce), cfg.init_std)
    for i in range(cfg.encoder_depth):
        p = f"{PREFIX}.encoder.layer{i}"
        init.layer_norm(f"{p}.norm1", ce)
        init.attention(f"{p}.attn", ce)
        init.layer_norm(f"{p}.norm2", ce)
        init.feed_forward(f"{p}.ffn", ce, cfg.ffn_mult * ce)
    if not cfg.encode_level1:
        init.conv(f"{PREFIX}.lateral", cfg.backbone_channels[0], ce, 1)
        h1, w1 = cfg.level_shape(1)
        init.normal(f"{PREFIX}.fine_pos_enc", (h1 * w1, ce), cfg.init_std)
        init.normal(f"{PREFIX}.fine_level_enc", (h1 * w1, ce), cfg.init_std)
    init.conv_transpose(f"{PREFIX}.up1", ce, ce)
    # small output scale keeps initial mask logits O(1) despite the raw dot product
    init.conv_transpose(f"{PREFIX}.up2", ce, ce, gain=cfg.pixel_embed_gain)


def embed_project(params: nn.Params, level: int, fmap: Tensor) -> Tensor:
    """1×1 conv to the embedding width, then flatten to (H·W)×C_e tokens."""
    return T.flatten_spatial(nn.conv(params, f"{PREFIX}.proj{level}", fmap))


def concat_levels(levels: list[Tensor]) -> tuple[Tensor, list[int]]:
    widths = {s.shape[1] for s in levels}
    if len(widths) != 1:
        raise DimensionError(f"levels disagree on embedding width: {sorted(widths)}")
    return T.concat(levels, axis=0), [s.shape[0] for s in levels]


def encoder_block(params: nn.Params, prefix: str, x: Tensor, pos: Tensor, heads: int, return_weights=False):
    h = nn.layer_norm(params, f"{prefix}.norm1", x)
    qk = T.add(h, pos)
    attn = nn.attention(params, f"{prefix}.attn", qk, qk, h, heads, return_weights=return_weights)
    if return_weights:
        attn, weights = attn
    x = T.add(x, attn)
    x = T.add(x, nn.feed_forward(params, f"{prefix}.ffn", nn.layer_norm(params, f"{prefix}.norm2", x)))
    return (x, weights) if return_weights else x


def encoder_forward(
    tokens: Tensor,
    pos_enc: Tensor,
    level_enc: Tensor,
    params: nn.Params,
    depth: int,
    heads: int,
    return_weights: bool = False,
):
    """Pre-norm transformer encoder over the concatenated token sequence."""
    if tokens.shape != pos_enc.shape or tokens.shape != level_enc.shape:
        raise DimensionError(
            f"tokens {tokens.shape}, positional {pos_enc.shape} and level {level_enc.shape} encodings differ"
        )
    pos = T.add(pos_enc, level_enc)
    x = tokens
    all_weights = []
    for i in range(depth):
        out = encoder_block(params, f"{PREFIX}.encoder.layer{i}", x, pos, heads, return_weights)
        if return_weights:
            x, w = out
            all_weights.append(w)
        else:
            x = out
    return (x, all_weights) if return_weights else x


def sine_position_map(channels: int, height: int, width: int) -> np.ndarray:
    """Fixed C×H×W code: sines and cosines of normalised y (first half) and x."""
    if channels % 4:
        raise DimensionError(f"sine position code needs channels divisible by 4, got {channels}")
    nf = channels // 4
    freqs = np.pi * 2.0 ** np.arange(nf)
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    ay = freqs[:, None, None] * ys[None, :, None] * np.ones((1, 1, width))
    ax = freqs[:, None, None] * xs[None, None, :] * np.ones((1, height, 1))
    return np.concatenate([np.sin(ay), np.cos(ay), np.sin(ax), np.cos(ax)], axis=0)


def add_position(fmap: Tensor) -> Tensor:
    c, h, w = fmap.shape
    return T.add(fmap, sine_position_map(c, h, w))


def split_unflatten(encoded: Tensor, geometry: list[tuple[int, int]]) -> list[Tensor]:
    sizes = [h * w for h, w in geometry]
    if sum(sizes) != encoded.shape[0]:
        raise DimensionError(f"{encoded.shape[0]} tokens do not match level geometry {geometry}")
    parts = T.split(encoded, sizes, axis=0)
    return [T.unflatten_spatial(p, h, w) for p, (h, w) in zip(parts, geometry)]


def lateral_upsample(params: nn.Params, coarse: Tensor, fine_features: Tensor) -> Tensor:
    _, h, w = coarse.shape
    up = T.interpolate(coarse, 2 * h, 2 * w, mode="bilinear")
    return T.add(up, nn.conv(params, f"{PREFIX}.lateral", fine_features))


def per_pixel_embed(params: nn.Params, fine: Tensor) -> Tensor:
    x = T.conv_transpose2d(fine, params[f"{PREFIX}.up1.weight"], params[f"{PREFIX}.up1.bias"])
    x = T.relu(x)
    return T.conv_transpose2d(x, params[f"{PREFIX}.up2.weight"], params[f"{PREFIX}.up2.bias"])


def pixel_decoder_forward(params: nn.Params, cfg: ModelConfig, pyramid: FeaturePyramid) -> EncodedPyramid:
    levels = cfg.encoder_levels
    seq, sizes = concat_levels([embed_project(params, lvl, pyramid[lvl]) for lvl in levels])
    pos_enc, level_enc = params[f"{PREFIX}.pos_enc"], params[f"{PREFIX}.level_enc"]
    encoded = encoder_forward(seq, pos_enc, level_enc, params, cfg.encoder_depth, cfg.encoder_heads)
    geometry = [tuple(pyramid[lvl].shape[1:]) for lvl in levels]
    maps = dict(zip(levels, split_unflatten(encoded, geometry)))
    if cfg.position_tagged_maps:
        # attention passes positions through keys only; tag values so queries
        # and the per-pixel embedding can tell identical-looking instances apart
        maps = {lvl: add_position(m) for lvl, m in maps.items()}
    pos_all = T.add(pos_enc, level_enc)
    key_pos = dict(zip(levels, T.split(pos_all, sizes, axis=0)))
    if not cfg.encode_level1:
        maps[1] = lateral_upsample(params, maps[2], pyramid[1])
        if cfg.position_tagged_maps:
            maps[1] = add_position(maps[1])
        key_pos[1] = T.add(params[f"{PREFIX}.fine_pos_enc"], params[f"{PREFIX}.fine_level_enc"])
    return EncodedPyramid(maps, key_pos, per_pixel_embed(params, maps[1]))


def token_geometry(cfg: ModelConfig) -> list[tuple[int, int]]:
    return [cfg.level_shape(lvl) for lvl in cfg.encoder_levels]

