"""Masked-attention query decoder and the instance mask / class heads.

Queries are refined once per pyramid level, coarse to fine (1/32, 1/16,
1/8, 1/4).  Before each step the current queries are dotted with the
per-pixel embedding to get soft masks; those masks, resized to the step's
level and thresholded at 0.5, decide which tokens each query may attend to.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.special import softmax as np_softmax

from .. import nn
from .. import tensor as T
from ..data.rle import EmptyMaskError, bbox_from_mask
from ..tensor import DimensionError, Tensor
from .config import ModelConfig
from .pixel_decoder import EncodedPyramid

PREFIX = "mask_decoder"
MASK_THRESHOLD = 0.5


def init_mask_decoder(init: nn.ParamInit, cfg: ModelConfig) -> None:
    ce = cfg.embed_dim
    init.normal(f"{PREFIX}.query_embed", (cfg.num_queries, ce), cfg.query_init_std)
    for step in range(cfg.decoder_steps):
        p = f"{PREFIX}.layer{step}"
        init.layer_norm(f"{p}.norm_cross", ce)
        init.attention(f"{p}.cross_attn", ce)
        init.layer_norm(f"{p}.norm_self", ce)
        init.attention(f"{p}.self_attn", ce)
        init.layer_norm(f"{p}.norm_ffn", ce)
        init.feed_forward(f"{p}.ffn", ce, cfg.ffn_mult * ce)
    # shared norm on queries before both heads keeps mask logits O(1)
    init.layer_norm(f"{PREFIX}.head_norm", ce)
    hidden = cfg.class_hidden
    init.linear(f"{PREFIX}.class_head.fc1", ce, hidden, gain=2**0.5)
    init.linear(f"{PREFIX}.class_head.fc2", hidden, hidden, gain=2**0.5)
    init.linear(f"{PREFIX}.class_head.out", hidden, cfg.num_classes + 1)


def step_level(step: int) -> int:
    """Pyramid level consumed at a decoder step: 4, 3, 2, 1, then around again."""
    return 4 - step % 4


def head_input(params: nn.Params, queries: Tensor) -> Tensor:
    return nn.layer_norm(params, f"{PREFIX}.head_norm", queries)


def mask_logits(queries: Tensor, pixel_embedding: Tensor) -> Tensor:
    if queries.shape[-1] != pixel_embedding.shape[0]:
        raise DimensionError(
            f"query width {queries.shape[-1]} != pixel embedding channels {pixel_embedding.shape[0]}"
        )
    return T.channel_dot(queries, pixel_embedding)


def predict_masks(queries: Tensor, pixel_embedding: Tensor) -> Tensor:
    """Soft masks N×H×W: sigmoid of the channel dot product."""
    return T.sigmoid(mask_logits(queries, pixel_embedding))


def attention_mask(masks: np.ndarray, height: int, width: int) -> np.ndarray:
    """Boolean N×(h·w) map of allowed positions.

    A query whose resized mask is below threshold everywhere may attend to
    every position instead.
    """
    masks = np.asarray(masks, dtype=np.float64)
    resized = T.interpolate_array(masks, height, width, mode="bilinear")
    allowed = resized.reshape(masks.shape[0], height * width) >= MASK_THRESHOLD
    allowed[~allowed.any(axis=1)] = True
    return allowed


def _canonical_order(rows: np.ndarray) -> np.ndarray:
    # sorting keys by content makes the key-axis reduction order independent
    # of query order, so permuting queries permutes outputs bit for bit
    return np.lexsort(rows.T[::-1])


def decoder_layer(
    params: nn.Params,
    step: int,
    queries: Tensor,
    level_map: Tensor,
    key_pos: Tensor,
    allowed: np.ndarray | None,
    heads: int,
    return_weights: bool = False,
):
    """One refinement: masked cross-attention, query self-attention, feed-forward."""
    p = f"{PREFIX}.layer{step}"
    tokens = T.flatten_spatial(level_map)
    h = nn.layer_norm(params, f"{p}.norm_cross", queries)
    cross = nn.attention(
        params, f"{p}.cross_attn", h, T.add(tokens, key_pos), tokens, heads, mask=allowed,
        return_weights=return_weights,
    )
    if return_weights:
        cross, weights = cross
    q = T.add(queries, cross)
    h = nn.layer_norm(params, f"{p}.norm_self", q)
    kv = T.getitem(h, _canonical_order(h.data))
    q = T.add(q, nn.attention(params, f"{p}.self_attn", h, kv, kv, heads))
    q = T.add(q, nn.feed_forward(params, f"{p}.ffn", nn.layer_norm(params, f"{p}.norm_ffn", q)))
    return (q, weights) if return_weights else q


@dataclass
class DecodeResult:
    queries: list[Tensor]  # Q_0 .. Q_L
    mask_logits: list[Tensor]  # logits of M_0 .. M_{L-1}, the masks that gated each step
    levels: list[int] = field(default_factory=list)
    attention_masks: list[np.ndarray] = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        return self.queries[-1]


def decode(params: nn.Params, cfg: ModelConfig, queries: Tensor, pyramid: EncodedPyramid) -> DecodeResult:
    result = DecodeResult([queries], [])
    pix = pyramid.pixel_embedding
    for step in range(cfg.decoder_steps):
        level = step_level(step)
        logits = mask_logits(head_input(params, queries), pix)
        _, h, w = pyramid[level].shape
        allowed = attention_mask(expit(logits.data), h, w)
        queries = decoder_layer(
            params, step, queries, pyramid[level], pyramid.key_pos[level], allowed, cfg.decoder_heads
        )
        result.queries.append(queries)
        result.mask_logits.append(logits)
        result.levels.append(level)
        result.attention_masks.append(allowed)
    return result


def predict_classes(params: nn.Params, queries: Tensor) -> Tensor:
    """Two-hidden-layer MLP giving N×(C+1) logits; the last column is no-object."""
    p = f"{PREFIX}.class_head"
    x = T.relu(nn.linear(params, f"{p}.fc1", head_input(params, queries)))
    x = T.relu(nn.linear(params, f"{p}.fc2", x))
    return nn.linear(params, f"{p}.out", x)


@dataclass
class InstancePrediction:
    query_index: int
    category_id: int
    score: float
    soft_mask: np.ndarray
    class_logits: np.ndarray
    bbox: tuple[int, int, int, int] | None

    @property
    def binary_mask(self) -> np.ndarray:
        return (self.soft_mask >= MASK_THRESHOLD).astype(np.uint8)


def finalize(
    params: nn.Params, final_queries: Tensor, pixel_embedding: Tensor, score_threshold: float = 0.5
) -> list[InstancePrediction]:
    masks = predict_masks(head_input(params, final_queries), pixel_embedding).data
    logits = predict_classes(params, final_queries).data
    return instances_from_outputs(masks, logits, score_threshold)


def instances_from_outputs(masks: np.ndarray, logits: np.ndarray, score_threshold: float = 0.5):
    probs = np_softmax(logits, axis=-1)
    num_real = logits.shape[1] - 1
    out = []
    for q in range(logits.shape[0]):
        if int(np.argmax(probs[q])) == num_real:
            continue
        cat = int(np.argmax(probs[q, :num_real]))
        score = float(probs[q, cat])
        if score < score_threshold:
            continue
        try:
            box = bbox_from_mask(masks[q] >= MASK_THRESHOLD)
        except EmptyMaskError:
            box = None
        out.append(InstancePrediction(q, cat, score, masks[q], logits[q], box))
    out.sort(key=lambda p: (-p.score, p.query_index))
    return out
