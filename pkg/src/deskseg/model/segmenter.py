"""Full model: backbone -> pixel decoder -> query decoder -> heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import nn
from .. import tensor as T
from ..tensor import Tensor
from .backbone import FeaturePyramid, backbone_forward, init_backbone
from .config import ModelConfig
from .mask_decoder import (
    PREFIX as DECODER_PREFIX,
    DecodeResult,
    InstancePrediction,
    decode,
    head_input,
    init_mask_decoder,
    instances_from_outputs,
    mask_logits,
    predict_classes,
)
from .pixel_decoder import EncodedPyramid, init_pixel_decoder, pixel_decoder_forward


def init_params(cfg: ModelConfig) -> nn.Params:
    params: nn.Params = {}
    init = nn.ParamInit(params, cfg.seed)
    init_backbone(init, cfg)
    init_pixel_decoder(init, cfg)
    init_mask_decoder(init, cfg)
    return params


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init_params(cfg).items()}


@dataclass
class ModelOutput:
    pyramid: FeaturePyramid
    encoded: EncodedPyramid
    decoded: DecodeResult
    # one entry per supervised layer; the last is the final prediction
    mask_logits: list[Tensor]
    class_logits: list[Tensor]

    @property
    def final_masks(self) -> np.ndarray:
        return T.sigmoid(self.mask_logits[-1]).data

    @property
    def final_logits(self) -> np.ndarray:
        return self.class_logits[-1].data


def forward(params: nn.Params, cfg: ModelConfig, image, with_aux: bool = True) -> ModelOutput:
    pyramid = backbone_forward(T.as_tensor(image), params)
    encoded = pixel_decoder_forward(params, cfg, pyramid)
    decoded = decode(params, cfg, params[f"{DECODER_PREFIX}.query_embed"], encoded)
    final_q = decoded.final
    masks = [mask_logits(head_input(params, final_q), encoded.pixel_embedding)]
    classes = [predict_classes(params, final_q)]
    if with_aux:
        masks = decoded.mask_logits + masks
        classes = [predict_classes(params, q) for q in decoded.queries[:-1]] + classes
    return ModelOutput(pyramid, encoded, decoded, masks, classes)


def predict(params: nn.Params, cfg: ModelConfig, image, score_threshold: float = 0.5) -> list[InstancePrediction]:
    out = forward(nn.detached(params), cfg, image, with_aux=False)
    return instances_from_outputs(out.final_masks, out.final_logits, score_threshold)
