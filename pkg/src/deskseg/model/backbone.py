"""Small convolutional pyramid producing maps at strides 4, 8, 16 and 32.

A 4×4 stride-4 stem gives the 1/4 map; three stages of
(3×3 conv -> layer norm -> relu) × 2, the first conv of each at stride 2,
give the rest.  Layer norm runs over channels at each pixel, which keeps
batch-size-1 training deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

from .. import nn
from .. import tensor as T
from ..tensor import Tensor
from .config import ModelConfig

PREFIX = "backbone"


class GeometryError(ValueError):
    pass


@dataclass
class FeaturePyramid:
    maps: tuple[Tensor, Tensor, Tensor, Tensor]  # F1..F4
    input_size: tuple[int, int]

    def __getitem__(self, level: int) -> Tensor:
        return self.maps[level - 1]


def init_backbone(init: nn.ParamInit, cfg: ModelConfig) -> None:
    c = cfg.backbone_channels
    init.conv(f"{PREFIX}.stem", cfg.in_channels, c[0], 4)
    init.layer_norm(f"{PREFIX}.stem_norm", c[0])
    for s in range(1, 4):
        for j, cin in enumerate((c[s - 1], c[s])):
            init.conv(f"{PREFIX}.stage{s}.conv{j}", cin, c[s], 3)
            init.layer_norm(f"{PREFIX}.stage{s}.norm{j}", c[s])


def _block(params, prefix: str, x: Tensor, stride: int) -> Tensor:
    x = nn.conv(params, f"{prefix}.conv0", x, stride=stride, padding=1)
    x = T.relu(nn.layer_norm(params, f"{prefix}.norm0", x, axis=0))
    x = nn.conv(params, f"{prefix}.conv1", x, stride=1, padding=1)
    return T.relu(nn.layer_norm(params, f"{prefix}.norm1", x, axis=0))


def backbone_forward(image: Tensor, params: nn.Params) -> FeaturePyramid:
    image = T.as_tensor(image)
    if image.ndim != 3:
        raise GeometryError(f"expected a C×H×W image, got shape {image.shape}")
    _, h, w = image.shape
    if h % 32 or w % 32:
        raise GeometryError(f"image extents {h}x{w} must be divisible by 32")
    x = nn.conv(params, f"{PREFIX}.stem", image, stride=4)
    x = T.relu(nn.layer_norm(params, f"{PREFIX}.stem_norm", x, axis=0))
    maps = [x]
    for s in range(1, 4):
        x = _block(params, f"{PREFIX}.stage{s}", x, stride=2)
        maps.append(x)
    return FeaturePyramid(tuple(maps), (h, w))
