from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 64
    in_channels: int = 1
    backbone_channels: tuple[int, int, int, int] = (16, 32, 64, 64)
    embed_dim: int = 32
    encoder_depth: int = 3
    encoder_heads: int = 4
    ffn_mult: int = 4
    position_tagged_maps: bool = True  # add a fixed sine code to decoded maps
    encode_level1: bool = False  # feed the 1/4 map to the encoder instead of the lateral path
    num_queries: int = 20  # 100 at full scale
    decoder_steps: int = 4
    decoder_heads: int = 4
    num_classes: int = 2  # defect, normal; a no-object logit is appended
    class_hidden: int = 32
    init_std: float = 0.02
    query_init_std: float = 0.02
    pixel_embed_gain: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.backbone_channels = tuple(self.backbone_channels)
        if self.height % 32 or self.width % 32:
            raise ValueError(f"input size {self.height}x{self.width} must be divisible by 32")
        if len(self.backbone_channels) != 4 or any(
            b < a for a, b in zip(self.backbone_channels, self.backbone_channels[1:])
        ):
            raise ValueError("backbone_channels must be four nondecreasing widths")
        if self.embed_dim % self.encoder_heads or self.embed_dim % self.decoder_heads:
            raise ValueError("embed_dim must be divisible by both head counts")
        if self.position_tagged_maps and self.embed_dim % 4:
            raise ValueError("position-tagged maps need embed_dim divisible by 4")

    @property
    def encoder_levels(self) -> tuple[int, ...]:
        """Pyramid levels in the encoder sequence, low resolution first."""
        return (4, 3, 2, 1) if self.encode_level1 else (4, 3, 2)

    def level_shape(self, level: int) -> tuple[int, int]:
        stride = 2 ** (level + 1)
        return self.height // stride, self.width // stride

    @property
    def num_tokens(self) -> int:
        return sum(h * w for h, w in map(self.level_shape, self.encoder_levels))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)
