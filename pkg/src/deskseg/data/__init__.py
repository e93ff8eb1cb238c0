from .coco import (
    DEFECT,
    NORMAL,
    AnnotationRecord,
    Category,
    CocoDataset,
    ImageRecord,
    ParseError,
    ValidationError,
)
from .rle import CodecError, EmptyMaskError, RleMask, bbox_from_mask, rle_decode, rle_encode, rle_overlap
from .synth import PAPER_SPLIT, ConfigError, SynthConfig, generate_synthetic, split_dataset
