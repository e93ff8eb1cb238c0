from .backbone import FeaturePyramid, GeometryError, backbone_forward
from .config import ModelConfig
from .mask_decoder import InstancePrediction, finalize, predict_masks
from .pixel_decoder import EncodedPyramid
from .segmenter import ModelOutput, forward, init_params, predict
