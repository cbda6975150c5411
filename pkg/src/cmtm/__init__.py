"""Cross-modality token modulation for two-stream video object segmentation."""

from .errors import (
    BadMagicError,
    CheckpointError,
    CMTMError,
    ConfigError,
    CorruptFileError,
    DimensionError,
    LoadError,
    NumericalError,
    TruncatedFileError,
    UnsupportedVersionError,
    UsageError,
)
from .estimator import CMTMSegmenter, pack_inputs
from .modulation import CmtmConfig, CmtmParams, MaskPlan, Modality, Mode, TokenSequence, cmtm_forward
from .segnet import SegModel, SegNetConfig, model_forward, segmentation_loss
from .tensor import Tensor, backward

__version__ = "0.1.0"
