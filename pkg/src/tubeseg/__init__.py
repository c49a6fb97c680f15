"""tubeseg: near-online universal video segmentation on subclip tubes.

Videos are cut into short subclips, each subclip is segmented into
spatial-temporal tube masks by a query-based decoder, and tubes are linked
across subclips through learned association embeddings. Ships with a
synthetic moving-shapes benchmark and a VPQ/STQ/mIoU/mVC metric suite.
"""

from .autodiff import Tensor, backward, finite_difference_check, no_grad
from .config import RunConfig
from .estimator import TubeSegmenter
from .metrics import EvalResult, evaluate_video
from .model import TubeSegModel
from .synthetic import SceneConfig, generate_video, make_benchmark
from .tracker import InferenceConfig, run_inference, run_vss_inference
from .types import (
    LabelSpace,
    SubClip,
    TubeAnnotation,
    TubeMask,
    VideoClip,
    split_into_subclips,
    tube_iou,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "finite_difference_check",
    "no_grad",
    "RunConfig",
    "TubeSegmenter",
    "EvalResult",
    "evaluate_video",
    "TubeSegModel",
    "SceneConfig",
    "generate_video",
    "make_benchmark",
    "InferenceConfig",
    "run_inference",
    "run_vss_inference",
    "LabelSpace",
    "SubClip",
    "TubeAnnotation",
    "TubeMask",
    "VideoClip",
    "split_into_subclips",
    "tube_iou",
    "__version__",
]
