"""Desk-scale query-based spatio-temporal action detector.

A framework-free implementation of a one-stage sparse action detector:
a 4D (x, y, t, scale) feature volume over synthetic multi-scale maps,
query-guided adaptive point sampling, decoupled adaptive feature mixing,
set-prediction training with Hungarian matching, tubelet linking, and
frame/video mAP evaluation. All numerics run on a small reverse-mode
autodiff core with a finite-difference verification harness.
"""

from .autodiff import Tensor, no_grad
from .config import RunConfig, load_config, parse_config
from .criterion import (
    Assignment,
    GroundTruthSet,
    LossWeights,
    focal_loss,
    giou_loss,
    l1_box_loss,
    match,
    training_loss,
)
from .decoder import ASAMConfig, ActionDecoder, QueryBank, build_query_bank
from .errors import (
    CheckpointError,
    ConfigError,
    InputError,
    NonFiniteError,
    ShapeError,
)
from .feature_space import (
    FeatureSpace4D,
    StageFeatureMap,
    build_from_hierarchy,
    build_from_plain,
    read_point,
    sample_points,
)
from .gradcheck import check_gradients
from .nn import Parameter
from .queries import PositionalQuery, QuerySet, decode_box, encode_box, init_queries
from .rng import Rng
from .synthetic import ScenarioConfig, gen_scenario, preset_config
from .training import DetectorModel, GradientDescent, evaluate_model, train_toy
from .tubes import (
    ActionTube,
    FrameDetection,
    Tubelet,
    frame_map,
    iou_2d,
    iou_3d,
    link_keyframe_boxes,
    link_tubelets,
    video_map,
)

__version__ = "0.1.0"
