"""Residual networks with multi-level feature forwarding, on a small numpy autodiff core."""

from .builders import build_arch, build_newnet, build_resnet, build_wideresnet, stage_outputs
from .data import Dataset, augment_shift_flip, batches, load_cifar, normalize
from .estimator import MultiLevelResNetClassifier
from .graph import (
    LayerNode,
    NetworkGraph,
    count_params,
    deserialize_graph,
    infer_shapes,
    param_breakdown,
    serialize_graph,
)
from .model import Model
from .trainer import (
    Checkpoint,
    TrainConfig,
    evaluate,
    gradcheck,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
    train,
)
from .transform import apply_multilevel_transform, classifier_layout, find_reduction_points

__version__ = "0.1.0"
