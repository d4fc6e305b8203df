"""toolseg: dilated fully convolutional ResNet segmentation toolkit.

Builds a residual classification network, converts it into a fully
convolutional segmentation model with an 8x output stride via dilation
surgery, trains it with pixel-normalized cross-entropy, and evaluates
binary and multi-class tool segmentation.
"""

__version__ = "0.1.0"

from .dataset import (DEFAULT_CLASS_MAP, Preprocessing, SequenceDataset,
                      encode_one_hot, load_dataset, render_overlay,
                      split_train_val, to_binary)
from .engine import coarse_logits, forward, predict, residual_forward
from .metrics import (ConfusionCounts, accumulate, binary_report, evaluate,
                      iou_report)
from .model import (ConvLayer, DenseHead, MaxPoolLayer, ModelSpec,
                    ResidualUnit, apply_output_stride, bottleneck_unit,
                    build_resnet, build_resnet101, build_resnet_tiny,
                    compute_receptive_field, convert_to_fcn, count_conv_layers,
                    init_parameters, reconcile_parameters)
from .params import load_parameters, save_parameters
from .tensor_ops import (DilatedConvSpec, bilinear_upsample, dilated_conv_1d,
                         dilated_conv_2d)
from .training import (Checkpoint, TrainingConfig, cross_entropy_grad,
                       cross_entropy_loss, load_checkpoint, lr_grid_search,
                       save_checkpoint, train)

__all__ = [
    "__version__",
    "DEFAULT_CLASS_MAP", "Preprocessing", "SequenceDataset", "encode_one_hot",
    "load_dataset", "render_overlay", "split_train_val", "to_binary",
    "coarse_logits", "forward", "predict", "residual_forward",
    "ConfusionCounts", "accumulate", "binary_report", "evaluate", "iou_report",
    "ConvLayer", "DenseHead", "MaxPoolLayer", "ModelSpec", "ResidualUnit",
    "apply_output_stride", "bottleneck_unit", "build_resnet", "build_resnet101",
    "build_resnet_tiny", "compute_receptive_field", "convert_to_fcn",
    "count_conv_layers", "init_parameters", "reconcile_parameters",
    "load_parameters", "save_parameters",
    "DilatedConvSpec", "bilinear_upsample", "dilated_conv_1d", "dilated_conv_2d",
    "Checkpoint", "TrainingConfig", "cross_entropy_grad", "cross_entropy_loss",
    "load_checkpoint", "lr_grid_search", "save_checkpoint", "train",
]
