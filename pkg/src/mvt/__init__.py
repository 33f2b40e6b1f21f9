"""Mobile-scale vision transformer lab: numpy autodiff, models, and training.

The package is layered bottom-up; importing `mvt` pulls in the pieces most
experiments touch:

    tensor   reverse-mode autodiff over float64 numpy plus gradcheck
    model    configs, presets, the full network, checkpoints, ablations
    flops    analytic MACs/parameter audit of a ModelConfig
    train    AdamW, schedules, mixup/cutmix, the training loop
    data     synthetic sets, CIFAR-10 binary loader, preprocessing
    cli      `mvt` console entry point (gradcheck/flops/train/eval/visualize)
"""

from .errors import (ConfigError, DataFormatError, MvtError, NumericsError,
                     ShapeError)
from .tensor import Parameter, Tensor, gradcheck
from .seeding import substream
from .model import (EmbedConfig, Model, ModelConfig, ablation_variants,
                    build_model, load_checkpoint, load_model, presets,
                    save_checkpoint)
from .flops import FlopsReport, LayerCost, compression_curve, count
from .train import AdamWState, EpochRecord, TrainConfig, adamw_step, evaluate, lr_at, train
from .data import LabeledImage, batch_arrays, load_cifar10, synthetic_set

__all__ = [
    "AdamWState", "ConfigError", "DataFormatError",
    "EmbedConfig", "EpochRecord", "FlopsReport", "LabeledImage", "LayerCost",
    "Model", "ModelConfig", "MvtError", "NumericsError", "Parameter",
    "ShapeError", "Tensor", "TrainConfig", "ablation_variants", "adamw_step",
    "batch_arrays", "build_model", "compression_curve", "count", "evaluate",
    "gradcheck", "load_checkpoint", "load_cifar10", "load_model", "lr_at",
    "presets", "save_checkpoint", "substream", "synthetic_set", "train",
]
