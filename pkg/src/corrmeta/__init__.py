"""Few-shot image classification with multi-scale channel correlation and weighted prototypes."""

from .backbone import BackboneConfig, PyramidFeatures
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Dataset, SyntheticSpec, generate_synthetic, load_dataset, split_classes
from .engine import EvalReport, MetricSink, TrainConfig, evaluate, infer, lr_at, train
from .episodes import Episode, sample_episode
from .model import ModelConfig, ablation_config, embed, init_params
from .tensor import ParamStore, Tensor, backward, no_grad

__all__ = [
    "BackboneConfig",
    "Checkpoint",
    "Dataset",
    "Episode",
    "EvalReport",
    "MetricSink",
    "ModelConfig",
    "ParamStore",
    "PyramidFeatures",
    "SyntheticSpec",
    "Tensor",
    "TrainConfig",
    "ablation_config",
    "backward",
    "embed",
    "evaluate",
    "generate_synthetic",
    "infer",
    "init_params",
    "load_checkpoint",
    "load_dataset",
    "lr_at",
    "no_grad",
    "sample_episode",
    "save_checkpoint",
    "split_classes",
    "train",
]
