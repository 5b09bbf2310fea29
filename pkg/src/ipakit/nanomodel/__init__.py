"""Deterministic tiny transformer host, synthetic tasks and feature collection."""

from ..featureset import FeatureSet
from .adapted import (
    AdaptedModel,
    attach_adapters,
    collect_features,
    evaluate,
    model_forward_backward,
    select_examples,
)
from .config import TARGET_SETS, ModelConfig, TaskSpec
from .tasks import Dataset, make_dataset
from .transformer import TinyTransformer, pretrain_host, pretext_task

__all__ = [
    "AdaptedModel",
    "Dataset",
    "FeatureSet",
    "ModelConfig",
    "TARGET_SETS",
    "TaskSpec",
    "TinyTransformer",
    "attach_adapters",
    "collect_features",
    "evaluate",
    "make_dataset",
    "model_forward_backward",
    "pretext_task",
    "pretrain_host",
    "select_examples",
]
