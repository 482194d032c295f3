"""Inference through attention mapping between a small and a large decoder-only model."""

from iam.model import ModelConfig, Model, load_model, save_model
from iam.similarity import SimilarityMetric
from iam.mapping import IamConfig, LayerSelectionStrategy, MappingTable
from iam.engine import baseline_generate, iam_generate

__all__ = [
    "ModelConfig",
    "Model",
    "load_model",
    "save_model",
    "SimilarityMetric",
    "IamConfig",
    "LayerSelectionStrategy",
    "MappingTable",
    "baseline_generate",
    "iam_generate",
]

__version__ = "0.1.0"
