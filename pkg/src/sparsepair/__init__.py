"""Sparse pairwise (SP / AdaSP) metric-learning losses with exact mining oracles."""
from ._accel import backend_name
from .batchkit import ClassView, EmbeddingBatch, PKSampler, pk_sample
from .sploss import SPConfig, SPVariant, sp_loss
from .synthgen import LabeledDataset, SyntheticSpec, generate

__version__ = "0.1.0"

__all__ = [
    "ClassView",
    "EmbeddingBatch",
    "LabeledDataset",
    "PKSampler",
    "SPConfig",
    "SPVariant",
    "SyntheticSpec",
    "backend_name",
    "generate",
    "pk_sample",
    "sp_loss",
]
