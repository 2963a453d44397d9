"""Multimodal graph-attention table structure recognition.

The pipeline: per-element geometry / appearance / content embeddings,
stacked collaborative attention blocks with compressed key/value
memories, pairwise relation classification (cell / row / column),
post-processing of predicted adjacency into spans, XML and HTML, and
the matching evaluation metrics. A synthetic distorted-table generator
provides fully labeled data end to end.
"""

from .attention import AttentionConfig, AttentionMap, cmha, memory_compress, mha
from .collab import StreamState, ccs_layer, ece_layer, edge_features, forward_blocks
from .data import (
    BoundingBox,
    RelationMatrices,
    TableElement,
    TableSample,
    build_adjacency,
    read_sample,
    validate,
    write_sample,
)
from .errors import ContractError, GridConflictError, NumericalError, ShapeError
from .features import ModalityEmbeddings, appearance_embed, content_embed, geometry_embed
from .head import classify_relations, monte_carlo_sample, pair_embeddings, relation_loss
from .metrics import MetricsReport, attention_jsd, bleu, relation_f1, teds
from .model import ModelConfig, build_model
from .postprocess import belonging_lists, to_html, to_spans, to_xml
from .synth import GenParams, distort_bezier, distort_perspective, generate_table
from .tensor import Parameter, ParamStore, Tensor, backward, layer_norm, matmul, softmax_rows
from .trainer import TrainConfig, evaluate, lr_step, train

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "AttentionMap",
    "BoundingBox",
    "ContractError",
    "GenParams",
    "GridConflictError",
    "MetricsReport",
    "ModalityEmbeddings",
    "ModelConfig",
    "NumericalError",
    "Parameter",
    "ParamStore",
    "RelationMatrices",
    "ShapeError",
    "StreamState",
    "TableElement",
    "TableSample",
    "Tensor",
    "TrainConfig",
    "appearance_embed",
    "attention_jsd",
    "backward",
    "belonging_lists",
    "bleu",
    "build_adjacency",
    "build_model",
    "ccs_layer",
    "classify_relations",
    "cmha",
    "content_embed",
    "distort_bezier",
    "distort_perspective",
    "ece_layer",
    "edge_features",
    "evaluate",
    "forward_blocks",
    "generate_table",
    "geometry_embed",
    "layer_norm",
    "lr_step",
    "matmul",
    "memory_compress",
    "mha",
    "monte_carlo_sample",
    "pair_embeddings",
    "read_sample",
    "relation_f1",
    "relation_loss",
    "softmax_rows",
    "teds",
    "to_html",
    "to_spans",
    "to_xml",
    "train",
    "validate",
    "write_sample",
]
