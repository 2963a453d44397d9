"""Model assembly: configuration, parameter construction, and the
sample-level forward passes used by training and inference."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import collab, features, head
from .attention import AttentionConfig
from .data import TableSample
from .errors import ContractError
from .features import EncodedTable, ModalityEmbeddings
from .head import MonteCarloDraw, RelationLogits, monte_carlo_sample, relation_loss, sampled_logits
from .tensor import ParamStore, Tensor


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 8
    d_k: int = 8
    d_v: int = 8
    blocks: int = 3
    n_max: int = 16
    fusion: str = "ccs"
    image_size: int = features.IMAGE_SIZE
    zero_modalities: tuple[str, ...] = ()

    def __post_init__(self):
        if self.fusion not in collab.FUSION_MODES:
            raise ContractError(f"unknown fusion mode {self.fusion!r}")
        for m in self.zero_modalities:
            if m not in collab.MODALITIES:
                raise ContractError(f"unknown modality {m!r}")
        if self.blocks < 1 or self.n_max < 2 or self.d < 1:
            raise ContractError(f"bad model config {self}")

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(heads=self.heads, d_m=self.d, d_k=self.d_k, d_v=self.d_v)

    @property
    def embedding_width(self) -> int:
        return collab.embedding_width(self.d, self.fusion)

    @property
    def pair_width(self) -> int:
        return 2 * self.embedding_width


def build_model(cfg: ModelConfig, seed: int) -> ParamStore:
    """Fresh parameters for every learned stage, seeded and named."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    store = ParamStore()
    features.init_geometry(store, "features/geometry", cfg.d, rng)
    features.init_appearance(store, "features/appearance", cfg.d, rng)
    features.init_content(store, "features/content", cfg.d, rng)
    collab.init_blocks(store, cfg.blocks, cfg.attention, cfg.n_max, rng, cfg.fusion)
    head.init_head(store, cfg.pair_width, rng)
    return store


def check_ingest(sample: TableSample, cfg: ModelConfig):
    if sample.n < 2:
        raise ContractError(f"model ingestion needs at least 2 elements, got {sample.n}")
    if sample.n > cfg.n_max:
        raise ContractError(f"sample has {sample.n} elements, model was built for at most {cfg.n_max}")


def encode(sample: TableSample, cfg: ModelConfig) -> EncodedTable:
    check_ingest(sample, cfg)
    return features.encode_table(sample, cfg.image_size)


def embeddings_for(enc: EncodedTable, store: ParamStore, cfg: ModelConfig) -> ModalityEmbeddings:
    return features.embed_encoded(enc, store, zero_modalities=frozenset(cfg.zero_modalities))


def forward(enc: EncodedTable, store: ParamStore, cfg: ModelConfig):
    """Element embeddings and attention maps for one encoded sample."""
    f = embeddings_for(enc, store, cfg)
    return collab.forward_blocks(f, cfg.blocks, store, cfg.attention, cfg.fusion)


def predict(enc: EncodedTable, store: ParamStore, cfg: ModelConfig):
    """Full-pair relation probabilities, (N, N) per relation, plus maps."""
    fused, maps = forward(enc, store, cfg)
    return head.relation_probability_matrices(fused, store), maps


def training_loss(enc: EncodedTable, gt, store: ParamStore, cfg: ModelConfig,
                  sample_size: int, draw_seed: int,
                  lam1: float = 1.0, lam2: float = 1.0, alpha: float = 1.0) -> Tensor:
    """End-to-end loss for one sample under a seeded Monte Carlo draw."""
    fused, _ = forward(enc, store, cfg)
    draw: MonteCarloDraw = monte_carlo_sample(gt, sample_size, draw_seed)
    logits: RelationLogits = sampled_logits(fused, draw, store)
    return relation_loss(logits, fused, draw, lam1=lam1, lam2=lam2, alpha=alpha)
