"""The collaborative block stack: per-modality intra-context layers over
pairwise edge features, cross-modality synthesis layers over the union of
the other two streams, and the layered forward pass that fuses the three
streams into one embedding per element.

Keys and values are built from value-sorted node orderings before
compression, so the whole stack is exactly equivariant under permutations
of the input elements (contiguous grouping would otherwise leak the
labeling into the result).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, AttentionMap, cmha, glorot, init_cmha
from .errors import ContractError
from .features import ModalityEmbeddings
from .tensor import ParamStore, Tensor

MODALITIES = ("geometry", "appearance", "content")
FUSION_MODES = ("ccs", "concat", "early")


def edge_pair_indexes(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major unordered pair indexes (i < j)."""
    i_idx, j_idx = np.triu_indices(n, k=1)
    return i_idx.astype(np.intp), j_idx.astype(np.intp)


def edge_features(x: Tensor) -> Tensor:
    """One row per unordered node pair: [x_i || (x_i - x_j)] for i < j."""
    n = x.shape[0]
    if n < 2:
        raise ContractError(f"edge_features: need at least 2 nodes, got {n}")
    i_idx, j_idx = edge_pair_indexes(n)
    xi = T.take_rows(x, i_idx)
    xj = T.take_rows(x, j_idx)
    return T.concat_cols([xi, T.sub(xi, xj)])


def canonical_order(rows: np.ndarray) -> np.ndarray:
    """Permutation sorting rows lexicographically by value (label-free)."""
    return np.lexsort(rows.T[::-1]).astype(np.intp)


def ece_group_bound(n_max: int) -> int:
    """Largest compression group an intra-context layer can see for n <= n_max."""
    return max(1, -(-(n_max - 1) // 2))


def init_ece(store: ParamStore, prefix: str, cfg: AttentionConfig, n_max: int, rng: np.random.Generator):
    store.add(f"{prefix}/edge_proj/weight", glorot(rng, 2 * cfg.d_m, cfg.d_m))
    store.add(f"{prefix}/edge_proj/bias", np.zeros(cfg.d_m))
    init_cmha(store, f"{prefix}/cmha", cfg, ece_group_bound(n_max), rng)


def ece_layer(c_prev: Tensor, cfg: AttentionConfig, store: ParamStore, prefix: str):
    """Intra-modality context: attend each node over all pairwise edges.

    Nodes are re-ordered by value before edge construction so the edge
    memory is a function of the node set, not of its labeling.
    """
    order = canonical_order(c_prev.data)
    edges = edge_features(T.take_rows(c_prev, order))
    proj = T.add_bias(T.matmul(edges, store[f"{prefix}/edge_proj/weight"]), store[f"{prefix}/edge_proj/bias"])
    return cmha(c_prev, proj, proj, cfg, store, f"{prefix}/cmha")


def init_ccs(store: ParamStore, prefix: str, cfg: AttentionConfig, rng: np.random.Generator):
    # the union memory is always 2N rows compressed to N, so groups are pairs
    init_cmha(store, f"{prefix}/cmha", cfg, 2, rng)


def ccs_layer(m_prev: Tensor, c_a: Tensor, c_b: Tensor, cfg: AttentionConfig, store: ParamStore, prefix: str):
    """Cross-modality synthesis: one stream queries the union of the other two."""
    if c_a.shape != c_b.shape or c_a.shape[0] != m_prev.shape[0]:
        raise ContractError(f"ccs_layer: mismatched shapes {m_prev.shape}, {c_a.shape}, {c_b.shape}")
    union = T.concat_rows([c_a, c_b])
    kv = T.take_rows(union, canonical_order(union.data))
    return cmha(m_prev, kv, kv, cfg, store, f"{prefix}/cmha")


# ---------------------------------------------------------------------------
# the layered stack


@dataclass
class StreamState:
    """Per-layer state: intra-modality contexts and inter-modality streams."""

    intra: dict[str, Tensor]
    inter: dict[str, Tensor]
    layer: int = 0


def initial_state(f: ModalityEmbeddings) -> StreamState:
    streams = f.streams()
    return StreamState(intra=dict(streams), inter=dict(streams), layer=0)


def init_blocks(store: ParamStore, layers: int, cfg: AttentionConfig, n_max: int,
                rng: np.random.Generator, fusion: str = "ccs"):
    if fusion not in FUSION_MODES:
        raise ContractError(f"unknown fusion mode {fusion!r}")
    if layers < 1:
        raise ContractError(f"need at least one block, got {layers}")
    for layer in range(layers):
        if fusion == "early":
            init_ece(store, f"block{layer}/ece/mixed", cfg, n_max, rng)
            continue
        for m in MODALITIES:
            init_ece(store, f"block{layer}/ece/{m}", cfg, n_max, rng)
            if fusion == "ccs":
                init_ccs(store, f"block{layer}/ccs/{m}", cfg, rng)
    if fusion == "early":
        store.add("features/mixed_proj/weight", glorot(rng, 3 * cfg.d_m, cfg.d_m))
        store.add("features/mixed_proj/bias", np.zeros(cfg.d_m))


def _advance(state: StreamState, cfg: AttentionConfig, store: ParamStore, fusion: str,
             maps: list[AttentionMap]) -> StreamState:
    layer = state.layer
    new_intra: dict[str, Tensor] = {}
    for m in state.intra:
        out, amap = ece_layer(state.intra[m], cfg, store, f"block{layer}/ece/{m}")
        amap.layer, amap.module, amap.modality = layer, "ece", m
        maps.append(amap)
        new_intra[m] = out
    new_inter: dict[str, Tensor] = {}
    if fusion == "ccs":
        for m in MODALITIES:
            others = [new_intra[o] for o in MODALITIES if o != m]
            out, amap = ccs_layer(state.inter[m], others[0], others[1], cfg, store, f"block{layer}/ccs/{m}")
            amap.layer, amap.module, amap.modality = layer, "ccs", m
            maps.append(amap)
            new_inter[m] = out
    else:
        new_inter = dict(new_intra)
    return StreamState(intra=new_intra, inter=new_inter, layer=layer + 1)


def forward_blocks(f: ModalityEmbeddings, layers: int, store: ParamStore, cfg: AttentionConfig,
                   fusion: str = "ccs"):
    """Run the block stack and fuse the final streams.

    Returns (embedding, attention maps). The embedding is the element-wise
    sum of the three final inter-modality streams in the default mode, the
    channel concatenation of the intra streams in "concat" mode, and the
    single mixed stream in "early" mode.
    """
    if fusion not in FUSION_MODES:
        raise ContractError(f"unknown fusion mode {fusion!r}")
    if layers < 1:
        raise ContractError(f"need at least one block, got {layers}")

    if fusion == "early":
        mixed = T.add_bias(
            T.matmul(T.concat_cols([f.geometry, f.appearance, f.content]), store["features/mixed_proj/weight"]),
            store["features/mixed_proj/bias"],
        )
        state = StreamState(intra={"mixed": mixed}, inter={"mixed": mixed}, layer=0)
    else:
        state = initial_state(f)

    maps: list[AttentionMap] = []
    for _ in range(layers):
        state = _advance(state, cfg, store, fusion, maps)

    if fusion == "ccs":
        fused = T.add(T.add(state.inter["geometry"], state.inter["appearance"]), state.inter["content"])
    elif fusion == "concat":
        fused = T.concat_cols([state.intra[m] for m in MODALITIES])
    else:
        fused = state.intra["mixed"]
    return fused, maps


def embedding_width(d: int, fusion: str) -> int:
    """Width of the fused embedding for a given mode."""
    if fusion not in FUSION_MODES:
        raise ContractError(f"unknown fusion mode {fusion!r}")
    return 3 * d if fusion == "concat" else d
