"""Multi-head attention, learned memory compression, and the compressed
attention unit with residual connections.

The compressed unit reduces an M-row key/value memory to exactly N rows
(N = number of queries) before attending, so cost scales with N rather
than with the raw memory size. Compression groups contiguous rows into N
buckets of size ceil(M/N), zero-pads the last bucket, concatenates each
bucket to one wide vector, projects it back to width d and layer-norms.

Attention maps are dumped one grayscale PGM per head per layer, rows are
queries, columns keys, pixel intensity proportional to weight, named
``block{l}_{module}_{modality}_head{i}.pgm``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import ParamStore, Tensor


@dataclass
class AttentionConfig:
    heads: int = 8
    d_m: int = 64
    d_k: int = 8
    d_v: int = 8

    def __post_init__(self):
        if self.heads < 1 or min(self.d_m, self.d_k, self.d_v) < 1:
            raise ContractError(f"bad attention config {self}")


@dataclass
class AttentionMap:
    """Detached softmax weights of one attention call, (heads, Nq, Nkv)."""

    weights: np.ndarray
    layer: int = 0
    module: str = ""
    modality: str = ""

    def filename(self, head: int) -> str:
        return f"block{self.layer}_{self.module}_{self.modality}_head{head}.pgm"


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


# ---------------------------------------------------------------------------
# plain multi-head attention


def init_mha(store: ParamStore, prefix: str, cfg: AttentionConfig, rng: np.random.Generator):
    store.add(f"{prefix}/wq", glorot(rng, cfg.d_m, cfg.heads * cfg.d_k))
    store.add(f"{prefix}/wk", glorot(rng, cfg.d_m, cfg.heads * cfg.d_k))
    store.add(f"{prefix}/wv", glorot(rng, cfg.d_m, cfg.heads * cfg.d_v))
    store.add(f"{prefix}/wo", glorot(rng, cfg.heads * cfg.d_v, cfg.d_m))


def mha(q: Tensor, k: Tensor, v: Tensor, cfg: AttentionConfig, store: ParamStore, prefix: str):
    """Scaled dot-product attention over all heads; returns (output, map)."""
    if k.shape[0] == 0:
        raise ContractError("attention needs at least one key")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: {k.shape[0]} keys vs {v.shape[0]} values")
    for name, t in (("query", q), ("key", k), ("value", v)):
        if t.shape[1] != cfg.d_m:
            raise ShapeError(f"attention: {name} width {t.shape[1]} != d_m {cfg.d_m}")

    qp = T.matmul(q, store[f"{prefix}/wq"])
    kp = T.matmul(k, store[f"{prefix}/wk"])
    vp = T.matmul(v, store[f"{prefix}/wv"])

    heads = []
    weights = np.empty((cfg.heads, q.shape[0], k.shape[0]))
    scale = 1.0 / math.sqrt(cfg.d_k)
    for i in range(cfg.heads):
        qi = T.slice_cols(qp, i * cfg.d_k, (i + 1) * cfg.d_k)
        ki = T.slice_cols(kp, i * cfg.d_k, (i + 1) * cfg.d_k)
        vi = T.slice_cols(vp, i * cfg.d_v, (i + 1) * cfg.d_v)
        attn = T.softmax_rows(T.scale(T.matmul(qi, T.transpose(ki)), scale))
        weights[i] = attn.data
        heads.append(T.matmul(attn, vi))
    out = T.matmul(T.concat_cols(heads), store[f"{prefix}/wo"])
    return out, AttentionMap(weights=weights)


# ---------------------------------------------------------------------------
# memory compression


def init_memory_compress(store: ParamStore, prefix: str, d: int, max_group: int, rng: np.random.Generator):
    store.add(f"{prefix}/proj", glorot(rng, max_group * d, d))
    store.add(f"{prefix}/gamma", np.ones(d))
    store.add(f"{prefix}/beta", np.zeros(d))


def memory_compress(h_in: Tensor, target_rows: int, store: ParamStore, prefix: str) -> Tensor:
    """Reduce an (M, d) memory to exactly (target_rows, d)."""
    m, d = h_in.shape
    n = int(target_rows)
    if m < 1 or n < 1:
        raise ContractError(f"memory_compress: M={m}, N={n}")
    proj = store[f"{prefix}/proj"]
    max_group = proj.shape[0] // d
    group = -(-m // n)  # ceil
    if group > max_group:
        raise ContractError(f"memory_compress: group size {group} exceeds the built maximum {max_group}")
    x = h_in
    if n * group > m:
        x = T.concat_rows([x, Tensor(np.zeros((n * group - m, d)))])
    grouped = T.reshape(x, (n, group * d))
    if group < max_group:
        grouped = T.concat_cols([grouped, Tensor(np.zeros((n, (max_group - group) * d)))])
    return T.layer_norm(T.matmul(grouped, proj), store[f"{prefix}/gamma"], store[f"{prefix}/beta"])


# ---------------------------------------------------------------------------
# compressed multi-head attention with residual stack


def init_cmha(store: ParamStore, prefix: str, cfg: AttentionConfig, max_group: int, rng: np.random.Generator):
    init_memory_compress(store, f"{prefix}/mc_k", cfg.d_m, max_group, rng)
    init_memory_compress(store, f"{prefix}/mc_v", cfg.d_m, max_group, rng)
    init_mha(store, f"{prefix}/attn", cfg, rng)
    store.add(f"{prefix}/norm1/gamma", np.ones(cfg.d_m))
    store.add(f"{prefix}/norm1/beta", np.zeros(cfg.d_m))
    hidden = 4 * cfg.d_m
    store.add(f"{prefix}/ffn/w1", glorot(rng, cfg.d_m, hidden))
    store.add(f"{prefix}/ffn/b1", np.zeros(hidden))
    store.add(f"{prefix}/ffn/w2", glorot(rng, hidden, cfg.d_m))
    store.add(f"{prefix}/ffn/b2", np.zeros(cfg.d_m))
    store.add(f"{prefix}/norm2/gamma", np.ones(cfg.d_m))
    store.add(f"{prefix}/norm2/beta", np.zeros(cfg.d_m))


def cmha(q: Tensor, k: Tensor, v: Tensor, cfg: AttentionConfig, store: ParamStore, prefix: str):
    """Attention over a memory compressed to len(q) rows, with post-norm
    residual and feed-forward stages; returns (output, map)."""
    n = q.shape[0]
    ck = memory_compress(k, n, store, f"{prefix}/mc_k")
    cv = memory_compress(v, n, store, f"{prefix}/mc_v")
    attended, amap = mha(q, ck, cv, cfg, store, f"{prefix}/attn")
    mixed = T.layer_norm(T.add(q, attended), store[f"{prefix}/norm1/gamma"], store[f"{prefix}/norm1/beta"])
    hidden = T.relu(T.add_bias(T.matmul(mixed, store[f"{prefix}/ffn/w1"]), store[f"{prefix}/ffn/b1"]))
    ff = T.add_bias(T.matmul(hidden, store[f"{prefix}/ffn/w2"]), store[f"{prefix}/ffn/b2"])
    out = T.layer_norm(T.add(ff, mixed), store[f"{prefix}/norm2/gamma"], store[f"{prefix}/norm2/beta"])
    return out, amap


# ---------------------------------------------------------------------------
# attention-map dump format


def write_pgm(path, weights: np.ndarray):
    """One attention matrix as a binary PGM, intensity proportional to weight."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise ContractError(f"write_pgm: need a non-empty matrix, got {w.shape}")
    peak = w.max()
    pixels = np.zeros_like(w) if peak <= 0 else w / peak
    pixels = np.rint(pixels * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w.shape[1]} {w.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != b"P5":
        raise ContractError(f"{path}: not a binary PGM")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ContractError(f"{path}: unsupported maxval {maxval}")
    pos += 1
    return np.frombuffer(blob, dtype=np.uint8, count=width * height, offset=pos).reshape(height, width).copy()
