"""Per-element modality embeddings: geometry, appearance and content.

Geometry is the normalized center/size vector of each box through one FC
layer. Appearance runs the rescaled grayscale raster through two learned
3x3 stride-2 convolutions, average-pools the feature cells each box
covers, and projects to width d. Content hashes tokens into a learned
4096-row embedding table, applies a width-7 1-D convolution over the
(zero-padded) sequence and max-pools over positions.

``encode_table`` precomputes everything constant per sample (image
patches, gather indexes, token ids) so repeated forward passes during
training only pay for the learned part.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import BoundingBox, TableSample
from .errors import ContractError
from .tensor import ParamStore, Tensor

VOCAB_SIZE = 4096
TEXT_KERNEL = 7
CONV_CHANNELS = (4, 8)
IMAGE_SIZE = 512


@dataclass
class ModalityEmbeddings:
    geometry: Tensor
    appearance: Tensor
    content: Tensor

    @property
    def n(self) -> int:
        return self.geometry.shape[0]

    @property
    def d(self) -> int:
        return self.geometry.shape[1]

    def streams(self) -> dict[str, Tensor]:
        return {"geometry": self.geometry, "appearance": self.appearance, "content": self.content}


def token_id(token: str, vocab: int = VOCAB_SIZE) -> int:
    """Stable hash of a token into the embedding table."""
    return zlib.crc32(token.encode("utf-8")) % vocab


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a 2-D array to (out_h, out_w) in [0, 1] floats."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img / 255.0 if image.dtype == np.uint8 else img
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    out = (
        img[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
        + img[np.ix_(y1, x0)] * wy * (1 - wx)
        + img[np.ix_(y0, x1)] * (1 - wy) * wx
        + img[np.ix_(y1, x1)] * wy * wx
    )
    return out / 255.0 if image.dtype == np.uint8 else out


# ---------------------------------------------------------------------------
# geometry


def init_geometry(store: ParamStore, prefix: str, d: int, rng: np.random.Generator):
    from .attention import glorot

    store.add(f"{prefix}/weight", glorot(rng, 4, d))
    store.add(f"{prefix}/bias", np.zeros(d))


def geometry_features(boxes: list[BoundingBox], width: float, height: float) -> np.ndarray:
    """Normalized (x/W, y/H, w/W, h/H) rows; boxes must lie inside the canvas."""
    if width <= 0 or height <= 0:
        raise ContractError(f"geometry: canvas {width}x{height}")
    rows = np.empty((len(boxes), 4))
    for i, b in enumerate(boxes):
        if b.x - b.w / 2 < -1e-6 or b.x + b.w / 2 > width + 1e-6 or b.y - b.h / 2 < -1e-6 or b.y + b.h / 2 > height + 1e-6:
            raise ContractError(f"geometry: box {i} outside the {width}x{height} canvas")
        rows[i] = (b.x / width, b.y / height, b.w / width, b.h / height)
    return rows


def geometry_embed(boxes: list[BoundingBox], width: float, height: float, store: ParamStore,
                   prefix: str = "features/geometry") -> Tensor:
    feats = Tensor(geometry_features(boxes, width, height))
    return T.add_bias(T.matmul(feats, store[f"{prefix}/weight"]), store[f"{prefix}/bias"])


# ---------------------------------------------------------------------------
# appearance


def init_appearance(store: ParamStore, prefix: str, d: int, rng: np.random.Generator,
                    channels: tuple[int, int] = CONV_CHANNELS):
    from .attention import glorot

    c1, c2 = channels
    store.add(f"{prefix}/conv1/kernel", glorot(rng, 9, c1))
    store.add(f"{prefix}/conv1/bias", np.zeros(c1))
    store.add(f"{prefix}/conv2/kernel", glorot(rng, 9 * c1, c2))
    store.add(f"{prefix}/conv2/bias", np.zeros(c2))
    store.add(f"{prefix}/fc/weight", glorot(rng, c2, d))
    store.add(f"{prefix}/fc/bias", np.zeros(d))


def _conv1_patches(image01: np.ndarray) -> np.ndarray:
    """im2col for the first 3x3 stride-2 pad-1 convolution: (S/2)^2 x 9."""
    s = image01.shape[0]
    half = s // 2
    padded = np.pad(image01, 1)
    base = 2 * np.arange(half)
    cols = []
    for dy in range(3):
        for dx in range(3):
            cols.append(padded[np.ix_(base + dy, base + dx)].ravel())
    return np.stack(cols, axis=1)


_GATHER2_CACHE: dict[int, np.ndarray] = {}


def _conv2_gather(grid1: int) -> np.ndarray:
    """Tap indexes for the second 3x3 stride-2 pad-1 convolution.

    Row-major over (position, tap) so a single gather followed by a
    (positions, 9 * channels) reshape lays taps out side by side.
    """
    if grid1 not in _GATHER2_CACHE:
        grid2 = grid1 // 2
        py, px = np.meshgrid(np.arange(grid2), np.arange(grid2), indexing="ij")
        taps = []
        for dy in range(3):
            for dx in range(3):
                y = 2 * py + dy - 1
                x = 2 * px + dx - 1
                valid = (y >= 0) & (y < grid1) & (x >= 0) & (x < grid1)
                taps.append(np.where(valid, y * grid1 + x, -1).ravel())
        _GATHER2_CACHE[grid1] = np.stack(taps, axis=1).ravel()
    return _GATHER2_CACHE[grid1]


def roi_cells(box: BoundingBox, width: float, height: float, image_size: int) -> np.ndarray:
    """Flat feature-map cells covered by a box; at least one (the nearest)."""
    grid = image_size // 4
    cell = image_size / grid
    sx, sy = image_size / width, image_size / height
    x0, x1 = (box.x - box.w / 2) * sx, (box.x + box.w / 2) * sx
    y0, y1 = (box.y - box.h / 2) * sy, (box.y + box.h / 2) * sy
    cx0 = max(0, min(grid - 1, int(np.floor(x0 / cell))))
    cy0 = max(0, min(grid - 1, int(np.floor(y0 / cell))))
    cx1 = max(cx0 + 1, min(grid, int(np.ceil(x1 / cell))))
    cy1 = max(cy0 + 1, min(grid, int(np.ceil(y1 / cell))))
    ys, xs = np.meshgrid(np.arange(cy0, cy1), np.arange(cx0, cx1), indexing="ij")
    return (ys * grid + xs).ravel()


def feature_map(patches1: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """Two conv stages from precomputed first-stage patches to (grid^2, c2) rows."""
    c1_out = T.relu(T.add_bias(T.matmul(patches1, store[f"{prefix}/conv1/kernel"]), store[f"{prefix}/conv1/bias"]))
    grid1 = int(np.sqrt(c1_out.shape[0]))
    c1 = c1_out.shape[1]
    patches2 = T.reshape(T.take_rows(c1_out, _conv2_gather(grid1)), ((grid1 // 2) ** 2, 9 * c1))
    c2_out = T.add_bias(T.matmul(patches2, store[f"{prefix}/conv2/kernel"]), store[f"{prefix}/conv2/bias"])
    return T.relu(c2_out)


def appearance_from_encoding(patches1: Tensor, cells: list[np.ndarray], store: ParamStore, prefix: str) -> Tensor:
    fmap = feature_map(patches1, store, prefix)
    # one gather from the big map, then per-box slices of the small result
    gathered = T.take_rows(fmap, np.concatenate(cells))
    offsets = np.concatenate([[0], np.cumsum([c.size for c in cells])])
    pooled = []
    for k, idx in enumerate(cells):
        region = T.take_rows(gathered, np.arange(offsets[k], offsets[k + 1]))
        pooled.append(T.scale(T.sum_rows(region), 1.0 / idx.size))
    stacked = T.concat_rows(pooled)
    return T.add_bias(T.matmul(stacked, store[f"{prefix}/fc/weight"]), store[f"{prefix}/fc/bias"])


def appearance_embed(image: np.ndarray, boxes: list[BoundingBox], store: ParamStore,
                     prefix: str = "features/appearance", image_size: int = IMAGE_SIZE) -> Tensor:
    if image.size == 0:
        raise ContractError("appearance: empty image")
    h, w = image.shape
    patches = Tensor(_conv1_patches(resize_bilinear(image, image_size, image_size)))
    cells = [roi_cells(b, w, h, image_size) for b in boxes]
    return appearance_from_encoding(patches, cells, store, prefix)


# ---------------------------------------------------------------------------
# content


def init_content(store: ParamStore, prefix: str, d: int, rng: np.random.Generator,
                 vocab: int = VOCAB_SIZE, kernel: int = TEXT_KERNEL):
    from .attention import glorot

    store.add(f"{prefix}/table", rng.normal(0.0, 1.0 / np.sqrt(d), size=(vocab, d)))
    store.add(f"{prefix}/conv/weight", glorot(rng, kernel * d, d))
    store.add(f"{prefix}/conv/bias", np.zeros(d))


def content_from_ids(token_ids: list[np.ndarray], store: ParamStore, prefix: str,
                     kernel: int = TEXT_KERNEL) -> Tensor:
    table = store[f"{prefix}/table"]
    d = table.shape[1]
    # one gather touches the big table; per-element sequences slice the result
    all_ids = np.concatenate([ids for ids in token_ids if ids.size] or [np.empty(0, dtype=np.intp)])
    gathered = T.take_rows(table, all_ids) if all_ids.size else None
    offsets = np.concatenate([[0], np.cumsum([ids.size for ids in token_ids])])
    rows = []
    for k, ids in enumerate(token_ids):
        if ids.size:
            seq = T.take_rows(gathered, np.arange(offsets[k], offsets[k + 1]))
            if ids.size < kernel:
                seq = T.concat_rows([seq, Tensor(np.zeros((kernel - ids.size, d)))])
        else:
            seq = Tensor(np.zeros((kernel, d)))
        positions = seq.shape[0] - kernel + 1
        taps = [T.take_rows(seq, np.arange(j, j + positions)) for j in range(kernel)]
        conv = T.add_bias(T.matmul(T.concat_cols(taps), store[f"{prefix}/conv/weight"]), store[f"{prefix}/conv/bias"])
        rows.append(T.max_rows(conv))
    return T.concat_rows(rows)


def content_embed(texts: list[list[str]], store: ParamStore, prefix: str = "features/content") -> Tensor:
    vocab = store[f"{prefix}/table"].shape[0]
    ids = [np.array([token_id(t, vocab) for t in text], dtype=np.intp) for text in texts]
    return content_from_ids(ids, store, prefix)


# ---------------------------------------------------------------------------
# whole-sample encoding


@dataclass
class EncodedTable:
    """Constant per-sample inputs, reusable across forward passes."""

    n: int
    geometry: np.ndarray
    patches1: np.ndarray
    cells: list[np.ndarray]
    token_ids: list[np.ndarray]


def encode_table(sample: TableSample, image_size: int = IMAGE_SIZE, vocab: int = VOCAB_SIZE) -> EncodedTable:
    boxes = [el.box for el in sample.elements]
    return EncodedTable(
        n=sample.n,
        geometry=geometry_features(boxes, sample.width, sample.height),
        patches1=_conv1_patches(resize_bilinear(sample.image, image_size, image_size)),
        cells=[roi_cells(b, sample.width, sample.height, image_size) for b in boxes],
        token_ids=[np.array([token_id(t, vocab) for t in el.text], dtype=np.intp) for el in sample.elements],
    )


def embed_encoded(enc: EncodedTable, store: ParamStore, zero_modalities: frozenset[str] = frozenset(),
                  prefix: str = "features") -> ModalityEmbeddings:
    """All three modality embeddings; named modalities can be zeroed for ablations."""
    d = store[f"{prefix}/geometry/weight"].shape[1]
    zeros = lambda: Tensor(np.zeros((enc.n, d)))
    geometry = zeros() if "geometry" in zero_modalities else T.add_bias(
        T.matmul(Tensor(enc.geometry), store[f"{prefix}/geometry/weight"]), store[f"{prefix}/geometry/bias"])
    appearance = zeros() if "appearance" in zero_modalities else appearance_from_encoding(
        Tensor(enc.patches1), enc.cells, store, f"{prefix}/appearance")
    content = zeros() if "content" in zero_modalities else content_from_ids(
        enc.token_ids, store, f"{prefix}/content")
    return ModalityEmbeddings(geometry=geometry, appearance=appearance, content=content)
