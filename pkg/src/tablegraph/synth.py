"""Synthetic table generation and geometric distortions.

Tables are random grids with optional merged spanning cells, rendered as
grayscale rasters with ruled lines and pseudo-text (filled rectangles of
per-token width with 1-px gaps). Every grid row keeps at least one
non-row-spanning cell and every column one non-col-spanning cell, so
span ranges stay identifiable from the adjacency matrices alone.

Two label-preserving distortions ship with the generator: a perspective
warp from jittered corners, and a per-row quadratic Bezier bend whose
middle control point sits offset by ``b`` from the intersection of the
row with a random axis line. Blank pixels left by the bend are filled
from the nearest valid pixel in the same column.

Corpus layout: one JSON document per sample (``sample_00000.json`` ...)
plus ``manifest.json`` with a ``samples`` list of ``{file, split,
distortion}`` records.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import BoundingBox, RelationMatrices, TableElement, TableSample, build_adjacency, read_sample, write_sample
from .errors import ContractError

_LETTERS = "abcdefghijklmnopqrstuvwxyz"
LINE_SHADE = 40
GLYPH_SHADE = 90
BACKGROUND = 255


@dataclass
class GenParams:
    rows: tuple[int, int] = (2, 4)
    cols: tuple[int, int] = (2, 4)
    span_prob: float = 0.2
    canvas: tuple[int, int] = (512, 512)  # (H, W)
    glyph_seed: int = 0

    def __post_init__(self):
        if self.rows[0] < 1 or self.cols[0] < 1 or self.rows[0] > self.rows[1] or self.cols[0] > self.cols[1]:
            raise ContractError(f"bad grid ranges {self.rows} x {self.cols}")
        if not (0.0 <= self.span_prob < 1.0):
            raise ContractError(f"span probability {self.span_prob} outside [0, 1)")
        if min(self.canvas) < 32:
            raise ContractError(f"canvas {self.canvas} too small")


@dataclass
class GridCell:
    r0: int
    r1: int
    c0: int
    c1: int

    @property
    def span(self) -> tuple[int, int, int, int]:
        return (self.r0, self.r1, self.c0, self.c1)


def _boundaries(rng, total: int, parts: int, margin: int) -> np.ndarray:
    weights = rng.uniform(0.7, 1.3, size=parts)
    weights /= weights.sum()
    inner = total - 2 * margin
    edges = margin + np.round(np.concatenate([[0.0], np.cumsum(weights)]) * inner).astype(int)
    edges[-1] = total - margin
    return edges


def _merge_cells(rng, n_rows: int, n_cols: int, span_prob: float) -> list[GridCell]:
    cells = {(r, c): GridCell(r, r, c, c) for r in range(n_rows) for c in range(n_cols)}
    owner = {(r, c): (r, c) for r in range(n_rows) for c in range(n_cols)}

    def identifiable(candidates) -> bool:
        live = set(candidates.values())
        rows_ok = all(any(cells[k].r0 == cells[k].r1 == r for k in live if cells[k].r0 <= r <= cells[k].r1) for r in range(n_rows))
        cols_ok = all(any(cells[k].c0 == cells[k].c1 == c for k in live if cells[k].c0 <= c <= cells[k].c1) for c in range(n_cols))
        return rows_ok and cols_ok

    keys = [(r, c) for r in range(n_rows) for c in range(n_cols)]
    rng.shuffle(keys)
    for key in keys:
        if owner[key] != key or rng.random() >= span_prob:
            continue
        cell = cells[key]
        if cell.span != (key[0], key[0], key[1], key[1]):
            continue
        grow_down = bool(rng.integers(0, 2))
        extent = int(rng.integers(1, 3))
        if grow_down:
            targets = [(key[0] + k, key[1]) for k in range(1, extent + 1)]
        else:
            targets = [(key[0], key[1] + k) for k in range(1, extent + 1)]
        if any(t not in owner for t in targets):
            continue
        if any(owner[t] != t or cells[t].span != (t[0], t[0], t[1], t[1]) for t in targets):
            continue
        trial = dict(owner)
        for t in targets:
            trial[t] = key
        grown = GridCell(cell.r0, max(cell.r1, targets[-1][0]), cell.c0, max(cell.c1, targets[-1][1]))
        saved = cells[key]
        cells[key] = grown
        if identifiable(trial):
            owner = trial
        else:
            cells[key] = saved
    live = sorted(set(owner.values()))
    return [cells[k] for k in live]


def _render(image: np.ndarray, rect: tuple[int, int, int, int], value: int, fill: bool):
    y0, y1, x0, x1 = rect
    if fill:
        image[y0:y1, x0:x1] = value
    else:
        image[y0, x0:x1] = value
        image[y1 - 1, x0:x1] = value
        image[y0:y1, x0] = value
        image[y0:y1, x1 - 1] = value


def generate_table(rng_seed: int, p: GenParams) -> TableSample:
    """One fully labeled random table; identical seeds give identical samples."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(rng_seed), spawn_key=(int(p.glyph_seed),)))
    height, width = p.canvas
    n_rows = int(rng.integers(p.rows[0], p.rows[1] + 1))
    n_cols = int(rng.integers(p.cols[0], p.cols[1] + 1))
    margin = max(4, min(height, width) // 32)
    row_edges = _boundaries(rng, height, n_rows, margin)
    col_edges = _boundaries(rng, width, n_cols, margin)
    cells = _merge_cells(rng, n_rows, n_cols, p.span_prob)

    image = np.full((height, width), BACKGROUND, dtype=np.uint8)
    elements = []
    for cell in cells:
        y0, y1 = int(row_edges[cell.r0]), int(row_edges[cell.r1 + 1])
        x0, x1 = int(col_edges[cell.c0]), int(col_edges[cell.c1 + 1])
        _render(image, (y0, y1, x0, x1), LINE_SHADE, fill=False)

        pad = 3
        iw, ih = x1 - x0 - 2 * pad, y1 - y0 - 2 * pad
        bw = max(4.0, iw * rng.uniform(0.45, 0.85))
        bh = max(3.0, min(ih * rng.uniform(0.35, 0.6), bw))
        bx0 = x0 + pad + rng.uniform(0.0, max(0.0, iw - bw))
        by0 = y0 + pad + rng.uniform(0.0, max(0.0, ih - bh))
        box = BoundingBox(x=bx0 + bw / 2.0, y=by0 + bh / 2.0, w=bw, h=bh)

        count = int(rng.integers(1, 5))
        tokens = ["".join(_LETTERS[int(k)] for k in rng.integers(0, 26, size=int(rng.integers(2, 8)))) for _ in range(count)]
        glyph = max(2, int(bh * 0.45))
        cursor = int(bx0)
        ty0, ty1 = int(by0) + 1, int(by0 + bh) - 1
        for token in tokens:
            w_tok = min(len(token) * glyph, int(bx0 + bw) - cursor)
            if w_tok <= 0:
                break
            if ty1 > ty0:
                image[ty0:ty1, cursor : cursor + w_tok] = GLYPH_SHADE
            cursor += w_tok + 1

        elements.append(TableElement(box=box, text=tokens, gt_span=cell.span))

    sample = TableSample(image=image, elements=elements, relations=None)
    sample.relations = build_adjacency(sample.elements)
    return sample


def reference_html(sample: TableSample) -> list[str]:
    """Straight-line HTML tokens from the generator's own span labels."""
    spans = sorted({el.gt_span for el in sample.elements})
    n_rows = max(s[1] for s in spans) + 1
    tokens = ["<table>"]
    for r in range(n_rows):
        tokens.append("<tr>")
        for r0, r1, c0, c1 in spans:
            if r0 != r:
                continue
            attrs = ""
            if r1 - r0 + 1 > 1:
                attrs += f" rowspan={r1 - r0 + 1}"
            if c1 - c0 + 1 > 1:
                attrs += f" colspan={c1 - c0 + 1}"
            tokens.append(f"<td{attrs}>")
            tokens.append("</td>")
        tokens.append("</tr>")
    tokens.append("</table>")
    return tokens


def reference_tree_spans(sample: TableSample) -> list[tuple[int, int, int, int]]:
    return [el.gt_span for el in sample.elements]


# ---------------------------------------------------------------------------
# distortion 1: perspective


def _solve_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    a = np.zeros((8, 8))
    rhs = np.zeros(8)
    for k in range(4):
        x, y = src[k]
        u, v = dst[k]
        a[2 * k] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * k + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        rhs[2 * k] = u
        rhs[2 * k + 1] = v
    h = np.linalg.solve(a, rhs)
    return np.array([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])


def _warp_image(image: np.ndarray, hom: np.ndarray) -> np.ndarray:
    h, w = image.shape
    inv = np.linalg.inv(hom)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    denom = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / denom
    sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / denom
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx = sx - x0
    fy = sy - y0
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    x0c = np.clip(x0, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    img = image.astype(np.float64)
    val = (
        img[y0c, x0c] * (1 - fy) * (1 - fx)
        + img[y0c, x1c] * (1 - fy) * fx
        + img[y1c, x0c] * fy * (1 - fx)
        + img[y1c, x1c] * fy * fx
    )
    out = np.where(inside, np.rint(val), BACKGROUND)
    return out.astype(np.uint8)


def _clip_box(x0: float, y0: float, x1: float, y1: float, width: int, height: int) -> BoundingBox:
    x0 = min(max(x0, 0.0), width - 1.0)
    y0 = min(max(y0, 0.0), height - 1.0)
    x1 = max(min(x1, float(width)), x0 + 1.0)
    y1 = max(min(y1, float(height)), y0 + 1.0)
    return BoundingBox(x=(x0 + x1) / 2.0, y=(y0 + y1) / 2.0, w=x1 - x0, h=y1 - y0)


def distort_perspective(sample: TableSample, corner_jitter: float, rng_seed: int) -> TableSample:
    """Project the table to a jittered view plane; labels are untouched."""
    h, w = sample.image.shape
    if corner_jitter >= min(w, h) / 4:
        raise ContractError(f"corner jitter {corner_jitter} >= min(W,H)/4")
    rng = np.random.default_rng(rng_seed)
    src = np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])
    hom = None
    for _ in range(10):
        dst = src + rng.uniform(-corner_jitter, corner_jitter, size=(4, 2))
        try:
            candidate = _solve_homography(src, dst)
        except np.linalg.LinAlgError:
            continue
        if abs(np.linalg.det(candidate)) > 1e-8:
            hom = candidate
            break
    if hom is None:
        raise ContractError("could not draw an invertible homography in 10 tries")

    if np.array_equal(dst, src):
        image = sample.image.copy()
        boxes = [BoundingBox(el.box.x, el.box.y, el.box.w, el.box.h) for el in sample.elements]
    else:
        image = _warp_image(sample.image, hom)
        boxes = []
        for el in sample.elements:
            corners = el.box.corners()
            ones = np.ones((4, 1))
            mapped = (np.hstack([corners, ones]) @ hom.T)
            mapped = mapped[:, :2] / mapped[:, 2:3]
            boxes.append(_clip_box(mapped[:, 0].min(), mapped[:, 1].min(), mapped[:, 0].max(), mapped[:, 1].max(), w, h))

    elements = [TableElement(box=b, text=list(el.text), gt_span=el.gt_span) for b, el in zip(boxes, sample.elements)]
    relations = sample.relations.copy() if sample.relations is not None else None
    return TableSample(image=image, elements=elements, relations=relations)


# ---------------------------------------------------------------------------
# distortion 2: quadratic Bezier bend


def bezier_point(p0: np.ndarray, p1: np.ndarray, p2: np.ndarray, t) -> np.ndarray:
    """The quadratic curve (1-t)^2 P0 + 2 t (1-t) P1 + t^2 P2."""
    t = np.asarray(t, dtype=np.float64)
    return (
        np.multiply.outer((1.0 - t) ** 2, np.asarray(p0, dtype=np.float64))
        + np.multiply.outer(2.0 * t * (1.0 - t), np.asarray(p1, dtype=np.float64))
        + np.multiply.outer(t**2, np.asarray(p2, dtype=np.float64))
    )


@dataclass
class BezierWarp:
    """Axis line (point + direction), vertical offset, and row control points."""

    axis_point: tuple[float, float]
    axis_dir: tuple[float, float]
    offset: float
    width: int

    def intersect_row(self, y: float) -> float:
        px, py = self.axis_point
        dx, dy = self.axis_dir
        if abs(dy) < 1e-12:  # axis parallel to the row: fall back to the midpoint
            return (self.width - 1) / 2.0
        mid = px + (y - py) * dx / dy
        lo, hi = 0.1 * (self.width - 1), 0.9 * (self.width - 1)
        return min(max(mid, lo), hi)

    def control_points(self, y: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        mx = self.intersect_row(y)
        p0 = np.array([0.0, y])
        p1 = np.array([mx, y + self.offset])
        p2 = np.array([self.width - 1.0, y])
        return p0, p1, p2

    def curve_parameter(self, x, y: float):
        """t with curve_x(t) = x, monotone for the clamped midpoint."""
        mx = self.intersect_row(y)
        w1 = self.width - 1.0
        a = w1 - 2.0 * mx
        bq = 2.0 * mx
        x = np.asarray(x, dtype=np.float64)
        if abs(a) < 1e-9:
            return x / bq if bq else np.zeros_like(x)
        disc = np.sqrt(np.maximum(bq * bq + 4.0 * a * x, 0.0))
        return np.clip(2.0 * x / (bq + disc), 0.0, 1.0)

    def displacement(self, x, y: float):
        """Vertical shift of pixels at abscissa x on row y.

        Only the middle control point leaves the row, so the curve's
        vertical offset reduces to the weight of that point times b; the
        reduced form is exactly zero at the endpoints and at b = 0.
        """
        t = self.curve_parameter(x, y)
        return 2.0 * t * (1.0 - t) * self.offset


def random_bezier_warp(axis_seed: int, width: int, height: int, offset: float) -> BezierWarp:
    rng = np.random.default_rng(axis_seed)
    point = (float(rng.uniform(0.3, 0.7) * width), float(rng.uniform(0.3, 0.7) * height))
    angle = float(rng.uniform(-math.pi / 6, math.pi / 6))  # near-vertical axis
    return BezierWarp(axis_point=point, axis_dir=(math.sin(angle), math.cos(angle)), offset=float(offset), width=width)


def distort_bezier(sample: TableSample, axis_seed: int, b: float) -> TableSample:
    """Bend every image row along its quadratic curve; labels are untouched."""
    h, w = sample.image.shape
    if abs(b) >= h / 4:
        raise ContractError(f"bend offset {b} >= H/4")
    warp = random_bezier_warp(axis_seed, w, h, b)

    xs = np.arange(w, dtype=np.float64)
    out = np.full((h, w), BACKGROUND, dtype=np.uint8)
    filled = np.zeros((h, w), dtype=bool)
    for r in range(h):
        dest = np.rint(r + warp.displacement(xs, float(r))).astype(int)
        ok = (dest >= 0) & (dest < h)
        out[dest[ok], xs.astype(int)[ok]] = sample.image[r, ok]
        filled[dest[ok], xs.astype(int)[ok]] = True

    for c in range(w):
        holes = np.flatnonzero(~filled[:, c])
        if holes.size == 0:
            continue
        good = np.flatnonzero(filled[:, c])
        if good.size == 0:
            continue
        pos = np.searchsorted(good, holes)
        left = good[np.clip(pos - 1, 0, good.size - 1)]
        right = good[np.clip(pos, 0, good.size - 1)]
        nearest = np.where(np.abs(holes - left) <= np.abs(right - holes), left, right)
        out[holes, c] = out[nearest, c]

    elements = []
    for el in sample.elements:
        dy = float(warp.displacement(np.array([el.box.x]), el.box.y)[0])
        moved = BoundingBox(x=el.box.x, y=el.box.y + dy, w=el.box.w, h=el.box.h)
        if moved.top < 0 or moved.top + moved.h > h:
            moved = _clip_box(moved.left, moved.top, moved.left + moved.w, moved.top + moved.h, w, h)
        elements.append(TableElement(box=moved, text=list(el.text), gt_span=el.gt_span))
    relations = sample.relations.copy() if sample.relations is not None else None
    return TableSample(image=out, elements=elements, relations=relations)


# ---------------------------------------------------------------------------
# corpus io


DISTORTIONS = ("none", "perspective", "bezier", "both")


def apply_distortion(sample: TableSample, kind: str, seed: int,
                     jitter: float | None = None, bend: float | None = None) -> TableSample:
    h, w = sample.image.shape
    jitter = min(w, h) / 8 if jitter is None else jitter
    bend = h / 8 if bend is None else bend
    if kind == "none":
        return sample
    if kind == "perspective":
        return distort_perspective(sample, jitter, seed)
    if kind == "bezier":
        return distort_bezier(sample, seed, bend)
    if kind == "both":
        return distort_bezier(distort_perspective(sample, jitter, seed), seed + 1, bend)
    raise ContractError(f"unknown distortion {kind!r}")


def generate_corpus(count: int, base_seed: int, params: GenParams, distort: str = "none",
                    jitter: float | None = None, bend: float | None = None) -> list[TableSample]:
    """Seed-deterministic corpus; sample k uses seed stream (base_seed, k)."""
    if distort not in DISTORTIONS:
        raise ContractError(f"unknown distortion {distort!r}")
    out = []
    for k in range(count):
        seed = int(np.random.SeedSequence(entropy=int(base_seed), spawn_key=(k,)).generate_state(1)[0])
        sample = generate_table(seed, params)
        out.append(apply_distortion(sample, distort, seed ^ 0x5EED, jitter=jitter, bend=bend))
    return out


def write_corpus(samples: list[TableSample], directory, splits: list[str] | None = None,
                 distortion: str = "none"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for k, sample in enumerate(samples):
        name = f"sample_{k:05d}.json"
        write_sample(sample, directory / name)
        records.append({"file": name, "split": splits[k] if splits else "train", "distortion": distortion})
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump({"samples": records}, fh, indent=1)
        fh.write("\n")


def read_corpus(directory, split: str | None = None) -> list[TableSample]:
    directory = Path(directory)
    with open(directory / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    out = []
    for record in manifest["samples"]:
        if split is not None and record["split"] != split:
            continue
        out.append(read_sample(directory / record["file"]))
    return out
