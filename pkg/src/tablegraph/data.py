"""Table samples, element boxes and ground-truth relation matrices.

A sample is one table: a grayscale raster, N text-segment elements with
center-format boxes, token texts and grid span indexes, plus three N-by-N
binary adjacency matrices (cell / row / column).

Document format (one JSON object per sample):

    height, width   image dimensions in pixels
    image_b64       base64 of the row-major uint8 raster
    elements        list of {"box": {"x","y","w","h"}, "text": [tokens],
                    "span": [start_row, end_row, start_col, end_col] or null}
    relations       {"cell": [[..]], "row": [[..]], "col": [[..]]} or null

``read_sample(write_sample(s)) == s`` holds field for field.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError

RELATION_NAMES = ("cell", "row", "col")


@dataclass
class BoundingBox:
    """Center-format box: (x, y) center, w horizontal and h vertical extent."""

    x: float
    y: float
    w: float
    h: float

    def corners(self) -> np.ndarray:
        """The four corners, counter-clockwise from the top-left, as (4, 2)."""
        hw, hh = self.w / 2.0, self.h / 2.0
        return np.array(
            [
                [self.x - hw, self.y - hh],
                [self.x - hw, self.y + hh],
                [self.x + hw, self.y + hh],
                [self.x + hw, self.y - hh],
            ]
        )

    @property
    def left(self) -> float:
        return self.x - self.w / 2.0

    @property
    def top(self) -> float:
        return self.y - self.h / 2.0


@dataclass
class TableElement:
    box: BoundingBox
    text: list[str] = field(default_factory=list)
    gt_span: Optional[tuple[int, int, int, int]] = None  # start_row, end_row, start_col, end_col


@dataclass
class RelationMatrices:
    """Symmetric binary adjacency per relation kind, unit diagonal."""

    cell: np.ndarray
    row: np.ndarray
    col: np.ndarray

    @property
    def n(self) -> int:
        return self.cell.shape[0]

    def by_name(self, name: str) -> np.ndarray:
        if name not in RELATION_NAMES:
            raise ContractError(f"unknown relation {name!r}")
        return getattr(self, name)

    def copy(self) -> "RelationMatrices":
        return RelationMatrices(self.cell.copy(), self.row.copy(), self.col.copy())


@dataclass
class TableSample:
    image: np.ndarray  # uint8, (H, W)
    elements: list[TableElement]
    relations: Optional[RelationMatrices] = None

    @property
    def n(self) -> int:
        return len(self.elements)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def _spans_intersect(a0: int, a1: int, b0: int, b1: int) -> bool:
    return a0 <= b1 and b0 <= a1


def build_adjacency(elements: list[TableElement]) -> RelationMatrices:
    """Derive the three adjacency matrices from element grid spans.

    Two elements share a row (column) when their span-row (span-column)
    intervals intersect, and share a cell when the full span tuples are
    identical. All matrices are symmetric with a unit diagonal.
    """
    n = len(elements)
    for i, el in enumerate(elements):
        if el.gt_span is None:
            raise ContractError(f"element {i} is missing gt_span")
    spans = [el.gt_span for el in elements]
    cell = np.eye(n, dtype=np.uint8)
    row = np.eye(n, dtype=np.uint8)
    col = np.eye(n, dtype=np.uint8)
    for i in range(n):
        r0, r1, c0, c1 = spans[i]
        for j in range(i + 1, n):
            s0, s1, t0, t1 = spans[j]
            if _spans_intersect(r0, r1, s0, s1):
                row[i, j] = row[j, i] = 1
            if _spans_intersect(c0, c1, t0, t1):
                col[i, j] = col[j, i] = 1
            if spans[i] == spans[j]:
                cell[i, j] = cell[j, i] = 1
    return RelationMatrices(cell, row, col)


def validate(sample: TableSample) -> list[str]:
    """Check every invariant; violations are returned as data, not raised."""
    out: list[str] = []
    if sample.image.ndim != 2 or sample.image.dtype != np.uint8:
        out.append(f"image must be a 2-D uint8 raster, got {sample.image.dtype} {sample.image.shape}")
        return out
    h, w = sample.image.shape
    n = len(sample.elements)
    if n < 1:
        out.append("sample has no elements")
    for i, el in enumerate(sample.elements):
        b = el.box
        if b.w <= 0 or b.h <= 0:
            out.append(f"element {i}: non-positive box size {b.w}x{b.h}")
            continue
        if b.x - b.w / 2 < -1e-6 or b.x + b.w / 2 > w + 1e-6 or b.y - b.h / 2 < -1e-6 or b.y + b.h / 2 > h + 1e-6:
            out.append(f"element {i}: box outside the {w}x{h} canvas")
        if el.gt_span is not None:
            r0, r1, c0, c1 = el.gt_span
            if min(r0, r1, c0, c1) < 0:
                out.append(f"element {i}: negative span index {el.gt_span}")
            if r0 > r1 or c0 > c1:
                out.append(f"element {i}: inverted span {el.gt_span}")
    rel = sample.relations
    if rel is None:
        out.append("sample has no relation matrices")
        return out
    for name in RELATION_NAMES:
        m = rel.by_name(name)
        if m.shape != (n, n):
            out.append(f"{name} matrix shape {m.shape} does not match {n} elements")
            continue
        bad = np.argwhere((m != 0) & (m != 1))
        if bad.size:
            i, j = bad[0]
            out.append(f"{name} matrix is not binary at ({i},{j})")
        asym = np.argwhere(m != m.T)
        if asym.size:
            i, j = asym[0]
            out.append(f"{name} matrix is asymmetric at ({i},{j})")
        if not np.all(np.diag(m) == 1):
            k = int(np.argmin(np.diag(m)))
            out.append(f"{name} matrix diagonal is not 1 at ({k},{k})")
    if rel.cell.shape == (n, n) and rel.row.shape == (n, n) and rel.col.shape == (n, n):
        broken = np.argwhere((rel.cell == 1) & ((rel.row == 0) | (rel.col == 0)))
        if broken.size:
            i, j = broken[0]
            out.append(f"cell implies row and col violated at ({i},{j})")
    return out


# ---------------------------------------------------------------------------
# document io


def sample_to_dict(sample: TableSample) -> dict:
    doc = {
        "height": int(sample.height),
        "width": int(sample.width),
        "image_b64": base64.b64encode(np.ascontiguousarray(sample.image).tobytes()).decode("ascii"),
        "elements": [
            {
                "box": {"x": el.box.x, "y": el.box.y, "w": el.box.w, "h": el.box.h},
                "text": list(el.text),
                "span": list(el.gt_span) if el.gt_span is not None else None,
            }
            for el in sample.elements
        ],
        "relations": None,
    }
    if sample.relations is not None:
        doc["relations"] = {name: sample.relations.by_name(name).astype(int).tolist() for name in RELATION_NAMES}
    return doc


def sample_from_dict(doc: dict) -> TableSample:
    h, w = int(doc["height"]), int(doc["width"])
    raw = base64.b64decode(doc["image_b64"])
    image = np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()
    elements = []
    for entry in doc["elements"]:
        b = entry["box"]
        span = entry.get("span")
        elements.append(
            TableElement(
                box=BoundingBox(float(b["x"]), float(b["y"]), float(b["w"]), float(b["h"])),
                text=[str(t) for t in entry.get("text", [])],
                gt_span=tuple(int(v) for v in span) if span is not None else None,
            )
        )
    relations = None
    rel = doc.get("relations")
    if rel is not None:
        relations = RelationMatrices(*(np.array(rel[name], dtype=np.uint8) for name in RELATION_NAMES))
    return TableSample(image=image, elements=elements, relations=relations)


def write_sample(sample: TableSample, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(sample_to_dict(sample), fh)
        fh.write("\n")


def read_sample(path) -> TableSample:
    with open(path, "r", encoding="utf-8") as fh:
        return sample_from_dict(json.load(fh))


def samples_equal(a: TableSample, b: TableSample) -> bool:
    if a.image.shape != b.image.shape or not np.array_equal(a.image, b.image):
        return False
    if len(a.elements) != len(b.elements):
        return False
    for ea, eb in zip(a.elements, b.elements):
        if (ea.box.x, ea.box.y, ea.box.w, ea.box.h) != (eb.box.x, eb.box.y, eb.box.w, eb.box.h):
            return False
        if ea.text != eb.text or ea.gt_span != eb.gt_span:
            return False
    if (a.relations is None) != (b.relations is None):
        return False
    if a.relations is not None:
        for name in RELATION_NAMES:
            if not np.array_equal(a.relations.by_name(name), b.relations.by_name(name)):
                return False
    return True
