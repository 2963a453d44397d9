"""Convert relation matrices into physical spans (XML) and logical
structure (HTML tag sequences).

``belonging_lists`` is the plain grouping primitive: threshold, symmetrize
by element-wise max, connected components. Cells are a true equivalence,
so components recover them directly. Rows and columns need more care once
spanning cells exist, because a spanning element bridges otherwise
disjoint rows into one component: ``atomic_groups`` finds the grid rows
(columns) as neighborhood-equivalence classes that are not dominated by a
strictly larger class, then lists every adjacent element, so a spanning
element appears in several groups and ``to_spans`` can stretch it from
the lowest to the highest group index.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

import numpy as np

from .data import TableElement
from .errors import ContractError, GridConflictError


def _binary_symmetric(adj: np.ndarray, threshold: float) -> np.ndarray:
    a = np.asarray(adj, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"belonging: matrix must be square, got {a.shape}")
    sym = np.maximum(a, a.T)
    out = (sym >= threshold).astype(np.uint8)
    np.fill_diagonal(out, 1)
    return out


def _components(binary: np.ndarray) -> list[list[int]]:
    n = binary.shape[0]
    seen = np.zeros(n, dtype=bool)
    groups = []
    for start in range(n):
        if seen[start]:
            continue
        stack, members = [start], []
        seen[start] = True
        while stack:
            k = stack.pop()
            members.append(k)
            for j in np.flatnonzero(binary[k]):
                if not seen[j]:
                    seen[j] = True
                    stack.append(int(j))
        groups.append(sorted(members))
    return groups


def _order_groups(groups: list[list[int]], order_keys) -> list[list[int]]:
    if order_keys is None:
        return sorted(groups, key=min)
    keys = np.asarray(order_keys, dtype=np.float64)
    return sorted(groups, key=lambda g: (float(keys[g].mean()), min(g)))


def belonging_lists(adj: np.ndarray, threshold: float = 0.5, order_keys=None) -> list[list[int]]:
    """Connected components of the thresholded, max-symmetrized matrix.

    Groups come back ordered by the mean of ``order_keys`` over members
    (sorting coordinate of the relation kind), or by smallest member.
    """
    return _order_groups(_components(_binary_symmetric(adj, threshold)), order_keys)


def atomic_groups(adj: np.ndarray, threshold: float = 0.5, order_keys=None) -> list[list[int]]:
    """One ordered group per grid row/column; spanning elements repeat.

    Elements with identical closed neighborhoods share a span range; a
    range is atomic (a real grid row) when no other class sees a strictly
    smaller neighborhood. Each atomic class's group is everything adjacent
    to it.
    """
    binary = _binary_symmetric(adj, threshold)
    n = binary.shape[0]
    classes: dict[bytes, list[int]] = {}
    for k in range(n):
        classes.setdefault(binary[k].tobytes(), []).append(k)

    reps = [members[0] for members in classes.values()]
    neigh = [frozenset(np.flatnonzero(binary[r]).tolist()) for r in reps]
    atoms = []
    for a in range(len(reps)):
        if not any(b != a and neigh[b] < neigh[a] for b in range(len(reps))):
            atoms.append(a)

    groups = [sorted(np.flatnonzero(binary[reps[a]]).tolist()) for a in atoms]
    if order_keys is None:
        return sorted(groups, key=min)
    keys = np.asarray(order_keys, dtype=np.float64)
    # order by the atomic class itself (its own members sit inside the band)
    anchors = [classes[binary[reps[a]].tobytes()] for a in atoms]
    order = np.argsort([keys[members].mean() for members in anchors], kind="stable")
    return [groups[i] for i in order]


# ---------------------------------------------------------------------------
# spans


def to_spans(row_groups: list[list[int]], col_groups: list[list[int]], cell_groups: list[list[int]],
             elements: list[TableElement]) -> list[tuple[int, int, int, int]]:
    """Per-element (start_row, end_row, start_col, end_col).

    Row groups get consecutive indexes by vertical order (mean top edge of
    members), columns by horizontal order; an element in several groups
    spans from the lowest to the highest index, and elements grouped into
    one cell share the union of their spans.
    """
    n = len(elements)
    tops = np.array([el.box.top for el in elements])
    lefts = np.array([el.box.left for el in elements])

    def ranges(groups, keys, kind):
        order = np.argsort([keys[g].mean() for g in groups], kind="stable")
        lo = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
        hi = np.full(n, -1, dtype=np.int64)
        for rank, gi in enumerate(order):
            for el in groups[gi]:
                lo[el] = min(lo[el], rank)
                hi[el] = max(hi[el], rank)
        missing = np.flatnonzero(hi < 0)
        if missing.size:
            raise ContractError(f"element {int(missing[0])} is in zero {kind} groups")
        return lo, hi

    r_lo, r_hi = ranges(row_groups, tops, "row")
    c_lo, c_hi = ranges(col_groups, lefts, "col")

    spans = [(int(r_lo[k]), int(r_hi[k]), int(c_lo[k]), int(c_hi[k])) for k in range(n)]
    for group in cell_groups:
        merged = (
            min(spans[k][0] for k in group),
            max(spans[k][1] for k in group),
            min(spans[k][2] for k in group),
            max(spans[k][3] for k in group),
        )
        for k in group:
            spans[k] = merged
    return spans


def recover_spans(row_adj, col_adj, cell_adj, elements: list[TableElement],
                  threshold: float = 0.5) -> list[tuple[int, int, int, int]]:
    """Full matrices-to-spans pipeline at one threshold."""
    tops = [el.box.top for el in elements]
    lefts = [el.box.left for el in elements]
    rows = atomic_groups(row_adj, threshold, order_keys=tops)
    cols = atomic_groups(col_adj, threshold, order_keys=lefts)
    cells = belonging_lists(cell_adj, threshold)
    return to_spans(rows, cols, cells, elements)


# ---------------------------------------------------------------------------
# structure tree


@dataclass
class TreeNode:
    tag: str
    rowspan: int = 1
    colspan: int = 1
    children: list["TreeNode"] = field(default_factory=list)

    @property
    def label(self) -> tuple:
        return (self.tag, self.rowspan, self.colspan)

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children)


def build_structure_tree(spans: list[tuple[int, int, int, int]]) -> TreeNode:
    """Grid tree (table -> tr -> td) from per-element spans.

    Elements sharing a span tuple are one logical cell. Overlapping cells
    raise GridConflictError; unfilled grid positions are permitted.
    """
    cells = sorted(set(spans))
    if not cells:
        raise ContractError("build_structure_tree: no spans")
    n_rows = max(s[1] for s in cells) + 1
    n_cols = max(s[3] for s in cells) + 1
    owner = np.full((n_rows, n_cols), -1, dtype=np.int64)
    conflicts = []
    for ci, (r0, r1, c0, c1) in enumerate(cells):
        for r in range(r0, r1 + 1):
            for c in range(c0, c1 + 1):
                if owner[r, c] >= 0:
                    conflicts.append((cells[owner[r, c]], cells[ci], r, c))
                else:
                    owner[r, c] = ci
    if conflicts:
        raise GridConflictError(conflicts)

    root = TreeNode("table")
    for r in range(n_rows):
        tr = TreeNode("tr")
        for r0, r1, c0, c1 in (s for s in cells if s[0] == r):
            tr.children.append(TreeNode("td", rowspan=r1 - r0 + 1, colspan=c1 - c0 + 1))
        root.children.append(tr)
    return root


def tree_tokens(root: TreeNode) -> list[str]:
    out = [f"<{root.tag}>"]
    for tr in root.children:
        out.append(f"<{tr.tag}>")
        for td in tr.children:
            attrs = ""
            if td.rowspan > 1:
                attrs += f" rowspan={td.rowspan}"
            if td.colspan > 1:
                attrs += f" colspan={td.colspan}"
            out.append(f"<td{attrs}>")
            out.append("</td>")
        out.append(f"</{tr.tag}>")
    out.append(f"</{root.tag}>")
    return out


def to_html(spans: list[tuple[int, int, int, int]]) -> list[str]:
    """HTML tag token sequence; each cell appears once, in its start row."""
    return tree_tokens(build_structure_tree(spans))


# ---------------------------------------------------------------------------
# xml


def to_xml(spans: list[tuple[int, int, int, int]], elements: list[TableElement]) -> str:
    """One cell node per logical cell: span attributes, box hull, content."""
    if len(spans) != len(elements):
        raise ContractError(f"to_xml: {len(spans)} spans for {len(elements)} elements")
    by_cell: dict[tuple, list[int]] = {}
    for k, span in enumerate(spans):
        by_cell.setdefault(span, []).append(k)
    root = ET.Element("table")
    for span in sorted(by_cell):
        members = by_cell[span]
        xs0 = min(elements[k].box.left for k in members)
        ys0 = min(elements[k].box.top for k in members)
        xs1 = max(elements[k].box.left + elements[k].box.w for k in members)
        ys1 = max(elements[k].box.top + elements[k].box.h for k in members)
        cell = ET.SubElement(
            root,
            "cell",
            {
                "start-row": str(span[0]),
                "end-row": str(span[1]),
                "start-col": str(span[2]),
                "end-col": str(span[3]),
                "x": repr(xs0),
                "y": repr(ys0),
                "w": repr(xs1 - xs0),
                "h": repr(ys1 - ys0),
            },
        )
        cell.text = " ".join(" ".join(elements[k].text) for k in members).strip()
    return ET.tostring(root, encoding="unicode")


def parse_xml(text: str) -> list[dict]:
    """Cell records back out of a document produced by to_xml."""
    root = ET.fromstring(text)
    out = []
    for cell in root.findall("cell"):
        out.append(
            {
                "span": (
                    int(cell.get("start-row")),
                    int(cell.get("end-row")),
                    int(cell.get("start-col")),
                    int(cell.get("end-col")),
                ),
                "box": (float(cell.get("x")), float(cell.get("y")), float(cell.get("w")), float(cell.get("h"))),
                "content": cell.text or "",
            }
        )
    return out
