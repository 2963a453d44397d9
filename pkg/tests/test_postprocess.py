import numpy as np
import pytest

from tablegraph.data import BoundingBox, TableElement, build_adjacency
from tablegraph.errors import ContractError, GridConflictError
from tablegraph.postprocess import (
    atomic_groups,
    belonging_lists,
    build_structure_tree,
    parse_xml,
    recover_spans,
    to_html,
    to_spans,
    to_xml,
    tree_tokens,
)


def element(x, y, w=8.0, h=4.0, span=None, text=()):
    return TableElement(box=BoundingBox(x, y, w, h), text=list(text), gt_span=span)


def grid(rows, cols, merges=()):
    """Regular grid with optional merged regions given as span tuples."""
    taken = set()
    for r0, r1, c0, c1 in merges:
        taken.update((r, c) for r in range(r0, r1 + 1) for c in range(c0, c1 + 1))
    els = []
    for r0, r1, c0, c1 in merges:
        els.append(element(20 * (c0 + c1) / 2 + 10, 12 * (r0 + r1) / 2 + 6, span=(r0, r1, c0, c1)))
    for r in range(rows):
        for c in range(cols):
            if (r, c) not in taken:
                els.append(element(20 * c + 10, 12 * r + 6, span=(r, r, c, c)))
    return els


class TestBelongingLists:
    def test_identity_gives_singletons(self):
        groups = belonging_lists(np.eye(4))
        assert groups == [[0], [1], [2], [3]]

    def test_all_ones_gives_one_group(self):
        groups = belonging_lists(np.ones((5, 5)))
        assert groups == [[0, 1, 2, 3, 4]]

    def test_two_cliques_match_union_find_oracle(self):
        adj = np.eye(5)
        for i, j in ((0, 1), (1, 2), (3, 4)):
            adj[i, j] = adj[j, i] = 1.0
        groups = belonging_lists(adj)

        parent = list(range(5))

        def find(a):
            while parent[a] != a:
                a = parent[a]
            return a

        for i in range(5):
            for j in range(5):
                if adj[i, j] >= 0.5:
                    parent[find(i)] = find(j)
        oracle = {}
        for k in range(5):
            oracle.setdefault(find(k), []).append(k)
        assert sorted(groups) == sorted(sorted(v) for v in oracle.values())

    def test_asymmetric_input_symmetrized_by_max(self):
        adj = np.eye(3)
        adj[0, 1] = 0.9  # only one direction above threshold
        assert belonging_lists(adj, threshold=0.5) == [[0, 1], [2]]

    def test_threshold_monotone_component_count(self):
        rng = np.random.default_rng(3)
        probs = rng.uniform(size=(8, 8))
        probs = np.maximum(probs, probs.T)
        counts = [len(belonging_lists(probs, threshold=t)) for t in np.linspace(0.05, 0.95, 10)]
        assert all(a <= b for a, b in zip(counts, counts[1:]))

    def test_non_square_rejected(self):
        with pytest.raises(ContractError):
            belonging_lists(np.zeros((2, 3)))

    def test_ordering_by_keys(self):
        adj = np.eye(4)
        adj[0, 1] = adj[1, 0] = 1
        adj[2, 3] = adj[3, 2] = 1
        groups = belonging_lists(adj, order_keys=[10.0, 10.0, 1.0, 1.0])
        assert groups == [[2, 3], [0, 1]]


class TestAtomicGroups:
    def test_plain_grid_equals_components(self):
        els = grid(2, 2)
        rel = build_adjacency(els)
        tops = [el.box.top for el in els]
        assert atomic_groups(rel.row, order_keys=tops) == belonging_lists(rel.row, order_keys=tops)

    def test_spanning_element_appears_in_both_rows(self):
        els = [
            element(10, 12, span=(0, 1, 0, 0)),
            element(30, 6, span=(0, 0, 1, 1)),
            element(30, 18, span=(1, 1, 1, 1)),
        ]
        rel = build_adjacency(els)
        groups = atomic_groups(rel.row, order_keys=[el.box.top for el in els])
        assert groups == [[0, 1], [0, 2]]


class TestToSpans:
    def test_regular_grid(self):
        els = grid(2, 2)
        rel = build_adjacency(els)
        spans = recover_spans(rel.row, rel.col, rel.cell, els)
        assert spans == [el.gt_span for el in els]

    def test_header_spanning_five_columns(self):
        els = grid(2, 5, merges=[(0, 0, 0, 4)])
        rel = build_adjacency(els)
        spans = recover_spans(rel.row, rel.col, rel.cell, els)
        assert spans[0] == (0, 0, 0, 4)

    def test_multi_group_membership_stretches(self):
        els = [
            element(10, 12, span=(0, 1, 0, 0)),
            element(30, 6, span=(0, 0, 1, 1)),
            element(30, 18, span=(1, 1, 1, 1)),
        ]
        row_groups = [[0, 1], [0, 2]]
        col_groups = [[0], [1, 2]]
        spans = to_spans(row_groups, col_groups, [[0], [1], [2]], els)
        assert spans == [(0, 1, 0, 0), (0, 0, 1, 1), (1, 1, 1, 1)]

    def test_cell_group_merges_to_union(self):
        els = grid(1, 2)
        spans = to_spans([[0, 1]], [[0], [1]], [[0, 1]], els)
        assert spans == [(0, 0, 0, 1), (0, 0, 0, 1)]

    def test_uncovered_element_rejected(self):
        els = grid(1, 2)
        with pytest.raises(ContractError, match="element 1"):
            to_spans([[0]], [[0], [1]], [[0], [1]], els)

    def test_round_trip_with_spans(self):
        els = grid(3, 3, merges=[(0, 1, 0, 0), (2, 2, 1, 2)])
        rel = build_adjacency(els)
        spans = recover_spans(rel.row, rel.col, rel.cell, els)
        assert spans == [el.gt_span for el in els]


class TestHtml:
    def test_single_cell(self):
        assert to_html([(0, 0, 0, 0)]) == ["<table>", "<tr>", "<td>", "</td>", "</tr>", "</table>"]

    def test_merged_top_row(self):
        spans = [(0, 0, 0, 1), (1, 1, 0, 0), (1, 1, 1, 1)]
        tokens = to_html(spans)
        assert tokens == [
            "<table>",
            "<tr>", "<td colspan=2>", "</td>", "</tr>",
            "<tr>", "<td>", "</td>", "<td>", "</td>", "</tr>",
            "</table>",
        ]

    def test_rowspan_emitted_once(self):
        spans = [(0, 1, 0, 0), (0, 0, 1, 1), (1, 1, 1, 1)]
        tokens = to_html(spans)
        assert tokens.count("<td rowspan=2>") == 1
        assert tokens.count("<tr>") == 2

    def test_balanced_tags(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            els = grid(int(rng.integers(1, 4)), int(rng.integers(1, 4)))
            tokens = to_html([el.gt_span for el in els])
            depth = 0
            for token in tokens:
                if token.startswith("</"):
                    depth -= 1
                else:
                    depth += 1
                assert depth >= 0
            assert depth == 0

    def test_overlap_raises_structured_error(self):
        spans = [(0, 0, 0, 1), (0, 0, 1, 1)]
        with pytest.raises(GridConflictError) as err:
            to_html(spans)
        assert err.value.conflicts
        (a, b, r, c) = err.value.conflicts[0]
        assert (r, c) == (0, 1)


class TestXml:
    def test_single_element(self):
        els = grid(1, 1)
        text = to_xml([(0, 0, 0, 0)], els)
        cells = parse_xml(text)
        assert len(cells) == 1
        assert cells[0]["span"] == (0, 0, 0, 0)

    def test_reparse_equals_spans(self):
        els = grid(2, 3, merges=[(0, 0, 0, 1)])
        spans = [el.gt_span for el in els]
        cells = parse_xml(to_xml(spans, els))
        assert sorted(c["span"] for c in cells) == sorted(set(spans))

    def test_row_major_cell_order(self):
        els = grid(2, 2)
        cells = parse_xml(to_xml([el.gt_span for el in els], els))
        assert [c["span"] for c in cells] == [(0, 0, 0, 0), (0, 0, 1, 1), (1, 1, 0, 0), (1, 1, 1, 1)]

    def test_content_and_box_recorded(self):
        els = grid(1, 2)
        els[0].text = ["alpha", "beta"]
        cells = parse_xml(to_xml([el.gt_span for el in els], els))
        assert cells[0]["content"] == "alpha beta"
        x, y, w, h = cells[0]["box"]
        assert w > 0 and h > 0


def test_tree_structure_and_size():
    tree = build_structure_tree([(0, 0, 0, 0), (0, 0, 1, 1), (1, 1, 0, 1)])
    assert tree.tag == "table"
    assert [len(tr.children) for tr in tree.children] == [2, 1]
    assert tree.size() == 6
    assert tree_tokens(tree)[0] == "<table>"
