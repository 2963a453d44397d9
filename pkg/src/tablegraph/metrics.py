"""Evaluation protocols: pairwise relation precision/recall/F1, ordered
tree-edit-distance similarity over structure trees, BLEU over HTML tag
sequences, and the entropy-based diversity of attention heads."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import RELATION_NAMES, RelationMatrices
from .errors import ContractError
from .postprocess import TreeNode


@dataclass
class RelationScore:
    precision: float
    recall: float
    f1: float
    true_positive: int
    pred_positive: int
    gt_positive: int
    degenerate_precision: bool = False
    degenerate_recall: bool = False


def _pair_counts(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    iu = np.triu_indices(gt.shape[0], k=1)
    p = pred[iu].astype(bool)
    g = gt[iu].astype(bool)
    return int((p & g).sum()), int(p.sum()), int(g.sum())


def score_from_counts(tp: int, pp: int, gp: int) -> RelationScore:
    precision = tp / pp if pp else 0.0
    recall = tp / gp if gp else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
    return RelationScore(
        precision=precision,
        recall=recall,
        f1=f1,
        true_positive=tp,
        pred_positive=pp,
        gt_positive=gp,
        degenerate_precision=pp == 0,
        degenerate_recall=gp == 0,
    )


def relation_f1(pred, gt: RelationMatrices) -> dict[str, RelationScore]:
    """Precision/recall/F1 per relation over unordered non-self pairs.

    ``pred`` is a RelationMatrices or a name -> (N, N) binary array map.
    Empty denominators score 0 and set the matching degenerate flag.
    """
    out = {}
    for name in RELATION_NAMES:
        p = pred.by_name(name) if isinstance(pred, RelationMatrices) else pred[name]
        g = gt.by_name(name)
        p = np.asarray(p)
        if p.shape != g.shape:
            raise ContractError(f"relation_f1: {name} shapes {p.shape} vs {g.shape}")
        out[name] = score_from_counts(*_pair_counts(p, g))
    return out


# ---------------------------------------------------------------------------
# tree edit distance


def _annotate(root: TreeNode):
    """Post-order nodes, leftmost-leaf descendants, and keyroots."""
    nodes: list[TreeNode] = []
    lmds: list[int] = []

    def walk(node) -> int:
        first = None
        for child in node.children:
            leaf = walk(child)
            first = leaf if first is None else first
        nodes.append(node)
        lmds.append(first if first is not None else len(nodes) - 1)
        return lmds[-1]

    walk(root)
    keyroots = sorted({lmd: i for i, lmd in enumerate(lmds)}.values())
    return nodes, lmds, keyroots


def tree_edit_distance(a: TreeNode, b: TreeNode) -> int:
    """Exact ordered tree edit distance with unit insert/delete/rename."""
    an, al, akr = _annotate(a)
    bn, bl, bkr = _annotate(b)
    dist = np.zeros((len(an), len(bn)), dtype=np.int64)

    for i in akr:
        for j in bkr:
            m = i - al[i] + 2
            n = j - bl[j] + 2
            fd = np.zeros((m, n), dtype=np.int64)
            ioff = al[i] - 1
            joff = bl[j] - 1
            for x in range(1, m):
                fd[x, 0] = fd[x - 1, 0] + 1
            for y in range(1, n):
                fd[0, y] = fd[0, y - 1] + 1
            for x in range(1, m):
                for y in range(1, n):
                    if al[i] == al[x + ioff] and bl[j] == bl[y + joff]:
                        rename = 0 if an[x + ioff].label == bn[y + joff].label else 1
                        fd[x, y] = min(fd[x - 1, y] + 1, fd[x, y - 1] + 1, fd[x - 1, y - 1] + rename)
                        dist[x + ioff, y + joff] = fd[x, y]
                    else:
                        p = al[x + ioff] - 1 - ioff
                        q = bl[y + joff] - 1 - joff
                        fd[x, y] = min(fd[x - 1, y] + 1, fd[x, y - 1] + 1, fd[p, q] + dist[x + ioff, y + joff])
    return int(dist[-1, -1])


def teds(a: TreeNode, b: TreeNode) -> float:
    """1 - edit_distance / max(size); 1.0 means identical structure."""
    return 1.0 - tree_edit_distance(a, b) / max(a.size(), b.size())


# ---------------------------------------------------------------------------
# bleu


def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(pairs: list[tuple[list[str], list[str]]], max_n: int = 4) -> float:
    """Clipped n-gram precision BLEU with brevity penalty, no smoothing."""
    clipped = [0] * max_n
    totals = [0] * max_n
    cand_len = 0
    ref_len = 0
    for candidate, reference in pairs:
        if not reference:
            raise ContractError("bleu: empty reference")
        cand_len += len(candidate)
        ref_len += len(reference)
        for n in range(1, max_n + 1):
            counts = _ngram_counts(candidate, n)
            ref_counts = _ngram_counts(reference, n)
            clipped[n - 1] += sum(min(c, ref_counts[g]) for g, c in counts.items())
            totals[n - 1] += sum(counts.values())
    if cand_len == 0 or any(t == 0 for t in totals) or any(c == 0 for c in clipped):
        return 0.0
    log_mean = sum(math.log(c / t) for c, t in zip(clipped, totals)) / max_n
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return brevity * math.exp(log_mean)


def bleu(candidate: list[str], reference: list[str], max_n: int = 4) -> float:
    return corpus_bleu([(candidate, reference)], max_n=max_n)


# ---------------------------------------------------------------------------
# attention diversity


def shannon_entropy(p: np.ndarray) -> float:
    """Natural-log entropy; zero probabilities contribute nothing."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def attention_jsd(rows) -> float:
    """Diversity of a set of attention distributions over shared keys:
    entropy of the mean distribution minus the mean entropy."""
    p = np.asarray(rows, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise ContractError(f"attention_jsd: need a (heads, keys) matrix, got {p.shape}")
    sums = p.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6 or p.min() < 0:
        raise ContractError("attention_jsd: rows must be probability vectors")
    mixture = p.mean(axis=0)
    value = shannon_entropy(mixture) - float(np.mean([shannon_entropy(r) for r in p]))
    return max(0.0, value)


def map_diversity(weights: np.ndarray) -> float:
    """Average over queries of the head-diversity of one attention map."""
    h, nq, _ = weights.shape
    return float(np.mean([attention_jsd(weights[:, q, :]) for q in range(nq)]))


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    relations: dict[str, RelationScore]
    overall: RelationScore
    teds: Optional[float] = None
    bleu: Optional[float] = None
    samples: int = 0
    structure_failures: int = 0
    jsd: dict[tuple[int, str, str], float] = field(default_factory=dict)

    @property
    def micro_f1(self) -> float:
        return self.overall.f1

    def as_keyvalues(self) -> str:
        lines = []
        for name in RELATION_NAMES:
            s = self.relations[name]
            lines.append(f"{name}.precision={s.precision:.6f}")
            lines.append(f"{name}.recall={s.recall:.6f}")
            lines.append(f"{name}.f1={s.f1:.6f}")
            if s.degenerate_precision:
                lines.append(f"{name}.degenerate_precision=1")
            if s.degenerate_recall:
                lines.append(f"{name}.degenerate_recall=1")
        lines.append(f"overall.precision={self.overall.precision:.6f}")
        lines.append(f"overall.recall={self.overall.recall:.6f}")
        lines.append(f"overall.f1={self.overall.f1:.6f}")
        if self.teds is not None:
            lines.append(f"teds={self.teds:.6f}")
        if self.bleu is not None:
            lines.append(f"bleu={self.bleu:.6f}")
        lines.append(f"samples={self.samples}")
        lines.append(f"structure_failures={self.structure_failures}")
        for (block, modality, unit), value in sorted(self.jsd.items()):
            lines.append(f"jsd.block{block}.{modality}.{unit}={value:.6f}")
        return "\n".join(lines) + "\n"

    def as_table(self) -> str:
        header = f"{'relation':<10}{'precision':>11}{'recall':>11}{'f1':>11}{'tp':>8}{'pred+':>8}{'gt+':>8}"
        rows = [header, "-" * len(header)]
        for name in (*RELATION_NAMES, "overall"):
            s = self.overall if name == "overall" else self.relations[name]
            flag = "*" if (s.degenerate_precision or s.degenerate_recall) else " "
            rows.append(
                f"{name:<10}{s.precision:>11.4f}{s.recall:>11.4f}{s.f1:>11.4f}"
                f"{s.true_positive:>8}{s.pred_positive:>8}{s.gt_positive:>7}{flag}"
            )
        extra = []
        if self.teds is not None:
            extra.append(f"TEDS  {self.teds:.4f}")
        if self.bleu is not None:
            extra.append(f"BLEU  {self.bleu:.4f}")
        extra.append(f"samples {self.samples}, structure failures {self.structure_failures}")
        return "\n".join(rows) + "\n" + "\n".join(extra) + "\n"
