"""Pairwise relation prediction and the multi-task training loss.

Element embeddings are concatenated into ordered-pair vectors; three
independent FC stacks (one per relation kind) classify each pair as
same-cell / same-row / same-column. Training draws a fixed-size Monte
Carlo subset of pairs per anchor; inference scores all N^2 pairs. The
loss couples softmax classification with a margin contrastive term on
the raw embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import glorot
from .data import RELATION_NAMES, RelationMatrices
from .errors import ContractError
from .tensor import ParamStore, Tensor

HEAD_WIDTH = 256


@dataclass
class PairBatch:
    """Ordered element pairs and their concatenated embedding vectors."""

    pairs: np.ndarray  # (P, 2) int
    vectors: Tensor  # (P, 2 * d_e)
    labels: Optional[dict[str, np.ndarray]] = None


@dataclass
class RelationLogits:
    cell: Tensor
    row: Tensor
    col: Tensor

    def by_name(self, name: str) -> Tensor:
        if name not in RELATION_NAMES:
            raise ContractError(f"unknown relation {name!r}")
        return getattr(self, name)

    def probabilities(self, name: str) -> np.ndarray:
        """Softmax probability of the positive class per pair."""
        z = self.by_name(name).data
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e[:, 1] / e.sum(axis=1)


def pair_vectors(e: Tensor, i_idx: np.ndarray, j_idx: np.ndarray) -> Tensor:
    return T.concat_cols([T.take_rows(e, i_idx), T.take_rows(e, j_idx)])


def pair_embeddings(e: Tensor) -> PairBatch:
    """All N^2 ordered pairs, self-pairs included, in row-major (i, j) order."""
    n = e.shape[0]
    if n < 1:
        raise ContractError("pair_embeddings: empty embedding")
    i_idx = np.repeat(np.arange(n), n)
    j_idx = np.tile(np.arange(n), n)
    return PairBatch(pairs=np.stack([i_idx, j_idx], axis=1), vectors=pair_vectors(e, i_idx, j_idx))


# ---------------------------------------------------------------------------
# classifier heads


def init_head(store: ParamStore, in_width: int, rng: np.random.Generator, prefix: str = "head"):
    for name in RELATION_NAMES:
        widths = [in_width, HEAD_WIDTH, HEAD_WIDTH, HEAD_WIDTH, 2]
        for k in range(4):
            store.add(f"{prefix}/{name}/fc{k}/weight", glorot(rng, widths[k], widths[k + 1]))
            store.add(f"{prefix}/{name}/fc{k}/bias", np.zeros(widths[k + 1]))


def _relation_mlp(vectors: Tensor, store: ParamStore, prefix: str, name: str) -> Tensor:
    expected = store[f"{prefix}/{name}/fc0/weight"].shape[0]
    if vectors.shape[1] != expected:
        raise ContractError(f"classify_relations: pair width {vectors.shape[1]} != built width {expected}")
    h = vectors
    for k in range(3):
        h = T.relu(T.add_bias(T.matmul(h, store[f"{prefix}/{name}/fc{k}/weight"]), store[f"{prefix}/{name}/fc{k}/bias"]))
    return T.add_bias(T.matmul(h, store[f"{prefix}/{name}/fc3/weight"]), store[f"{prefix}/{name}/fc3/bias"])


def classify_relations(batch: PairBatch, store: ParamStore, prefix: str = "head") -> RelationLogits:
    """Three independent relation classifiers over one pair batch."""
    return RelationLogits(*(_relation_mlp(batch.vectors, store, prefix, name) for name in RELATION_NAMES))


# ---------------------------------------------------------------------------
# Monte Carlo pair sampling


@dataclass
class RelationDraw:
    i_idx: np.ndarray  # (S * N,) anchors
    j_idx: np.ndarray  # (S * N,) partners
    labels: np.ndarray  # (S * N,) 0/1
    pos_j: np.ndarray  # (N,) contrast positive per anchor (may be the anchor itself)
    neg_j: np.ndarray  # (N,) contrast negative per anchor, -1 when none exists


@dataclass
class MonteCarloDraw:
    relations: dict[str, RelationDraw]
    sample_size: int


def _draw_from(rng: np.random.Generator, candidates: np.ndarray, count: int) -> np.ndarray:
    if count == 0:
        return np.empty(0, dtype=np.intp)
    replace = candidates.size < count
    return rng.choice(candidates, size=count, replace=replace).astype(np.intp)


def monte_carlo_sample(gt: RelationMatrices, sample_size: int, rng_seed: int) -> MonteCarloDraw:
    """Per anchor and relation, draw ``sample_size`` labeled pairs.

    Up to ceil(S/2) positives and the rest negatives, uniformly, with
    replacement once a class runs out of distinct members; an empty class
    hands its quota to the other one. One contrastive (positive, negative)
    partner per anchor is drawn from the same stream.
    """
    s = int(sample_size)
    if s < 2:
        raise ContractError(f"monte_carlo_sample: sample size {s} < 2")
    rng = np.random.default_rng(rng_seed)
    n = gt.n
    out: dict[str, RelationDraw] = {}
    pos_quota = -(-s // 2)  # ceil
    for name in RELATION_NAMES:
        matrix = gt.by_name(name)
        i_all, j_all, labels = [], [], []
        pos_pick = np.empty(n, dtype=np.intp)
        neg_pick = np.empty(n, dtype=np.intp)
        for anchor in range(n):
            row = matrix[anchor]
            positives = np.flatnonzero(row == 1)
            negatives = np.flatnonzero(row == 0)
            want_pos = pos_quota if negatives.size else s
            want_neg = s - want_pos if positives.size else s
            drawn_pos = _draw_from(rng, positives, want_pos)
            drawn_neg = _draw_from(rng, negatives, want_neg)
            i_all.append(np.full(drawn_pos.size + drawn_neg.size, anchor, dtype=np.intp))
            j_all.append(np.concatenate([drawn_pos, drawn_neg]))
            labels.append(np.concatenate([np.ones(drawn_pos.size, dtype=np.intp), np.zeros(drawn_neg.size, dtype=np.intp)]))
            nonself = positives[positives != anchor]
            pos_pick[anchor] = rng.choice(nonself) if nonself.size else anchor
            neg_pick[anchor] = rng.choice(negatives) if negatives.size else -1
        out[name] = RelationDraw(
            i_idx=np.concatenate(i_all),
            j_idx=np.concatenate(j_all),
            labels=np.concatenate(labels),
            pos_j=pos_pick,
            neg_j=neg_pick,
        )
    return MonteCarloDraw(relations=out, sample_size=s)


def sampled_logits(e: Tensor, draw: MonteCarloDraw, store: ParamStore, prefix: str = "head") -> RelationLogits:
    """Classifier logits for each relation's sampled pair subset."""
    per = {}
    for name in RELATION_NAMES:
        r = draw.relations[name]
        per[name] = _relation_mlp(pair_vectors(e, r.i_idx, r.j_idx), store, prefix, name)
    return RelationLogits(**per)


# ---------------------------------------------------------------------------
# loss


def relation_loss(logits: RelationLogits, e: Tensor, draw: MonteCarloDraw,
                  lam1: float = 1.0, lam2: float = 1.0, alpha: float = 1.0) -> Tensor:
    """Summed per-relation loss: lam1 * classification + lam2 * contrastive.

    Classification is the mean negative log softmax probability of the true
    class over the sampled pairs. The contrastive term averages, over
    anchors, the squared distance to the drawn positive plus the hinge
    max(0, alpha - squared distance to the drawn negative); anchors with no
    negative at all contribute only the positive pull.
    """
    if lam1 < 0 or lam2 < 0:
        raise ContractError("relation_loss: negative loss weights")
    n = e.shape[0]
    total = None
    for name in RELATION_NAMES:
        r = draw.relations[name]
        log_probs = T.log_softmax_rows(logits.by_name(name))
        cls = T.scale(T.mean_all(T.pick(log_probs, r.labels)), -1.0)

        pos_diff = T.sub(e, T.take_rows(e, r.pos_j))
        pos_sum = T.sum_all(T.sum_cols(T.mul(pos_diff, pos_diff)))
        con = pos_sum
        valid = np.flatnonzero(r.neg_j >= 0)
        if valid.size:
            anchors_v = T.take_rows(e, valid)
            negs_v = T.take_rows(e, r.neg_j[valid])
            neg_diff = T.sub(anchors_v, negs_v)
            neg_d2 = T.sum_cols(T.mul(neg_diff, neg_diff))
            hinge = T.relu(T.add_const(T.scale(neg_d2, -1.0), float(alpha)))
            con = T.add(con, T.sum_all(hinge))
        con = T.scale(con, 1.0 / n)

        part = T.add(T.scale(cls, float(lam1)), T.scale(con, float(lam2)))
        total = part if total is None else T.add(total, part)
    return total


def relation_probability_matrices(e: Tensor, store: ParamStore, prefix: str = "head") -> dict[str, np.ndarray]:
    """Full-pair inference: positive-class probability reshaped to (N, N)."""
    n = e.shape[0]
    batch = pair_embeddings(e)
    logits = classify_relations(batch, store, prefix)
    return {name: logits.probabilities(name).reshape(n, n) for name in RELATION_NAMES}
