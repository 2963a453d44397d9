"""End-to-end optimization: Adam steps over per-table losses, a
divide-on-plateau learning-rate rule, deterministic logging, checkpoints
of the best validation loss, and the evaluation pass that turns a model
into a metrics report."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import model as M
from .data import RELATION_NAMES, RelationMatrices, TableSample, validate
from .errors import ContractError, NumericalError
from .metrics import MetricsReport, bleu as bleu_score, corpus_bleu, relation_f1, score_from_counts, teds
from .model import ModelConfig
from .postprocess import GridConflictError, build_structure_tree, recover_spans, tree_tokens
from .tensor import ParamStore, Tensor, backward, save_checkpoint


@dataclass
class TrainConfig:
    lr: float = 1e-4
    plateau_patience: int = 10
    lr_decay: float = 0.1
    epochs: int = 1
    seed: int = 0
    lam1: float = 1.0
    lam2: float = 1.0
    alpha: float = 1.0
    sample_size: int = 10
    model: ModelConfig = field(default_factory=ModelConfig)
    val_every: int = 10
    min_improve: float = 1e-6
    threshold: float = 0.5
    debug_checks: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError(f"learning rate {self.lr} must be positive")
        if not (0.0 < self.lr_decay < 1.0):
            raise ContractError(f"lr decay {self.lr_decay} outside (0, 1)")
        if self.epochs < 0:
            raise ContractError(f"epochs {self.epochs} negative")
        if self.plateau_patience < 1:
            raise ContractError(f"plateau patience {self.plateau_patience} < 1")


@dataclass
class EpochLog:
    epoch: int
    loss: float
    lr: float
    val_loss: float = math.nan
    val_f1: float = math.nan

    def line(self) -> str:
        val = "-" if math.isnan(self.val_f1) else f"{self.val_f1:.6f}"
        return f"epoch={self.epoch} loss={self.loss:.10f} lr={self.lr:.10g} val_f1={val}"


def format_log(logs: list[EpochLog]) -> str:
    return "\n".join(entry.line() for entry in logs) + ("\n" if logs else "")


class Adam:
    """Adaptive moment estimation with the standard defaults.

    Moments live in one flat buffer so the update is a handful of
    contiguous vector passes regardless of how many parameters exist.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._bound = None
        self._m = self._v = self._g = None

    def _bind(self, store: ParamStore):
        self._bound = []
        offset = 0
        for p in store.parameters():
            size = p.tensor.data.size
            self._bound.append((p, p.name, offset, offset + size))
            offset += size
        self._m = np.zeros(offset)
        self._v = np.zeros(offset)
        self._g = np.empty(offset)

    def step(self, store: ParamStore, grads: dict[str, Tensor], lr: float):
        if self._bound is None:
            self._bind(store)
        self.t += 1
        g = self._g
        for _, name, lo, hi in self._bound:
            g[lo:hi] = grads[name].data.reshape(-1)
        m, v = self._m, self._v
        m *= self.beta1
        m += (1 - self.beta1) * g
        v *= self.beta2
        g *= g
        v += (1 - self.beta2) * g
        denom = np.sqrt(v / (1 - self.beta2**self.t))
        denom += self.eps
        update = m / denom
        update *= lr / (1 - self.beta1**self.t)
        for p, _, lo, hi in self._bound:
            p.tensor.data -= update[lo:hi].reshape(p.tensor.data.shape)


def lr_step(history: list[float], cfg: TrainConfig) -> float:
    """Learning rate after the given loss history under the plateau rule:
    no improvement beyond min_improve for plateau_patience epochs decays
    the rate by lr_decay (and the patience counter restarts)."""
    lr = cfg.lr
    best = math.inf
    wait = 0
    for loss in history:
        if loss < best - cfg.min_improve:
            best = loss
            wait = 0
        else:
            wait += 1
            if wait >= cfg.plateau_patience:
                lr *= cfg.lr_decay
                wait = 0
    return lr


def _draw_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(epoch), int(index))).generate_state(1)[0])


def _check_dataset(dataset: list[TableSample], cfg: ModelConfig, label: str):
    if not dataset:
        raise ContractError(f"{label} dataset is empty")
    for k, sample in enumerate(dataset):
        problems = validate(sample)
        if problems:
            raise ContractError(f"{label} sample {k} invalid: {problems[0]}")
        M.check_ingest(sample, cfg)


def _dataset_loss(encs, dataset, store, cfg: TrainConfig, seed: int) -> float:
    total = 0.0
    for idx, (enc, sample) in enumerate(zip(encs, dataset)):
        loss = M.training_loss(
            enc, sample.relations, store, cfg.model, cfg.sample_size,
            _draw_seed(seed, 0, idx), lam1=cfg.lam1, lam2=cfg.lam2, alpha=cfg.alpha,
        )
        total += loss.item()
    return total / len(dataset)


def train(dataset: list[TableSample], cfg: TrainConfig, val_dataset: Optional[list[TableSample]] = None,
          checkpoint_path=None, log_path=None) -> tuple[ParamStore, list[EpochLog]]:
    """Optimize on the dataset; deterministic given (seed, data, config).

    The checkpoint, when a path is given, holds the parameters with the
    best validation loss (training loss when no validation set is given).
    """
    _check_dataset(dataset, cfg.model, "train")
    if val_dataset:
        _check_dataset(val_dataset, cfg.model, "validation")

    store = M.build_model(cfg.model, cfg.seed)
    encs = [M.encode(s, cfg.model) for s in dataset]
    val_encs = [M.encode(s, cfg.model) for s in (val_dataset or [])]

    adam = Adam()
    logs: list[EpochLog] = []
    history: list[float] = []
    lr = cfg.lr
    best_metric = math.inf
    best_snapshot = {p.name: p.tensor.data.copy() for p in store.parameters()}

    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for idx, (enc, sample) in enumerate(zip(encs, dataset)):
            loss = M.training_loss(
                enc, sample.relations, store, cfg.model, cfg.sample_size,
                _draw_seed(cfg.seed, epoch, idx), lam1=cfg.lam1, lam2=cfg.lam2, alpha=cfg.alpha,
            )
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, sample {idx}")
            grads = backward(loss, store)
            adam.step(store, grads, lr)
            if cfg.debug_checks and not store.all_finite():
                raise NumericalError(f"non-finite parameter after epoch {epoch}, sample {idx}")
            epoch_loss += value
        epoch_loss /= len(dataset)
        if not store.all_finite():
            raise NumericalError(f"non-finite parameter after epoch {epoch}")

        history.append(epoch_loss)
        lr = lr_step(history, cfg)

        val_loss = math.nan
        val_f1 = math.nan
        measure = bool(val_dataset) and (epoch % cfg.val_every == cfg.val_every - 1 or epoch == cfg.epochs - 1)
        if measure:
            val_loss = _dataset_loss(val_encs, val_dataset, store, cfg, cfg.seed ^ 0x7A11)
            val_f1 = evaluate(store, cfg.model, val_dataset, threshold=cfg.threshold, structure=False).micro_f1

        metric = val_loss if measure else (math.nan if val_dataset else epoch_loss)
        if not math.isnan(metric) and metric < best_metric:
            best_metric = metric
            best_snapshot = {p.name: p.tensor.data.copy() for p in store.parameters()}

        logs.append(EpochLog(epoch=epoch, loss=epoch_loss, lr=lr, val_loss=val_loss, val_f1=val_f1))

    if checkpoint_path is not None:
        final = ParamStore()
        source = best_snapshot if cfg.epochs > 0 else {p.name: p.tensor.data for p in store.parameters()}
        for name, value in source.items():
            final.add(name, value)
        save_checkpoint(final, checkpoint_path)
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write(format_log(logs))
    return store, logs


# ---------------------------------------------------------------------------
# evaluation


def predicted_binary(probs: dict[str, np.ndarray], threshold: float) -> dict[str, np.ndarray]:
    return {name: (np.maximum(m, m.T) >= threshold).astype(np.uint8) for name, m in probs.items()}


def evaluate(store: ParamStore, cfg: ModelConfig, dataset: list[TableSample], threshold: float = 0.5,
             structure: bool = True) -> MetricsReport:
    """Full unsampled pairwise inference plus post-processing metrics.

    Relation scores pool pair counts over the whole dataset; TEDS is the
    mean tree similarity and BLEU the corpus score over HTML sequences.
    Samples whose predicted grid is inconsistent count as structure
    failures and score zero TEDS there.
    """
    if not (0.0 < threshold < 1.0):
        raise ContractError(f"threshold {threshold} outside (0, 1)")
    _check_dataset(dataset, cfg, "evaluation")

    counts = {name: [0, 0, 0] for name in RELATION_NAMES}
    teds_values = []
    bleu_pairs = []
    failures = 0
    for sample in dataset:
        enc = M.encode(sample, cfg)
        probs, _ = M.predict(enc, store, cfg)
        binary = predicted_binary(probs, threshold)
        scores = relation_f1(binary, sample.relations)
        for name in RELATION_NAMES:
            counts[name][0] += scores[name].true_positive
            counts[name][1] += scores[name].pred_positive
            counts[name][2] += scores[name].gt_positive
        if not structure:
            continue
        gt_spans = [el.gt_span for el in sample.elements]
        gt_tree = build_structure_tree(gt_spans)
        gt_tokens = tree_tokens(gt_tree)
        try:
            spans = recover_spans(binary["row"], binary["col"], binary["cell"], sample.elements, threshold)
            tree = build_structure_tree(spans)
            teds_values.append(teds(gt_tree, tree))
            bleu_pairs.append((tree_tokens(tree), gt_tokens))
        except (GridConflictError, ContractError):
            failures += 1
            teds_values.append(0.0)
            bleu_pairs.append(([], gt_tokens))

    relations = {name: score_from_counts(*counts[name]) for name in RELATION_NAMES}
    overall = score_from_counts(
        sum(counts[n][0] for n in RELATION_NAMES),
        sum(counts[n][1] for n in RELATION_NAMES),
        sum(counts[n][2] for n in RELATION_NAMES),
    )
    report = MetricsReport(relations=relations, overall=overall, samples=len(dataset), structure_failures=failures)
    if structure:
        report.teds = float(np.mean(teds_values)) if teds_values else None
        usable = [(c, r) for c, r in bleu_pairs if c]
        report.bleu = corpus_bleu(usable) if usable else 0.0
    return report


def gt_as_prediction_report(dataset: list[TableSample], threshold: float = 0.5) -> MetricsReport:
    """Oracle identity: feed ground truth through the metric pipeline."""
    counts = {name: [0, 0, 0] for name in RELATION_NAMES}
    teds_values = []
    bleu_pairs = []
    failures = 0
    for sample in dataset:
        rel = sample.relations
        scores = relation_f1(rel, rel)
        for name in RELATION_NAMES:
            counts[name][0] += scores[name].true_positive
            counts[name][1] += scores[name].pred_positive
            counts[name][2] += scores[name].gt_positive
        gt_tree = build_structure_tree([el.gt_span for el in sample.elements])
        try:
            spans = recover_spans(rel.row, rel.col, rel.cell, sample.elements, threshold)
            tree = build_structure_tree(spans)
            teds_values.append(teds(gt_tree, tree))
            bleu_pairs.append((tree_tokens(tree), tree_tokens(gt_tree)))
        except (GridConflictError, ContractError):
            failures += 1
            teds_values.append(0.0)
    relations = {name: score_from_counts(*counts[name]) for name in RELATION_NAMES}
    overall = score_from_counts(
        sum(counts[n][0] for n in RELATION_NAMES),
        sum(counts[n][1] for n in RELATION_NAMES),
        sum(counts[n][2] for n in RELATION_NAMES),
    )
    return MetricsReport(
        relations=relations,
        overall=overall,
        teds=float(np.mean(teds_values)) if teds_values else None,
        bleu=corpus_bleu(bleu_pairs) if bleu_pairs else None,
        samples=len(dataset),
        structure_failures=failures,
    )


# ---------------------------------------------------------------------------
# block sweep harness


def block_sweep(dataset: list[TableSample], cfg: TrainConfig, block_counts: list[int],
                val_dataset: Optional[list[TableSample]] = None) -> tuple[list[tuple[int, float]], str]:
    """Train once per block count and tabulate F1 against depth."""
    results = []
    for blocks in block_counts:
        sweep_cfg = replace(cfg, model=replace(cfg.model, blocks=blocks))
        store, _ = train(dataset, sweep_cfg, val_dataset=val_dataset)
        report = evaluate(store, sweep_cfg.model, val_dataset or dataset, threshold=cfg.threshold, structure=False)
        results.append((blocks, report.micro_f1))
    lines = [f"{'blocks':>7} {'f1':>9}", "-" * 17]
    lines += [f"{blocks:>7} {f1:>9.4f}" for blocks, f1 in results]
    return results, "\n".join(lines) + "\n"
