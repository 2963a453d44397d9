"""Operator entry point.

Subcommands: ``generate`` (synthetic corpus), ``train`` (checkpoint +
log), ``eval`` (metrics reports), ``analyze`` (attention heatmaps and
head-diversity curves). Flags may be preloaded from a ``key=value``
config file via ``--config``; explicit flags win. Outputs land in a fixed
tree under ``--out``: corpus/, checkpoints/, reports/, maps/.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import model as M
from . import synth
from .data import RELATION_NAMES
from .errors import ContractError, GridConflictError, NumericalError
from .metrics import map_diversity
from .model import ModelConfig
from .postprocess import belonging_lists
from .tensor import restore_checkpoint
from .attention import write_pgm
from .trainer import TrainConfig, evaluate, gt_as_prediction_report, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _range_pair(text: str) -> tuple[int, int]:
    lo, _, hi = text.partition(":")
    return (int(lo), int(hi or lo))


def _size_pair(text: str) -> tuple[int, int]:
    h, _, w = text.lower().partition("x")
    return (int(h), int(w or h))


def _csv(text: str) -> tuple[str, ...]:
    return tuple(t for t in text.split(",") if t)


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--d", type=int, default=64, help="hidden width")
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--dk", type=int, default=8)
    p.add_argument("--dv", type=int, default=8)
    p.add_argument("--blocks", type=int, default=3)
    p.add_argument("--n-max", type=int, default=16)
    p.add_argument("--fusion", choices=["ccs", "concat", "early"], default="ccs")
    p.add_argument("--image-size", type=int, default=512)
    p.add_argument("--zero-modalities", type=_csv, default=(), help="comma list of modalities to ablate to zeros")


def _model_config(args) -> ModelConfig:
    return ModelConfig(
        d=args.d, heads=args.heads, d_k=args.dk, d_v=args.dv, blocks=args.blocks,
        n_max=args.n_max, fusion=args.fusion, image_size=args.image_size,
        zero_modalities=tuple(args.zero_modalities),
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="tablegraph")
    parser.add_argument("--config", type=str, default=None, help="key=value defaults file; flags override")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--count", type=int, default=20)
    g.add_argument("--val-count", type=int, default=0)
    g.add_argument("--test-count", type=int, default=0)
    g.add_argument("--rows", type=_range_pair, default=(2, 4), help="a:b inclusive range")
    g.add_argument("--cols", type=_range_pair, default=(2, 4))
    g.add_argument("--span-prob", type=float, default=0.2)
    g.add_argument("--canvas", type=_size_pair, default=(512, 512), help="HxW pixels")
    g.add_argument("--distort", choices=list(synth.DISTORTIONS), default="none")
    g.add_argument("--jitter", type=float, default=None)
    g.add_argument("--bend", type=float, default=None)

    t = sub.add_parser("train", help="train and write a checkpoint plus log")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--patience", type=int, default=10)
    t.add_argument("--decay", type=float, default=0.1)
    t.add_argument("--sample-size", type=int, default=10)
    t.add_argument("--lam1", type=float, default=1.0)
    t.add_argument("--lam2", type=float, default=1.0)
    t.add_argument("--alpha", type=float, default=1.0)
    t.add_argument("--threshold", type=float, default=0.5)
    t.add_argument("--val-every", type=int, default=10)
    _add_model_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or ground truth) into reports")
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--gt-as-pred", action="store_true", help="feed ground truth through the metric pipeline")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--threshold-sweep", action="store_true", help="emit component counts over a threshold grid")
    e.add_argument("--seed", type=int, default=0)
    _add_model_flags(e)

    a = sub.add_parser("analyze", help="dump attention heatmaps and head-diversity curves")
    a.add_argument("--corpus", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--checkpoint", default=None)
    a.add_argument("--split", default="train")
    a.add_argument("--sample-index", type=int, default=0)
    a.add_argument("--seed", type=int, default=0)
    _add_model_flags(a)
    return parser


def _apply_config_file(parser: _Parser, argv: list[str]) -> list[str]:
    """Load key=value defaults named by --config before the real parse."""
    probe = _Parser(add_help=False)
    probe.add_argument("--config", type=str, default=None)
    known, _ = probe.parse_known_args(argv)
    if known.config is None:
        return argv
    path = Path(known.config)
    if not path.exists():
        raise ContractError(f"config file {path} does not exist")
    overrides: dict[str, str] = {}
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractError(f"{path}:{line_no}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        overrides[key.strip().replace("-", "_")] = value.strip()
    # turn file entries into argv defaults for the chosen subcommand
    for action_parser in parser._subparsers._group_actions[0].choices.values():  # type: ignore[union-attr]
        defaults = {}
        for action in action_parser._actions:
            if action.dest in overrides:
                raw = overrides[action.dest]
                if action.type is not None:
                    defaults[action.dest] = action.type(raw)
                elif isinstance(action.default, bool) or action.const is True:
                    defaults[action.dest] = raw.lower() in ("1", "true", "yes")
                else:
                    defaults[action.dest] = raw
                if action.required:
                    action.required = False
        action_parser.set_defaults(**defaults)
    return argv


def _out_dir(base, subdir: str) -> Path:
    path = Path(base) / subdir
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    params = synth.GenParams(rows=args.rows, cols=args.cols, span_prob=args.span_prob, canvas=args.canvas)
    total = args.count + args.val_count + args.test_count
    samples = synth.generate_corpus(total, args.seed, params, distort=args.distort, jitter=args.jitter, bend=args.bend)
    splits = ["train"] * args.count + ["val"] * args.val_count + ["test"] * args.test_count
    corpus_dir = _out_dir(args.out, "corpus")
    synth.write_corpus(samples, corpus_dir, splits=splits, distortion=args.distort)
    print(f"wrote {total} samples to {corpus_dir}")
    return 0


def _load_split(corpus: str, split: str):
    path = Path(corpus)
    if not (path / "manifest.json").exists():
        raise ContractError(f"corpus path {path} has no manifest.json")
    samples = synth.read_corpus(path, split=split)
    if not samples and split != "train":
        samples = synth.read_corpus(path, split="train")
    return samples


def cmd_train(args) -> int:
    train_set = _load_split(args.corpus, "train")
    val_set = synth.read_corpus(Path(args.corpus), split="val")
    cfg = TrainConfig(
        lr=args.lr, plateau_patience=args.patience, lr_decay=args.decay, epochs=args.epochs,
        seed=args.seed, lam1=args.lam1, lam2=args.lam2, alpha=args.alpha,
        sample_size=args.sample_size, model=_model_config(args), val_every=args.val_every,
        threshold=args.threshold,
    )
    ckpt_dir = _out_dir(args.out, "checkpoints")
    _, logs = train(
        train_set, cfg, val_dataset=val_set or None,
        checkpoint_path=ckpt_dir / "model.ckpt", log_path=ckpt_dir / "train.log",
    )
    last = logs[-1].line() if logs else "no epochs"
    print(f"checkpoint {ckpt_dir / 'model.ckpt'} ({last})")
    return 0


def _restore(args):
    cfg = _model_config(args)
    store = M.build_model(cfg, args.seed)
    if args.checkpoint is not None:
        restore_checkpoint(store, args.checkpoint)
    return store, cfg


def cmd_eval(args) -> int:
    dataset = _load_split(args.corpus, args.split)
    if not dataset:
        raise ContractError(f"no samples in split {args.split!r}")
    reports_dir = _out_dir(args.out, "reports")
    if args.gt_as_pred:
        report = gt_as_prediction_report(dataset, threshold=args.threshold)
        store = None
    else:
        if args.checkpoint is None:
            raise ContractError("eval needs --checkpoint or --gt-as-pred")
        store, cfg = _restore(args)
        report = evaluate(store, cfg, dataset, threshold=args.threshold)
    (reports_dir / "metrics.txt").write_text(report.as_table(), encoding="utf-8")
    (reports_dir / "metrics.kv").write_text(report.as_keyvalues(), encoding="utf-8")

    if args.threshold_sweep:
        lines = []
        for threshold in np.linspace(0.1, 0.9, 9):
            components = 0
            for sample in dataset:
                if args.gt_as_pred:
                    row = sample.relations.row.astype(float)
                else:
                    enc = M.encode(sample, cfg)
                    row = M.predict(enc, store, cfg)[0]["row"]
                components += len(belonging_lists(row, threshold=float(threshold)))
            lines.append(f"threshold={threshold:.2f} row_components={components}")
        (reports_dir / "threshold_sweep.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    print(report.as_table())
    return 0


def cmd_analyze(args) -> int:
    dataset = _load_split(args.corpus, args.split)
    if not dataset:
        raise ContractError(f"no samples in split {args.split!r}")
    store, cfg = _restore(args)
    maps_dir = _out_dir(args.out, "maps")
    reports_dir = _out_dir(args.out, "reports")

    index = args.sample_index
    if not (0 <= index < len(dataset)):
        raise ContractError(f"sample index {index} outside corpus of {len(dataset)}")
    enc = M.encode(dataset[index], cfg)
    _, maps = M.predict(enc, store, cfg)
    for amap in maps:
        for head in range(amap.weights.shape[0]):
            write_pgm(maps_dir / amap.filename(head), amap.weights[head])

    diversity: dict[tuple[int, str, str], list[float]] = {}
    for sample in dataset:
        _, sample_maps = M.predict(M.encode(sample, cfg), store, cfg)
        for amap in sample_maps:
            diversity.setdefault((amap.layer, amap.modality, amap.module), []).append(map_diversity(amap.weights))
    lines = []
    for (layer, modality, module), values in sorted(diversity.items()):
        with_ccs = 1 if module == "ccs" else 0
        lines.append(f"block={layer} modality={modality} with_ccs={with_ccs} jsd={float(np.mean(values)):.6f}")
    (reports_dir / "jsd.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(maps)} attention map sets to {maps_dir}")
    return 0


# ---------------------------------------------------------------------------
# dispatch


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        handler = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze}[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ContractError, GridConflictError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
