"""Command-line entry point: ``python -m deltamil <command> [flags]``.

Failures exit nonzero with a one-word category prefix on stderr
(``config error:``, ``io error:``, ``format error:``, ``numeric error:``).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .bagfile import (
    BagFormatError,
    Manifest,
    ManifestError,
    ManifestRow,
    load_manifest,
    read_bag,
    write_bag,
    write_manifest,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ModelConfig, RunConfig, dump_config, load_config
from .metrics import MetricError, MetricsReport
from .model import MILModel, PatchBag
from .saliency import NoAttentionError, STRATEGIES, export_heatmap, extract_attention, format_curves, sweep
from .synth import generate_dataset
from .train import DivergenceError, StepRejected, cross_validate, evaluate

__all__ = ["main", "build_parser", "resolve_config", "cmd_synth", "cmd_train", "cmd_eval", "cmd_ablate",
           "cmd_sweep", "cmd_heatmap", "cmd_gradcheck", "gradcheck_errors", "ABLATIONS"]

EXIT_CODES = {"usage": 2, "config": 3, "io": 4, "format": 5, "numeric": 6, "check": 7}
GRADCHECK_TOL = 1e-4
ABLATIONS = (
    ("-local", {"local": False}),
    ("-gated", {"gated": False}),
    ("-delta", {"delta": False}),
    ("full", {}),
)


class CheckFailed(RuntimeError):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path)
    common.add_argument("--fold", type=int)
    common.add_argument("--chunk-size", type=int)
    common.add_argument("--layers", type=int)
    common.add_argument("--heads", type=int)
    common.add_argument("--no-local", action="store_true")
    common.add_argument("--no-gated", action="store_true")
    common.add_argument("--no-delta", action="store_true")
    common.add_argument("--zscore", action="store_true")
    common.add_argument("--checkpoint", type=Path, help="checkpoint for eval/sweep/heatmap")

    parser = argparse.ArgumentParser(prog="deltamil", description="Gated delta-rule MIL for patch bags")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write synthetic bags and a fold manifest")
    sub.add_parser("train", parents=[common], help="cross-validated training")
    sub.add_parser("eval", parents=[common], help="evaluate saved fold checkpoints on their test folds")
    sub.add_parser("ablate", parents=[common], help="full model vs -local/-gated/-delta")
    sp = sub.add_parser("sweep", parents=[common], help="retention curves from saved checkpoints")
    sp.add_argument("--ratios", default="0.05,0.1,0.25,0.5,0.75,1.0")
    hp = sub.add_parser("heatmap", parents=[common], help="attention heatmaps as P5 graymaps")
    hp.add_argument("--bag", type=Path, action="append", default=[])
    hp.add_argument("--normalization", choices=("minmax", "percentile"), default="minmax")
    gp = sub.add_parser("gradcheck", parents=[common], help="full-model finite-difference check")
    gp.add_argument("--max-entries", type=int, default=None)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file first, then command-line overrides; validated before any I/O."""
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = cfg.optim.seed = cfg.synth.seed = args.seed
    if args.out is not None:
        cfg.out = str(args.out)
    if args.fold is not None:
        cfg.fold = args.fold
    m = cfg.model
    if args.chunk_size is not None:
        m.chunk_size = args.chunk_size
    if args.layers is not None:
        m.layers = args.layers
    if args.heads is not None:
        m.heads = args.heads
    if args.no_local:
        m.local = False
    if args.no_gated:
        m.gated = False
    if args.no_delta:
        m.delta = False
    if args.zscore:
        m.zscore = True
    cfg.validate()
    return cfg


def _manifest_path(cfg: RunConfig) -> Path:
    return Path(cfg.manifest) if cfg.manifest else Path(cfg.out) / "manifest.tsv"


def cmd_synth(cfg: RunConfig) -> Path:
    """Bags under ``<out>/bags`` plus ``<out>/manifest.tsv`` (contiguous fold blocks)."""
    cfg.synth.validate()
    out = Path(cfg.out)
    bag_dir = out / "bags"
    bag_dir.mkdir(parents=True, exist_ok=True)
    bags = generate_dataset(cfg.synth)
    rows = []
    n = len(bags)
    for i, bag in enumerate(bags):
        path = bag_dir / f"{bag.bag_id}.dmb"
        write_bag(path, bag)
        rows.append(ManifestRow(path, fold=i * cfg.n_folds // n, label=bag.label, time=bag.time, event=bag.event))
    mpath = out / "manifest.tsv"
    write_manifest(mpath, rows)
    (out / "synth.cfg").write_text(dump_config(dataclasses.replace(cfg, out=".")))  # tree is relocatable
    return mpath


def _folds(cfg: RunConfig, manifest: Manifest) -> list[int]:
    ids = list(manifest.fold_members())
    if cfg.fold >= 0:
        if cfg.fold not in ids:
            raise ManifestError(f"fold {cfg.fold} not in manifest (folds {ids})")
        return [cfg.fold]
    return ids


def _splits(manifest: Manifest, folds: Sequence[int]):
    cache: dict[int, PatchBag] = {}

    def get(i: int) -> PatchBag:
        if i not in cache:
            cache[i] = manifest.load(i)
        return cache[i]

    out = []
    for k in folds:
        sp = manifest.partition(k)
        out.append(([get(i) for i in sp.train], [get(i) for i in sp.val], [get(i) for i in sp.test]))
    return out


def _report_text(report: MetricsReport, folds: Sequence[int]) -> str:
    return f"folds\t{' '.join(map(str, folds))}\n" + report.summary() + "\n"


def cmd_train(cfg: RunConfig, echo: Callable[[str], None] = print) -> MetricsReport:
    """Per-fold training; writes ``train.log``, ``fold<k>.dmck`` checkpoints and ``report.txt``."""
    manifest = load_manifest(_manifest_path(cfg))
    folds = _folds(cfg, manifest)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"# started {time.strftime('%Y-%m-%dT%H:%M:%S')} command=train", "# epoch\ttrain_loss\tval_metric\tbest"]
    log_lines: list[str] = []
    report, models, _ = cross_validate(_splits(manifest, folds), cfg.model, cfg.optim, cfg.seed, log_lines.append)
    fold_iter = iter(folds)
    for line in log_lines:
        lines.append(f"# fold {next(fold_iter)}" if line.startswith("# fold") else line)
    (out / "train.log").write_text("\n".join(lines) + "\n")
    for k, model in zip(folds, models):
        save_checkpoint(out / f"fold{k}.dmck", model, cfg)
    text = _report_text(report, folds)
    (out / "report.txt").write_text(text)
    echo(text.rstrip())
    return report


def _fold_checkpoint(cfg: RunConfig, k: int, explicit: Path | None) -> Path:
    path = explicit if explicit is not None else Path(cfg.out) / f"fold{k}.dmck"
    if not path.is_file():
        raise FileNotFoundError(f"missing checkpoint {path}; run train first")
    return path


def cmd_eval(cfg: RunConfig, checkpoint: Path | None = None, echo: Callable[[str], None] = print) -> MetricsReport:
    manifest = load_manifest(_manifest_path(cfg))
    folds = _folds(cfg, manifest)
    report = MetricsReport()
    for k, (_, _, test) in zip(folds, _splits(manifest, folds)):
        model, _ = load_checkpoint(_fold_checkpoint(cfg, k, checkpoint))
        report.add(**evaluate(model, test))
    text = _report_text(report, folds)
    echo(text.rstrip())
    return report


def cmd_ablate(cfg: RunConfig, echo: Callable[[str], None] = print) -> dict[str, MetricsReport]:
    """Cross-validated metric per ablation row; writes ``ablation.tsv``."""
    manifest = load_manifest(_manifest_path(cfg))
    folds = _folds(cfg, manifest)
    splits = _splits(manifest, folds)
    rows: dict[str, MetricsReport] = {}
    for name, switches in ABLATIONS:
        mcfg = dataclasses.replace(cfg.model, **switches)
        rows[name], _, _ = cross_validate(splits, mcfg, cfg.optim, cfg.seed)
    keys = list(next(iter(rows.values())).per_fold)
    lines = ["variant\t" + "\t".join(f"{k}_mean\t{k}_std" for k in keys)]
    for name, rep in rows.items():
        lines.append(name + "\t" + "\t".join(f"{rep.mean(k):.6f}\t{rep.std(k):.6f}" for k in keys))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.tsv").write_text("\n".join(lines) + "\n")
    echo("\n".join(lines))
    return rows


def cmd_sweep(cfg: RunConfig, ratios: Sequence[float], checkpoint: Path | None = None,
              echo: Callable[[str], None] = print) -> str:
    """Retention curves on each fold's test bags; writes ``retention.tsv``."""
    manifest = load_manifest(_manifest_path(cfg))
    folds = _folds(cfg, manifest)
    curves = []
    for k, (_, _, test) in zip(folds, _splits(manifest, folds)):
        model, _ = load_checkpoint(_fold_checkpoint(cfg, k, checkpoint))
        curves.extend(sweep(model, test, s, ratios) for s in STRATEGIES)
    merged = []
    for s in STRATEGIES:
        mine = [c for c in curves if c.strategy == s]
        pts = [(r, float(np.mean([c.points[i][1] for c in mine]))) for i, (r, _) in enumerate(mine[0].points)]
        merged.append(dataclasses.replace(mine[0], points=pts))
    text = format_curves(merged)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "retention.tsv").write_text(text)
    echo(text.rstrip())
    return text


def cmd_heatmap(cfg: RunConfig, bags: Sequence[Path], normalization: str, checkpoint: Path | None = None,
                echo: Callable[[str], None] = print) -> list[Path]:
    k = cfg.fold if cfg.fold >= 0 else 0
    model, _ = load_checkpoint(_fold_checkpoint(cfg, k, checkpoint))
    if not bags:
        manifest = load_manifest(_manifest_path(cfg))
        bags = [manifest.rows[i].bag_path for i in manifest.partition(k).test]
    out = Path(cfg.out) / "heatmaps"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for path in bags:
        bag = read_bag(path)
        dest = out / f"{Path(path).stem}.pgm"
        export_heatmap(extract_attention(model, bag), bag.coords, dest, normalization)
        written.append(dest)
    echo(f"wrote {len(written)} heatmaps to {out}")
    return written


def gradcheck_errors(seed: int = 0, max_entries: int | None = None, scan_method: str = "parallel",
                     **switches) -> dict[str, float]:
    """Worst relative error per parameter group on a 12-patch, 2-class, d=16 model."""
    rng = np.random.default_rng(seed)
    mcfg = ModelConfig(in_dim=8, d=16, heads=2, head_dim=8, attn_dim=8, layers=1, n_classes=2,
                       chunk_size=5, scan_method=scan_method, **switches)
    model = MILModel(mcfg, seed=seed)
    # move off the init point so zero-initialized branches carry gradient too
    for t in model.params.values():
        t.data += rng.normal(0.0, 0.3, t.shape)
    bag = PatchBag(rng.normal(size=(12, 8)), np.array([(i // 4, i % 4) for i in range(12)]), label=1)
    names = list(model.params)

    def f(leaves):
        saved = dict(model.params)
        model.params.update(zip(names, leaves))
        try:
            return model.loss(bag, model.forward(bag))
        finally:
            model.params.update(saved)

    errs = ag.finite_diff_errors(f, [model.params[k].data for k in names], max_entries=max_entries, seed=seed)
    return dict(zip(names, errs))


def cmd_gradcheck(cfg: RunConfig, max_entries: int | None = None, echo: Callable[[str], None] = print) -> float:
    errs = gradcheck_errors(cfg.seed, max_entries, local=cfg.model.local, gated=cfg.model.gated,
                            delta=cfg.model.delta)
    for k, e in errs.items():
        echo(f"{k}\t{e:.3e}")
    worst = max(errs.values())
    verdict = "PASS" if worst < GRADCHECK_TOL else "FAIL"
    echo(f"worst relative error {worst:.3e} ({max(errs, key=errs.get)}): {verdict} at {GRADCHECK_TOL:g}")
    if verdict == "FAIL":
        raise CheckFailed(f"gradient check failed: worst relative error {worst:.3e}")
    return worst


def _category(exc: BaseException) -> str:
    if isinstance(exc, (ConfigError,)):
        return "config"
    if isinstance(exc, (BagFormatError, CheckpointError, ManifestError)):
        return "format"
    if isinstance(exc, (OSError,)):
        return "io"
    if isinstance(exc, (ag.NonFiniteError, DivergenceError, StepRejected, MetricError)):
        return "numeric"
    if isinstance(exc, CheckFailed):
        return "check"
    if isinstance(exc, (NoAttentionError, ValueError)):
        return "usage"
    raise exc


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        cmd = args.command
        if cmd == "synth":
            print(f"wrote {cmd_synth(cfg)}")
        elif cmd == "train":
            cmd_train(cfg)
        elif cmd == "eval":
            cmd_eval(cfg, args.checkpoint)
        elif cmd == "ablate":
            cmd_ablate(cfg)
        elif cmd == "sweep":
            cmd_sweep(cfg, [float(r) for r in args.ratios.split(",")], args.checkpoint)
        elif cmd == "heatmap":
            cmd_heatmap(cfg, args.bag, args.normalization, args.checkpoint)
        elif cmd == "gradcheck":
            cmd_gradcheck(cfg, args.max_entries)
    except Exception as exc:  # noqa: BLE001 - mapped to exit categories
        cat = _category(exc)
        print(f"{cat} error: {exc}", file=sys.stderr)
        return EXIT_CODES[cat]
    return 0


if __name__ == "__main__":
    sys.exit(main())
