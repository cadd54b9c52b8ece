import hashlib
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from deltamil.bagfile import load_manifest
from deltamil.cli import (
    EXIT_CODES,
    build_parser,
    cmd_ablate,
    cmd_synth,
    cmd_train,
    gradcheck_errors,
    main,
    resolve_config,
)
from deltamil.checkpoint import load_checkpoint
from deltamil.train import evaluate

TINY = """\
n_bags=20
patches_per_bag=16
feature_dim=4
witness_rate=0.2
in_dim=4
d=8
heads=2
head_dim=4
attn_dim=4
chunk_size=8
accumulation_steps=2
max_epochs=2
lr=0.01
"""


def config(tmp_path, extra="", name="run"):
    path = tmp_path / f"{name}.cfg"
    path.write_text(TINY + extra + f"out={tmp_path / name}\n")
    return path


def resolved(path, *flags):
    return resolve_config(build_parser().parse_args(["train", "--config", str(path), *flags]))


def tree_digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_manifest_has_even_folds(tmp_path):
    cfg = resolved(config(tmp_path, "n_bags=100\n"))
    m = load_manifest(cmd_synth(cfg))
    assert len(m.rows) == 100
    assert {k: len(v) for k, v in m.fold_members().items()} == {k: 20 for k in range(5)}


def test_synth_same_seed_same_tree(tmp_path):
    a = resolved(config(tmp_path, name="a"))
    b = resolved(config(tmp_path, name="b"))
    cmd_synth(a)
    cmd_synth(b)
    da, db = tree_digest(tmp_path / "a"), tree_digest(tmp_path / "b")
    assert da == db and len(da) == 22


def test_invalid_witness_rate_fails_before_io(tmp_path, capsys):
    path = config(tmp_path, "witness_rate=1.5\n")
    code = main(["synth", "--config", str(path)])
    assert code == EXIT_CODES["config"] != 0
    assert capsys.readouterr().err.startswith("config error:")
    assert not (tmp_path / "run").exists()


def test_flags_override_config(tmp_path):
    cfg = resolved(config(tmp_path), "--seed", "7", "--chunk-size", "3", "--layers", "2", "--heads", "1",
                   "--no-local", "--no-gated", "--no-delta", "--zscore", "--fold", "2")
    m = cfg.model
    assert (cfg.seed, cfg.optim.seed, cfg.synth.seed, cfg.fold) == (7, 7, 7, 2)
    assert (m.chunk_size, m.layers, m.heads, m.local, m.gated, m.delta, m.zscore) == (3, 2, 1, False, False, False, True)


def test_train_is_deterministic_and_writes_artifacts(tmp_path):
    cfg = resolved(config(tmp_path))
    cmd_synth(cfg)
    r1 = cmd_train(cfg, echo=lambda s: None)
    log1 = (tmp_path / "run" / "train.log").read_text().splitlines()
    r2 = cmd_train(cfg, echo=lambda s: None)
    log2 = (tmp_path / "run" / "train.log").read_text().splitlines()
    assert r1.per_fold == r2.per_fold
    assert log1[1:] == log2[1:] and log1[0].startswith("# started")
    assert sum(line.startswith("# started") for line in log1) == 1
    for k in range(5):
        assert (tmp_path / "run" / f"fold{k}.dmck").is_file()
    assert "±" in (tmp_path / "run" / "report.txt").read_text()
    assert main(["eval", "--config", str(config(tmp_path))]) == 0


def test_lr_zero_report_equals_init_model(tmp_path):
    cfg = resolved(config(tmp_path, "lr=0\nweight_decay=0\n"), "--fold", "1")
    cmd_synth(cfg)
    rep = cmd_train(cfg, echo=lambda s: None)
    model, _ = load_checkpoint(tmp_path / "run" / "fold1.dmck")
    from deltamil.model import MILModel
    init = MILModel(cfg.model, seed=cfg.seed)
    assert all(np.array_equal(v, model.state()[k]) for k, v in init.state().items())
    m = load_manifest(tmp_path / "run" / "manifest.tsv")
    test = [m.load(i) for i in m.partition(1).test]
    assert rep.per_fold == {k: [v] for k, v in evaluate(init, test).items()}


def test_single_fold_has_no_std(tmp_path):
    cfg = resolved(config(tmp_path, "n_folds=1\n"))
    cmd_synth(cfg)
    text = []
    cmd_train(cfg, echo=text.append)
    assert "±" not in text[0] and "folds\t0" in text[0]


def test_local_off_same_initial_validation_metric(tmp_path):
    full = resolved(config(tmp_path, "lr=0\nmax_epochs=1\n", name="full"), "--fold", "0")
    off = resolved(config(tmp_path, "lr=0\nmax_epochs=1\n", name="off"), "--fold", "0", "--no-local")
    for c in (full, off):
        cmd_synth(c)
        cmd_train(c, echo=lambda s: None)
    metric = [(tmp_path / n / "train.log").read_text().splitlines()[3].split("\t")[2] for n in ("full", "off")]
    assert metric[0] == metric[1]


def test_ablate_full_row_matches_train(tmp_path):
    cfg = resolved(config(tmp_path, "max_epochs=1\n"), "--fold", "0")
    cmd_synth(cfg)
    rows = cmd_ablate(cfg, echo=lambda s: None)
    assert list(rows) == ["-local", "-gated", "-delta", "full"]
    assert rows["full"].per_fold == cmd_train(cfg, echo=lambda s: None).per_fold
    assert (tmp_path / "run" / "ablation.tsv").read_text().startswith("variant\t")


def test_sweep_and_heatmap_commands(tmp_path):
    path = config(tmp_path, "max_epochs=1\n")
    assert main(["synth", "--config", str(path)]) == 0
    assert main(["train", "--config", str(path), "--fold", "0"]) == 0
    assert main(["sweep", "--config", str(path), "--fold", "0", "--ratios", "1.0"]) == 0
    table = (tmp_path / "run" / "retention.tsv").read_text().splitlines()
    evald = evaluate(load_checkpoint(tmp_path / "run" / "fold0.dmck")[0],
                     [load_manifest(tmp_path / "run" / "manifest.tsv").load(i) for i in range(4)])
    assert len(table) == 4 and all(line.split("\t")[2] == f"{evald['acc']:.6f}" for line in table[1:])
    assert main(["heatmap", "--config", str(path), "--fold", "0"]) == 0
    assert len(list((tmp_path / "run" / "heatmaps").glob("*.pgm"))) == 4


def test_missing_checkpoint_is_io_error(tmp_path, capsys):
    path = config(tmp_path)
    main(["synth", "--config", str(path)])
    assert main(["eval", "--config", str(path)]) == EXIT_CODES["io"]
    assert capsys.readouterr().err.startswith("io error: missing checkpoint")


def test_missing_manifest_is_format_error(tmp_path, capsys):
    assert main(["train", "--config", str(config(tmp_path))]) == EXIT_CODES["format"]
    assert "manifest" in capsys.readouterr().err


def test_gradcheck_passes():
    errs = gradcheck_errors(seed=0, max_entries=6)
    assert max(errs.values()) < 1e-4


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "deltamil", "gradcheck", "--max-entries", "2"],
                         capture_output=True, text=True, timeout=300)
    assert res.returncode == 0 and "PASS" in res.stdout
    bad = subprocess.run([sys.executable, "-m", "deltamil", "frobnicate"], capture_output=True, text=True)
    assert bad.returncode == 2
