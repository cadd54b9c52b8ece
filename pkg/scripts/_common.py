"""Shared setup for the experiment runners."""

from __future__ import annotations

import argparse
import dataclasses

from deltamil.config import ModelConfig, OptimConfig, RunConfig, load_config
from deltamil.synth import generate_dataset


def base_parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", default="configs/desk.cfg")
    p.add_argument("--seeds", default="0", help="comma-separated training seeds")
    return p


def load(path: str) -> RunConfig:
    cfg = load_config(path)
    cfg.validate()
    return cfg


def contiguous_folds(bags, k: int):
    """Test = block i, validation = block i+1, train = the rest."""
    size = len(bags) // k
    blocks = [bags[i * size:(i + 1) * size] for i in range(k)]
    out = []
    for i in range(k):
        j = (i + 1) % k
        train = [b for m, blk in enumerate(blocks) if m not in (i, j) for b in blk]
        out.append((train, blocks[j], blocks[i]))
    return out


def dataset_folds(cfg: RunConfig):
    return contiguous_folds(generate_dataset(cfg.synth), cfg.n_folds)


def variant(cfg: ModelConfig, **changes) -> ModelConfig:
    return dataclasses.replace(cfg, **changes)


def seeded(optim: OptimConfig, seed: int) -> OptimConfig:
    return dataclasses.replace(optim, seed=seed)
