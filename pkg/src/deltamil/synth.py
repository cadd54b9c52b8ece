"""Planted-witness bag generator.

Background patches are pure noise; a small random fraction of patches in a
positive bag carries a class signal vector on top of the noise. Every bag
draws from its own stream seeded by ``(seed, bag index)``.
"""

from __future__ import annotations

import numpy as np

from .config import ConfigError, SynthConfig
from .model import PatchBag

__all__ = [
    "class_signals",
    "grid_coords",
    "bag_rng",
    "generate_bag",
    "generate_survival_bag",
    "generate_dataset",
    "latent_risk",
]

COLLINEAR_TOL = 1e-6
# stream tag separating signal draws from per-bag streams
_SIGNAL_STREAM = 2**31 - 1


def class_signals(cfg: SynthConfig) -> np.ndarray:
    """``(n_classes, c)`` signal table; row 0 (normal) is zero.

    Rows 1.. are random directions scaled to ``signal_scale``.
    """
    rng = np.random.default_rng([cfg.seed, _SIGNAL_STREAM])
    sig = np.zeros((cfg.n_classes, cfg.feature_dim))
    for cls in range(1, cfg.n_classes):
        for _ in range(100):
            u = rng.normal(size=cfg.feature_dim)
            u /= np.linalg.norm(u)
            if all(abs(u @ sig[j]) / cfg.signal_scale < 1 - COLLINEAR_TOL for j in range(1, cls)):
                break
        else:
            raise ConfigError("could not draw non-collinear class signals; raise feature_dim")
        sig[cls] = cfg.signal_scale * u
    return sig


def grid_coords(n: int) -> np.ndarray:
    """Row-major positions on a near-square grid of width ``ceil(sqrt(n))``."""
    width = int(np.ceil(np.sqrt(n)))
    i = np.arange(n)
    return np.stack([i // width, i % width], axis=1)


def bag_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _plant(cfg: SynthConfig, rate: float, signal: np.ndarray | None, rng: np.random.Generator):
    n, c = cfg.patches_per_bag, cfg.feature_dim
    feats = rng.normal(0.0, cfg.noise_std, size=(n, c))
    # draw the promotion coin for every patch so streams line up across classes
    coin = rng.random(n)
    mask = coin < rate if signal is not None else np.zeros(n, dtype=bool)
    if signal is not None:
        feats[mask] += signal
    return feats, mask


def generate_bag(
    cfg: SynthConfig, cls: int, rng: np.random.Generator, signals: np.ndarray | None = None, bag_id: str = ""
) -> tuple[PatchBag, np.ndarray]:
    """One labelled bag plus its witness mask (class 0 carries no witnesses)."""
    if not 0 <= cls < cfg.n_classes:
        raise ValueError(f"class {cls} out of range for {cfg.n_classes} classes")
    signals = class_signals(cfg) if signals is None else signals
    feats, mask = _plant(cfg, cfg.witness_rate, signals[cls] if cls > 0 else None, rng)
    bag = PatchBag(feats, grid_coords(cfg.patches_per_bag), label=cls, bag_id=bag_id, witness=mask)
    return bag, mask


def latent_risk(witness_count: int, cfg: SynthConfig) -> float:
    return witness_count / (cfg.witness_rate * cfg.patches_per_bag)


def generate_survival_bag(
    cfg: SynthConfig, rng: np.random.Generator, signals: np.ndarray | None = None, bag_id: str = ""
) -> PatchBag:
    """Bag whose event time depends on its witness count.

    The per-bag witness rate is ``witness_rate * U(0, survival_spread)`` so that
    risk varies enough across a cohort to be rankable.
    """
    if not cfg.survival_mode:
        raise ConfigError("generate_survival_bag needs survival_mode=true")
    signals = class_signals(cfg) if signals is None else signals
    rate = cfg.witness_rate * rng.uniform(0.0, cfg.survival_spread)
    feats, mask = _plant(cfg, rate, signals[1], rng)
    r = latent_risk(int(mask.sum()), cfg)
    t_death = rng.exponential(1.0 / (cfg.base_rate * np.exp(cfg.kappa * r)))
    t_censor = rng.exponential(1.0 / cfg.censor_rate) if cfg.censor_rate > 0 else np.inf
    event = bool(t_death <= t_censor)
    time = float(max(min(t_death, t_censor), np.finfo(float).tiny))
    return PatchBag(feats, grid_coords(cfg.patches_per_bag), time=time, event=event, bag_id=bag_id, witness=mask)


def generate_dataset(cfg: SynthConfig) -> list[PatchBag]:
    """``n_bags`` bags; classes alternate ``i % n_classes``."""
    cfg.validate()
    signals = class_signals(cfg)
    bags = []
    for i in range(cfg.n_bags):
        rng = bag_rng(cfg.seed, i)
        bag_id = f"bag{i:05d}"
        if cfg.survival_mode:
            bags.append(generate_survival_bag(cfg, rng, signals, bag_id))
        else:
            bags.append(generate_bag(cfg, i % cfg.n_classes, rng, signals, bag_id)[0])
    return bags
