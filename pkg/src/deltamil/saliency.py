"""Attention-based patch retention experiments and heatmap export."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .locality import normalize_coords
from .metrics import accuracy
from .model import MILModel, PatchBag

__all__ = [
    "NoAttentionError",
    "STRATEGIES",
    "RetentionCurve",
    "Heatmap",
    "extract_attention",
    "select_subset",
    "repredict",
    "retained_k",
    "sweep",
    "percentile_rank",
    "witness_percentile",
    "make_heatmap",
    "export_heatmap",
    "read_pgm",
    "format_curves",
]

STRATEGIES = ("random_k", "top_k", "bottom_k")
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


class NoAttentionError(ValueError):
    pass


@dataclass
class RetentionCurve:
    strategy: str
    points: list[tuple[float, float]] = field(default_factory=list)
    seeds: tuple[int, ...] = ()

    def __post_init__(self):
        ratios = [r for r, _ in self.points]
        if any(not 0 < r <= 1 for r in ratios) or any(b <= a for a, b in zip(ratios, ratios[1:])):
            raise ValueError("ratios must be strictly increasing in (0, 1]")

    def at(self, ratio: float) -> float:
        for r, v in self.points:
            if np.isclose(r, ratio):
                return v
        raise KeyError(ratio)


@dataclass
class Heatmap:
    values: np.ndarray  # (h, w), NaN where no patch sits
    normalization: str

    @property
    def mask(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def pixels(self) -> np.ndarray:
        return np.where(self.mask, np.rint(np.nan_to_num(self.values) * 255), 0).astype(np.uint8)


def extract_attention(model: MILModel, bag: PatchBag) -> np.ndarray:
    """Aggregator softmax weights in patch order."""
    if not model.has_attention:
        raise NoAttentionError(f"no attention available: aggregator is {model._aggregator!r}")
    return model.forward(bag).slide.attention


def select_subset(alpha, k: int, strategy: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """Indices of the k retained patches, in ascending patch order.

    Ties at the cut are broken toward the lower patch index.
    """
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    n = len(alpha)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range 1..{n}")
    idx = np.arange(n)
    if strategy == "top_k":
        chosen = np.lexsort((idx, -alpha))[:k]
    elif strategy == "bottom_k":
        chosen = np.lexsort((idx, alpha))[:k]
    elif strategy == "random_k":
        if rng is None:
            raise ValueError("random_k needs a random generator")
        chosen = rng.choice(n, size=k, replace=False)
    else:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    return np.sort(chosen)


def repredict(model: MILModel, bag: PatchBag, P) -> np.ndarray:
    """Prediction on the sub-bag restricted to ``P``; the grid is rebuilt from surviving coords."""
    P = np.asarray(P, dtype=np.intp)
    if P.size == 0:
        raise ValueError("empty patch subset")
    return model.predict(bag.subset(P))


def retained_k(ratio: float, n: int) -> int:
    return max(1, int(round(ratio * n)))


def sweep(
    model: MILModel,
    bags: Sequence[PatchBag],
    strategy: str,
    ratios: Sequence[float],
    seeds: Sequence[int] = DEFAULT_SEEDS,
) -> RetentionCurve:
    """Accuracy versus retained ratio; random_k is averaged over ``seeds``."""
    if model.cfg.task != "classification":
        raise ValueError("retention sweeps report accuracy and need a classification model")
    ratios = list(ratios)
    if any(not 0 < r <= 1 for r in ratios):
        raise ValueError("ratios must lie in (0, 1]")
    labels = np.array([b.label for b in bags])
    need_alpha = strategy != "random_k"
    alphas = [extract_attention(model, b) if need_alpha else None for b in bags]
    used = tuple(seeds) if strategy == "random_k" else ()
    points = []
    for r in ratios:
        accs = []
        for seed in used or (None,):
            rng = np.random.default_rng(seed) if seed is not None else None
            preds = []
            for b, a in zip(bags, alphas):
                k = retained_k(r, len(b))
                P = select_subset(a if a is not None else np.zeros(len(b)), k, strategy, rng)
                preds.append(model.predict(b) if k == len(b) else repredict(model, b, P))
            accs.append(accuracy(np.stack(preds), labels))
        points.append((float(r), float(np.mean(accs))))
    return RetentionCurve(strategy, points, used)


def format_curves(curves: Sequence[RetentionCurve]) -> str:
    lines = ["strategy\tratio\tmetric\tn_seeds"]
    for c in curves:
        for r, v in c.points:
            lines.append(f"{c.strategy}\t{r:.4f}\t{v:.6f}\t{max(1, len(c.seeds))}")
    return "\n".join(lines) + "\n"


def percentile_rank(alpha) -> np.ndarray:
    """Average rank divided by N: the top score maps to 1, ties share a value."""
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    return rankdata(alpha, method="average") / len(alpha)


def witness_percentile(alpha, mask) -> float:
    mask = np.asarray(mask, dtype=bool).ravel()
    if not mask.any():
        raise ValueError("witness mask is empty")
    return float(percentile_rank(alpha)[mask].mean())


def make_heatmap(alpha, coords, normalization: str = "minmax") -> Heatmap:
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    coords = normalize_coords(coords)
    if len(coords) != len(alpha):
        raise ValueError("one coordinate pair per attention value required")
    if normalization == "minmax":
        span = alpha.max() - alpha.min()
        v = (alpha - alpha.min()) / span if span > 0 else np.full_like(alpha, 0.5)
    elif normalization == "percentile":
        v = percentile_rank(alpha)
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    h, w = coords.max(axis=0) + 1
    grid = np.full((h, w), np.nan)
    grid[coords[:, 0], coords[:, 1]] = v
    return Heatmap(grid, normalization)


def export_heatmap(alpha, coords, path: str | Path, normalization: str = "minmax") -> Heatmap:
    """Write a binary P5 graymap; absent cells are 0."""
    hm = make_heatmap(alpha, coords, normalization)
    px = hm.pixels()
    header = f"P5\n{px.shape[1]} {px.shape[0]}\n255\n".encode("ascii")
    try:
        Path(path).write_bytes(header + px.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write heatmap to {path}: {exc}") from exc
    return hm


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError("not a binary P5 graymap")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)
