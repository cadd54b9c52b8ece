"""Locality-aware mixing: patch sequence -> 2D grid -> depthwise conv -> sequence."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

__all__ = [
    "PatchGrid",
    "DuplicateCoordError",
    "normalize_coords",
    "reconstruct_2d",
    "depthwise_conv2d",
    "extract_2d",
    "lambda_fuse",
    "short_conv1d",
    "output_gate_fuse",
]

SPARSE_GRID_FACTOR = 64


class DuplicateCoordError(ValueError):
    pass


@dataclass
class PatchGrid:
    cells: Tensor  # (height, width, d)
    mask: np.ndarray  # (height, width) bool, True where a patch sits

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]


def normalize_coords(coords) -> np.ndarray:
    """Shift coordinates so the bag's bounding box starts at (0, 0)."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    return coords - coords.min(axis=0)


def _index_map(coords: np.ndarray, height: int, width: int, fill: int) -> np.ndarray:
    idx = np.full((height, width), fill, dtype=np.intp)
    idx[coords[:, 0], coords[:, 1]] = np.arange(len(coords))
    return idx


def _check_unique(coords: np.ndarray, width: int) -> None:
    lin = coords[:, 0] * width + coords[:, 1]
    order = np.argsort(lin, kind="stable")
    dup = np.flatnonzero(lin[order][1:] == lin[order][:-1])
    if dup.size:
        i, j = order[dup[0]], order[dup[0] + 1]
        raise DuplicateCoordError(
            f"patches {i} and {j} share coordinate ({coords[i, 0]}, {coords[i, 1]})"
        )


def reconstruct_2d(Z, coords, pad) -> PatchGrid:
    """Scatter patch rows onto their grid cells; empty cells hold ``pad``."""
    Z, pad = ag.as_tensor(Z), ag.as_tensor(pad)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    n, d = Z.shape
    if n < 1 or len(coords) != n:
        raise ValueError(f"need one coordinate per patch, got {len(coords)} for {n} patches")
    if np.any(coords < 0):
        raise ValueError("coordinates must be non-negative")
    height, width = int(coords[:, 0].max()) + 1, int(coords[:, 1].max()) + 1
    _check_unique(coords, width)
    if height * width > SPARSE_GRID_FACTOR * n:
        warnings.warn(f"sparse grid: {height}x{width} cells for {n} patches", RuntimeWarning, stacklevel=2)
    idx = _index_map(coords, height, width, fill=n)
    src = ag.concat([Z, ag.reshape(pad, (1, d))], axis=0)
    cells = ag.reshape(ag.take(src, idx.reshape(-1)), (height, width, d))
    return PatchGrid(cells, idx < n)


def depthwise_conv2d(grid: PatchGrid, kernels, pad) -> PatchGrid:
    """Per-channel 'same' correlation; samples beyond the grid read ``pad``.

    ``kernels`` is ``(d, kh, kw)`` with odd extents.
    """
    kernels, pad = ag.as_tensor(kernels), ag.as_tensor(pad)
    d, kh, kw = kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
    h, w = grid.height, grid.width
    if grid.cells.shape[2] != d:
        raise ag.ShapeError(f"grid has {grid.cells.shape[2]} channels, kernels {d}")
    rows = np.arange(h)[:, None, None, None] + np.arange(kh)[None, None, :, None] - kh // 2
    cols = np.arange(w)[None, :, None, None] + np.arange(kw)[None, None, None, :] - kw // 2
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    lin = np.where(inside, np.clip(rows, 0, h - 1) * w + np.clip(cols, 0, w - 1), h * w)
    src = ag.concat([ag.reshape(grid.cells, (h * w, d)), ag.reshape(pad, (1, d))], axis=0)
    patches = ag.take(src, lin.reshape(h * w, kh * kw))  # (h*w, kh*kw, d)
    taps = ag.broadcast_to(ag.reshape(ag.transpose(ag.reshape(kernels, (d, kh * kw))), (1, kh * kw, d)), patches.shape)
    out = ag.sum(patches * taps, axis=1)
    return PatchGrid(ag.reshape(out, (h, w, d)), grid.mask)


def extract_2d(grid: PatchGrid, coords) -> Tensor:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    h, w = grid.height, grid.width
    if np.any(coords < 0) or np.any(coords[:, 0] >= h) or np.any(coords[:, 1] >= w):
        raise ValueError(f"coordinate outside {h}x{w} grid")
    d = grid.cells.shape[2]
    return ag.take(ag.reshape(grid.cells, (h * w, d)), coords[:, 0] * w + coords[:, 1])


def lambda_fuse(Z, Z_local_seq, lam) -> Tensor:
    """``Z + tanh(lam) * Z_local_seq``."""
    Z, Z_local_seq = ag.as_tensor(Z), ag.as_tensor(Z_local_seq)
    if Z.shape != Z_local_seq.shape:
        raise ag.ShapeError(f"lambda_fuse shape mismatch: {Z.shape} vs {Z_local_seq.shape}")
    return Z + ag.elementwise("tanh", lam) * Z_local_seq


def short_conv1d(X, kernel) -> Tensor:
    """Causal depthwise conv along the sequence; ``kernel[:, -1]`` taps the current token."""
    X, kernel = ag.as_tensor(X), ag.as_tensor(kernel)
    n, d = X.shape
    if kernel.ndim != 2 or kernel.shape[0] != d:
        raise ag.ShapeError(f"kernel {kernel.shape} does not fit {d} channels")
    w = kernel.shape[1]
    pos = np.arange(n)[:, None] - (w - 1) + np.arange(w)[None, :]
    idx = np.where(pos >= 0, pos, n)
    src = ag.concat([X, Tensor(np.zeros((1, d)))], axis=0)
    windows = ag.take(src, idx)  # (n, w, d)
    taps = ag.broadcast_to(ag.reshape(ag.transpose(kernel), (1, w, d)), windows.shape)
    return ag.sum(windows * taps, axis=1)


def output_gate_fuse(H, H_global_seq, H_local_seq, W_g, bias_g) -> tuple[Tensor, Tensor]:
    """``G = sigmoid(H W_g + b)``; returns ``(G * global + (1 - G) * local, G)``."""
    H, Hg, Hl = ag.as_tensor(H), ag.as_tensor(H_global_seq), ag.as_tensor(H_local_seq)
    if Hg.shape != Hl.shape:
        raise ag.ShapeError(f"global {Hg.shape} and local {Hl.shape} branches differ")
    G = ag.elementwise("sigmoid", ag.matmul(H, W_g) + ag.broadcast_to(bias_g, Hg.shape))
    if G.shape != Hg.shape:
        raise ag.ShapeError(f"gate {G.shape} does not match branches {Hg.shape}")
    return G * Hg + (1.0 - G) * Hl, G
