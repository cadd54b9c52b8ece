"""GDN block: RMSNorm -> locality-aware gated delta attention -> RMSNorm -> SwiGLU MLP."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import ModelConfig
from .delta import GateTrace, chunked_scan, compute_gates, normalize_keys
from .locality import (
    depthwise_conv2d,
    extract_2d,
    lambda_fuse,
    normalize_coords,
    output_gate_fuse,
    reconstruct_2d,
    short_conv1d,
)

__all__ = [
    "BlockParams",
    "init_block",
    "zero_block",
    "rms_norm",
    "gated_mlp",
    "dropout",
    "attention_module",
    "block_forward",
    "stack_forward",
]

# guards the key normalization against all-zero projections
KEY_EPS = 1e-12
CONV_INIT_NOISE = 0.01

BlockParams = dict[str, Tensor]


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _identity_kernel(shape, center, rng) -> np.ndarray:
    k = np.zeros(shape)
    k[(slice(None),) + center] = 1.0
    return k + rng.normal(0.0, CONV_INIT_NOISE, size=shape)


def init_block(cfg: ModelConfig, rng: np.random.Generator) -> BlockParams:
    """Fresh block parameters.

    Projections are U(-1/sqrt(fan_in), 1/sqrt(fan_in)); gate biases and the
    fusion scalar lambda start at 0; the local projection starts at 0 so the
    whole local branch is silent at init; conv kernels start near identity.
    """
    d, inner, heads, ff = cfg.d, cfg.inner_dim, cfg.heads, cfg.ff_dim
    ks, w = cfg.conv2d_size, cfg.conv1d_width
    raw = {
        "rms1": np.ones(d),
        "rms2": np.ones(d),
        "pad": np.zeros(d),
        "conv2d": _identity_kernel((d, ks, ks), (ks // 2, ks // 2), rng),
        "lambda": np.zeros(()),
        "W_q": _uniform(rng, d, (d, inner)),
        "W_k": _uniform(rng, d, (d, inner)),
        "W_v": _uniform(rng, d, (d, inner)),
        "conv_q": _identity_kernel((inner, w), (w - 1,), rng),
        "conv_k": _identity_kernel((inner, w), (w - 1,), rng),
        "conv_v": _identity_kernel((inner, w), (w - 1,), rng),
        "W_alpha": _uniform(rng, d, (d, heads)),
        "b_alpha": np.zeros(heads),
        "W_beta": _uniform(rng, d, (d, heads)),
        "b_beta": np.zeros(heads),
        "W_local": np.zeros((d, inner)),
        "b_local": np.zeros(inner),
        "W_g": _uniform(rng, d, (d, inner)),
        "b_g": np.zeros(inner),
        "W_o": _uniform(rng, inner, (inner, d)),
        "W_1": _uniform(rng, d, (d, ff)),
        "W_3": _uniform(rng, d, (d, ff)),
        "W_2": _uniform(rng, ff, (ff, d)),
    }
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


def zero_block(cfg: ModelConfig) -> BlockParams:
    """Block whose every weight is zero (an exact identity map)."""
    p = init_block(cfg, np.random.default_rng(0))
    for t in p.values():
        t.data[...] = 0.0
    return p


def rms_norm(x, gain, eps: float = 1e-6) -> Tensor:
    """Per-token ``x / sqrt(mean(x^2) + eps) * gain``."""
    x, gain = ag.as_tensor(x), ag.as_tensor(gain)
    ms = ag.mean(ag.elementwise("square", x), axis=-1, keepdims=True)
    if eps:
        ms = ms + eps
    inv = ag.elementwise("sqrt", ms)
    return x / ag.broadcast_to(inv, x.shape) * ag.broadcast_to(gain, x.shape)


def gated_mlp(x, W_1, W_3, W_2) -> Tensor:
    """SwiGLU feed-forward ``(silu(x W_1) * (x W_3)) W_2``."""
    x = ag.as_tensor(x)
    return ag.matmul(ag.elementwise("silu", ag.matmul(x, W_1)) * ag.matmul(x, W_3), W_2)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity unless training with a positive rate."""
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training needs a random generator")
    keep = rng.random(x.shape) >= rate
    return x * Tensor(keep / (1.0 - rate))


def _linear(x: Tensor, W, b=None) -> Tensor:
    y = ag.matmul(x, W)
    if b is not None:
        y = y + ag.broadcast_to(b, y.shape)
    return y


def attention_module(X, coords, p: BlockParams, cfg: ModelConfig) -> tuple[Tensor, GateTrace]:
    """Locality mix, short-conv projections, gates, delta scan, gated fusion, output projection."""
    X = ag.as_tensor(X)
    n = X.shape[0]
    heads, hd = cfg.heads, cfg.head_dim
    coords = normalize_coords(coords)
    Z_local = None
    if cfg.local:
        grid = reconstruct_2d(X, coords, p["pad"])
        Z_local = extract_2d(depthwise_conv2d(grid, p["conv2d"], p["pad"]), coords)
        H = lambda_fuse(X, Z_local, p["lambda"])
    else:
        H = X
    Q = ag.reshape(short_conv1d(ag.matmul(H, p["W_q"]), p["conv_q"]), (n, heads, hd))
    K = ag.reshape(short_conv1d(ag.matmul(H, p["W_k"]), p["conv_k"]), (n, heads, hd))
    V = ag.reshape(short_conv1d(ag.matmul(H, p["W_v"]), p["conv_v"]), (n, heads, hd))
    K = normalize_keys(K, eps=KEY_EPS)
    alpha, beta = compute_gates(H, p["W_beta"], p["W_alpha"], p["b_beta"], p["b_alpha"])
    if not cfg.gated:
        alpha = Tensor(np.ones((n, heads)))
    H_global, _ = chunked_scan(
        Q, K, V, alpha, beta, chunk_size=cfg.chunk_size, remove=cfg.delta, method=cfg.scan_method
    )
    H_global = ag.reshape(H_global, (n, heads * hd))
    if cfg.local:
        H_local = _linear(Z_local, p["W_local"], p["b_local"])
        O, G = output_gate_fuse(H, H_global, H_local, p["W_g"], p["b_g"])
    else:
        G = ag.elementwise("sigmoid", _linear(H, p["W_g"], p["b_g"]))
        O = G * H_global
    trace = GateTrace(alpha.data.copy(), beta.data.copy(), G.data.copy())
    return ag.matmul(O, p["W_o"]), trace


def block_forward(
    Z,
    coords,
    p: BlockParams,
    cfg: ModelConfig,
    dropout_rate: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, GateTrace]:
    Z = ag.as_tensor(Z)
    attn, trace = attention_module(rms_norm(Z, p["rms1"], cfg.rms_eps), coords, p, cfg)
    u = Z + dropout(attn, dropout_rate, train, rng)
    mlp = gated_mlp(rms_norm(u, p["rms2"], cfg.rms_eps), p["W_1"], p["W_3"], p["W_2"])
    return u + dropout(mlp, dropout_rate, train, rng), trace


def stack_forward(
    Z,
    coords,
    blocks: list[BlockParams],
    cfg: ModelConfig,
    dropout_rate: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[GateTrace]]:
    if not blocks:
        raise ValueError("block stack is empty")
    traces = []
    for p in blocks:
        Z, tr = block_forward(Z, coords, p, cfg, dropout_rate, train, rng)
        traces.append(tr)
    return Z, traces
