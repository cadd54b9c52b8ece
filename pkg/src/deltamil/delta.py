"""Gated delta-rule memory.

The memory ``S`` maps keys to values (shape ``(..., d_v, d_k)``), so reading
with a key is ``S @ k``. One step with retention gate ``alpha`` and update
gate ``beta``::

    v_old  = (alpha * S) @ k
    v_new  = beta * v + (1 - beta) * v_old
    S_next = alpha * S - v_old k^T + v_new k^T

Three scan paths exist. :func:`recurrent_scan` composes :func:`delta_step`
out of tape primitives and is the reference. :func:`chunked_scan` carries the
memory across blocks of tokens and processes each block either with a fused
sequential kernel (:func:`scan_block`, hand-written backward, repeats the
reference arithmetic operation for operation so results agree bit for bit)
or with the intra-block parallel form (:func:`scan_block_parallel`), which
solves for all of a block's memory writes at once with one unit-triangular
system and is differentiated by the tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

__all__ = [
    "GateTrace",
    "KeyNormError",
    "compute_gates",
    "normalize_keys",
    "delta_step",
    "delta_step_compact",
    "recurrent_scan",
    "scan_block",
    "scan_block_parallel",
    "chunked_scan",
]

KEY_NORM_TOL = 1e-6


class KeyNormError(ValueError):
    pass


@dataclass
class GateTrace:
    """Per-token gates recorded for inspection; arrays are ``(N, heads)``."""

    alpha: np.ndarray
    beta: np.ndarray
    fusion: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.alpha)


def compute_gates(H, W_beta, W_alpha, bias_beta, bias_alpha) -> tuple[Tensor, Tensor]:
    """Sigmoid retention and update gates, one pair per token per head.

    ``H`` is ``(N, d)``; weights are ``(d, heads)``; biases ``(heads,)``.
    Returns ``(alpha, beta)`` each ``(N, heads)``.
    """
    H = ag.as_tensor(H)
    if H.ndim != 2:
        raise ag.ShapeError(f"gates expect H of shape (N, d), got {H.shape}")
    out = []
    for W, b in ((W_alpha, bias_alpha), (W_beta, bias_beta)):
        W, b = ag.as_tensor(W), ag.as_tensor(b)
        if W.ndim != 2 or W.shape[0] != H.shape[1] or b.shape != (W.shape[1],):
            raise ag.ShapeError(f"gate weight {W.shape} / bias {b.shape} do not fit H {H.shape}")
        pre = ag.matmul(H, W) + ag.broadcast_to(b, (H.shape[0], W.shape[1]))
        out.append(ag.elementwise("sigmoid", pre))
    return out[0], out[1]


def normalize_keys(K_raw, eps: float = 0.0) -> Tensor:
    """Divide each key row (last axis) by its L2 norm.

    With ``eps == 0`` a zero row is an error. A positive ``eps`` computes
    ``k / sqrt(|k|^2 + eps)`` instead, which maps a zero key to zero.
    """
    K_raw = ag.as_tensor(K_raw)
    sq = ag.sum(ag.elementwise("square", K_raw), axis=-1, keepdims=True)
    if eps == 0.0:
        flat = sq.data.reshape(-1)
        bad = np.flatnonzero(flat == 0.0)
        if bad.size:
            pos = np.unravel_index(bad[0], sq.shape[:-1])
            raise KeyNormError(f"zero-norm key row at token index {pos[0]} (position {tuple(int(p) for p in pos)})")
    else:
        sq = sq + eps
    norm = ag.elementwise("sqrt", sq)
    return K_raw / ag.broadcast_to(norm, K_raw.shape)


def _check_key(k: np.ndarray) -> None:
    norms = np.sqrt(np.sum(k * k, axis=-1))
    if np.any(np.abs(norms - 1.0) > KEY_NORM_TOL):
        raise KeyNormError(f"key norm {norms.max():.6g} deviates from 1; normalize keys first")


def _col(x: Tensor) -> Tensor:
    return ag.reshape(x, x.shape + (1,))


def _row(x: Tensor) -> Tensor:
    return ag.reshape(x, x.shape[:-1] + (1, x.shape[-1]))


def _gate(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    return ag.broadcast_to(ag.reshape(g, g.shape + (1,) * (len(shape) - g.ndim)), shape)


def delta_step(S_prev, k_t, v_t, alpha_t, beta_t, remove: bool = True, check: bool = True):
    """One gated delta update.

    Shapes: ``S_prev (..., d_v, d_k)``, ``k_t (..., d_k)``, ``v_t (..., d_v)``,
    gates ``(...)``. Returns ``(S_next, v_old, v_new)``. ``remove=False`` drops
    the removal term (``S_next = alpha S + beta v k^T``, with ``v_new = beta v``).
    """
    S_prev, k_t, v_t = ag.as_tensor(S_prev), ag.as_tensor(k_t), ag.as_tensor(v_t)
    alpha_t, beta_t = ag.as_tensor(alpha_t), ag.as_tensor(beta_t)
    if check:
        _check_key(k_t.data)
    aS = _gate(alpha_t, S_prev.shape) * S_prev
    k_row = _row(k_t)
    if not remove:
        bv = _gate(beta_t, v_t.shape) * v_t
        S_next = aS + ag.matmul(_col(bv), k_row)
        return S_next, ag.matmul(aS, _col(k_t))[..., 0], bv
    v_old = ag.matmul(aS, _col(k_t))[..., 0]
    v_new = _gate(beta_t, v_t.shape) * v_t + _gate(1.0 - beta_t, v_old.shape) * v_old
    S_next = aS - ag.matmul(_col(v_old), k_row) + ag.matmul(_col(v_new), k_row)
    return S_next, v_old, v_new


def delta_step_compact(S_prev, k_t, v_t, alpha_t, beta_t, check: bool = True) -> Tensor:
    """Single-product form ``S (alpha (I - beta k k^T)) + beta v k^T``."""
    S_prev, k_t, v_t = ag.as_tensor(S_prev), ag.as_tensor(k_t), ag.as_tensor(v_t)
    alpha_t, beta_t = ag.as_tensor(alpha_t), ag.as_tensor(beta_t)
    if check:
        _check_key(k_t.data)
    dk = k_t.shape[-1]
    lead = k_t.shape[:-1]
    eye = Tensor(np.broadcast_to(np.eye(dk), lead + (dk, dk)))
    kkT = ag.matmul(_col(k_t), _row(k_t))
    factor = _gate(alpha_t, kkT.shape) * (eye - _gate(beta_t, kkT.shape) * kkT)
    bv = _gate(beta_t, v_t.shape) * v_t
    return ag.matmul(S_prev, factor) + ag.matmul(_col(bv), _row(k_t))


def _check_lengths(Q, K, V, alpha, beta) -> int:
    n = Q.shape[0]
    if n < 1:
        raise ValueError("scan needs at least one token")
    for name, x in (("K", K), ("V", V), ("alpha", alpha), ("beta", beta)):
        if x.shape[0] != n:
            raise ValueError(f"length mismatch: Q has {n} tokens, {name} has {x.shape[0]}")
    if Q.shape != K.shape:
        raise ag.ShapeError(f"Q {Q.shape} and K {K.shape} must match")
    return n


def _initial_state(S_0, heads: int, dv: int, dk: int) -> Tensor:
    if S_0 is None:
        return Tensor(np.zeros((heads, dv, dk)))
    return ag.as_tensor(S_0)


def recurrent_scan(Q, K, V, alpha, beta, S_0=None, remove: bool = True) -> tuple[Tensor, Tensor]:
    """Token-by-token scan built from :func:`delta_step`.

    ``Q, K (N, heads, d_k)``, ``V (N, heads, d_v)``, gates ``(N, heads)``.
    Returns outputs ``(N, heads, d_v)`` read as ``o_t = S_t q_t`` from the
    post-update memory, and the final memory.
    """
    Q, K, V, alpha, beta = (ag.as_tensor(x) for x in (Q, K, V, alpha, beta))
    n = _check_lengths(Q, K, V, alpha, beta)
    S = _initial_state(S_0, K.shape[1], V.shape[2], K.shape[2])
    outs = []
    for t in range(n):
        S, _, _ = delta_step(S, K[t], V[t], alpha[t], beta[t], remove=remove, check=False)
        outs.append(ag.matmul(S, _col(Q[t]))[..., 0])
    return ag.stack(outs, axis=0), S


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.matmul(a[..., :, None], b[..., None, :])


def _mv(M: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.matmul(M, x[..., :, None])[..., 0]


def _scan_forward(q, k, v, alpha, beta, S0, remove):
    n = q.shape[0]
    states = np.empty((n + 1,) + S0.shape)
    states[0] = S0
    out = np.empty(v.shape)
    S = S0
    for t in range(n):
        aS = alpha[t][:, None, None] * S
        if remove:
            v_old = _mv(aS, k[t])
            v_new = beta[t][:, None] * v[t] + (1.0 - beta[t])[:, None] * v_old
            S = aS - _outer(v_old, k[t]) + _outer(v_new, k[t])
        else:
            S = aS + _outer(beta[t][:, None] * v[t], k[t])
        states[t + 1] = S
        out[t] = _mv(S, q[t])
    return out, states


def _scan_backward(q, k, v, alpha, beta, states, g_out, g_S, remove):
    n = q.shape[0]
    gq, gk, gv = np.zeros_like(q), np.zeros_like(k), np.zeros_like(v)
    ga, gb = np.zeros_like(alpha), np.zeros_like(beta)
    G = g_S.copy()
    for t in range(n - 1, -1, -1):
        S_t, S_prev = states[t + 1], states[t]
        kt, vt, a, b = k[t], v[t], alpha[t], beta[t]
        G += _outer(g_out[t], q[t])
        gq[t] = _mv(np.swapaxes(S_t, -1, -2), g_out[t])
        aS = a[:, None, None] * S_prev
        Gk = _mv(G, kt)
        if remove:
            v_old = _mv(aS, kt)
            v_new = b[:, None] * vt + (1.0 - b)[:, None] * v_old
            g_vnew = Gk
            gk_t = _mv(np.swapaxes(G, -1, -2), v_new - v_old)
            gb[t] = np.sum(g_vnew * (vt - v_old), axis=-1)
            gv[t] = b[:, None] * g_vnew
            g_vold = (1.0 - b)[:, None] * g_vnew - Gk
            g_aS = G + _outer(g_vold, kt)
            gk_t += _mv(np.swapaxes(aS, -1, -2), g_vold)
        else:
            gk_t = _mv(np.swapaxes(G, -1, -2), b[:, None] * vt)
            gb[t] = np.sum(Gk * vt, axis=-1)
            gv[t] = b[:, None] * Gk
            g_aS = G
        gk[t] = gk_t
        ga[t] = np.sum(g_aS * S_prev, axis=(-2, -1))
        G = a[:, None, None] * g_aS
    return gq, gk, gv, ga, gb, G


def scan_block(Q, K, V, alpha, beta, S_0, remove: bool = True) -> tuple[Tensor, Tensor]:
    """Fused scan over a block of tokens; one tape node, hand-written backward."""
    Q, K, V, alpha, beta, S_0 = (ag.as_tensor(x) for x in (Q, K, V, alpha, beta, S_0))
    _check_lengths(Q, K, V, alpha, beta)
    q, k, v, a, b = Q.data, K.data, V.data, alpha.data, beta.data
    out, states = _scan_forward(q, k, v, a, b, S_0.data, remove)

    def vjp(grads):
        g_out, g_S = grads
        return _scan_backward(q, k, v, a, b, states, g_out, g_S, remove)

    return ag.custom_op("delta_scan", (out, states[-1]), (Q, K, V, alpha, beta, S_0), vjp)


def _heads_first(x: Tensor) -> Tensor:
    return ag.transpose(x, (1, 0, 2))


def scan_block_parallel(Q, K, V, alpha, beta, S_0, remove: bool = True) -> tuple[Tensor, Tensor]:
    """Whole-block form of the gated delta scan.

    With ``g_t = sum_{s<=t} log alpha_s`` inside the block, the memory after
    token t is ``e^{g_t} S_0 + sum_{i<=t} e^{g_t - g_i} u_i k_i^T`` where the
    writes ``u`` solve ``(I + A) U = diag(beta) V - diag(beta e^g) K S_0^T``
    and ``A[t, i] = beta_t e^{g_t - g_i} k_t.k_i`` for ``i < t``.
    """
    Q, K, V, alpha, beta, S_0 = (ag.as_tensor(x) for x in (Q, K, V, alpha, beta, S_0))
    c = _check_lengths(Q, K, V, alpha, beta)
    heads, dv = V.shape[1], V.shape[2]
    q, k, v = _heads_first(Q), _heads_first(K), _heads_first(V)
    b = ag.transpose(beta)  # (heads, c)
    g = ag.cumsum(ag.elementwise("log", ag.transpose(alpha)), axis=1)
    incl = Tensor(np.broadcast_to(np.tril(np.ones((c, c))), (heads, c, c)))
    diff = ag.broadcast_to(ag.reshape(g, (heads, c, 1)), (heads, c, c)) - ag.broadcast_to(
        ag.reshape(g, (heads, 1, c)), (heads, c, c)
    )
    decay = ag.elementwise("exp", diff * incl) * incl  # e^{g_t - g_i}, i <= t
    gam = ag.elementwise("exp", g)
    S0T = ag.transpose(S_0, (0, 2, 1))
    col = lambda x, w: ag.broadcast_to(ag.reshape(x, (heads, c, 1)), (heads, c, w))
    if remove:
        kk = ag.matmul(k, ag.transpose(k, (0, 2, 1)))
        A = col(b, c) * decay * kk
        rhs = col(b, dv) * v - col(b * gam, dv) * ag.matmul(k, S0T)
        U = ag.solve_unit_lower(A, rhs)
    else:
        U = col(b, dv) * v
    qk = ag.matmul(q, ag.transpose(k, (0, 2, 1))) * decay
    O = col(gam, dv) * ag.matmul(q, S0T) + ag.matmul(qk, U)
    last = ag.reshape(g[:, c - 1 : c], (heads, 1))
    tail = ag.elementwise("exp", ag.broadcast_to(last, (heads, c)) - g)  # e^{g_c - g_i}
    S = ag.broadcast_to(ag.reshape(gam[:, c - 1 : c], (heads, 1, 1)), S_0.shape) * S_0 + ag.matmul(
        ag.transpose(U, (0, 2, 1)), col(tail, k.shape[2]) * k
    )
    return _heads_first(O), S


_BLOCK_METHODS = {"sequential": scan_block, "parallel": scan_block_parallel}


def chunked_scan(
    Q, K, V, alpha, beta, S_0=None, chunk_size: int = 64, remove: bool = True, method: str = "sequential"
) -> tuple[Tensor, Tensor]:
    """Blockwise scan carrying the memory across block boundaries.

    Equivalent to :func:`recurrent_scan` for every ``chunk_size``;
    ``method`` picks the per-block kernel ("sequential" or "parallel").
    """
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
    if method not in _BLOCK_METHODS:
        raise ValueError(f"unknown scan method {method!r}")
    run = _BLOCK_METHODS[method]
    Q, K, V, alpha, beta = (ag.as_tensor(x) for x in (Q, K, V, alpha, beta))
    n = _check_lengths(Q, K, V, alpha, beta)
    S = _initial_state(S_0, K.shape[1], V.shape[2], K.shape[2])
    if chunk_size >= n:
        return run(Q, K, V, alpha, beta, S, remove)
    outs = []
    for s in range(0, n, chunk_size):
        e = min(s + chunk_size, n)
        o, S = run(Q[s:e], K[s:e], V[s:e], alpha[s:e], beta[s:e], S, remove)
        outs.append(o)
    return ag.concat(outs, axis=0), S
