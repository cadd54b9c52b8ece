import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deltamil import autograd as ag
from deltamil.delta import (
    KeyNormError,
    chunked_scan,
    compute_gates,
    delta_step,
    delta_step_compact,
    normalize_keys,
    recurrent_scan,
)


def unit(rng, *shape):
    k = rng.normal(size=shape)
    return k / np.linalg.norm(k, axis=-1, keepdims=True)


def random_sequence(rng, n, heads=2, dk=4, dv=3):
    Q = rng.normal(size=(n, heads, dk))
    K = unit(rng, n, heads, dk)
    V = rng.normal(size=(n, heads, dv))
    alpha = rng.uniform(0.05, 1.0, size=(n, heads))
    beta = rng.uniform(0.0, 1.0, size=(n, heads))
    return Q, K, V, alpha, beta


def naive_scan(Q, K, V, alpha, beta):
    n, heads, dk = K.shape
    S = np.zeros((heads, V.shape[2], dk))
    out = np.zeros((n, heads, V.shape[2]))
    for t in range(n):
        for h in range(heads):
            k, v = K[t, h], V[t, h]
            aS = alpha[t, h] * S[h]
            v_old = aS @ k
            v_new = beta[t, h] * v + (1 - beta[t, h]) * v_old
            S[h] = aS - np.outer(v_old, k) + np.outer(v_new, k)
            out[t, h] = S[h] @ Q[t, h]
    return out, S


def test_gates_zero_weights_are_half():
    a, b = compute_gates(np.ones((3, 2)), np.zeros((2, 1)), np.zeros((2, 1)), np.zeros(1), np.zeros(1))
    assert np.all(a.data == 0.5) and np.all(b.data == 0.5)


def test_gate_saturation():
    a, _ = compute_gates(np.ones((3, 2)), np.zeros((2, 1)), np.zeros((2, 1)), np.zeros(1), np.full(1, 20.0))
    assert np.all(a.data > 1 - 1e-8)


def test_gate_scalar_value():
    _, b = compute_gates(np.array([[1.0, -1.0]]), np.array([[0.3], [0.1]]), np.zeros((2, 1)), np.zeros(1), np.zeros(1))
    assert b.data[0, 0] == pytest.approx(0.549833997312478, abs=1e-15)


def test_gates_strictly_inside_unit_interval(rng):
    a, b = compute_gates(rng.normal(size=(50, 4)) * 3, rng.normal(size=(4, 2)), rng.normal(size=(4, 2)),
                         np.zeros(2), np.zeros(2))
    for g in (a.data, b.data):
        assert np.all((g > 0) & (g < 1))


def test_normalize_keys_examples(rng):
    assert np.allclose(normalize_keys(np.array([[3.0, 4.0]])).data, [[0.6, 0.8]], rtol=0, atol=1e-16)
    assert np.array_equal(normalize_keys(np.array([[0.0, 1.0]])).data, [[0.0, 1.0]])
    out = normalize_keys(rng.normal(size=(20, 8))).data
    assert np.all(np.abs(np.linalg.norm(out, axis=1) - 1) < 1e-12)


def test_normalize_keys_zero_row_names_token():
    K = np.ones((4, 3))
    K[2] = 0
    with pytest.raises(KeyNormError, match="token index 2"):
        normalize_keys(K)


def test_step_rejects_unnormalized_key():
    with pytest.raises(KeyNormError):
        delta_step(np.zeros((2, 2)), np.array([1.0, 1.0]), np.ones(2), 0.5, 0.5)


def test_step_pure_replacement(rng):
    S, k, v = rng.normal(size=(3, 4)), unit(rng, 4), rng.normal(size=3)
    S1, _, _ = delta_step(S, k, v, 1.0, 1.0)
    assert np.allclose(S1.data @ k, v, rtol=0, atol=1e-12)


def test_step_total_forgetting(rng):
    S, k, v = rng.normal(size=(3, 4)), unit(rng, 4), rng.normal(size=3)
    S1, _, _ = delta_step(S, k, v, 0.0, 0.3)
    assert np.allclose(S1.data, 0.3 * np.outer(v, k), rtol=0, atol=1e-15)


def test_step_beta_zero_only_decays(rng):
    S, k, v = rng.normal(size=(3, 4)), unit(rng, 4), rng.normal(size=3)
    for step in (delta_step, delta_step_compact):
        out = step(S, k, v, 0.7, 0.0)
        S1 = out[0] if isinstance(out, tuple) else out
        assert np.allclose(S1.data, 0.7 * S, rtol=0, atol=1e-14)


def test_step_matches_scalar_loop(rng):
    S, k, v = rng.normal(size=(3, 2)), np.array([1.0, 0.0]), rng.normal(size=3)
    a, b = 0.5, 0.25
    ref = np.zeros((3, 2))
    v_old = [sum(a * S[i, j] * k[j] for j in range(2)) for i in range(3)]
    v_new = [b * v[i] + (1 - b) * v_old[i] for i in range(3)]
    for i in range(3):
        for j in range(2):
            ref[i, j] = a * S[i, j] - v_old[i] * k[j] + v_new[i] * k[j]
    assert np.allclose(delta_step(S, k, v, a, b)[0].data, ref, rtol=0, atol=1e-15)


def test_compact_rank_one_case(rng):
    k, v0, v = unit(rng, 4), rng.normal(size=3), rng.normal(size=3)
    out = delta_step_compact(np.outer(v0, k), k, v, 1.0, 1.0).data
    assert np.allclose(out, np.outer(v, k), rtol=0, atol=1e-14)


@given(st.integers(0, 2**31 - 1))
def test_step_forms_agree(seed):
    rng = np.random.default_rng(seed)
    S, k, v = rng.normal(size=(2, 3, 5)), unit(rng, 2, 5), rng.normal(size=(2, 3))
    a, b = rng.uniform(size=2), rng.uniform(size=2)
    full = delta_step(S, k, v, a, b)[0].data
    compact = delta_step_compact(S, k, v, a, b).data
    assert np.max(np.abs(full - compact)) < 1e-12


@given(st.integers(0, 2**31 - 1))
def test_read_after_write(seed):
    rng = np.random.default_rng(seed)
    S, k, v = rng.normal(size=(4, 6)), unit(rng, 6), rng.normal(size=4)
    S1, _, v_new = delta_step(S, k, v, rng.uniform(), rng.uniform())
    assert np.max(np.abs(S1.data @ k - v_new.data)) < 1e-12


def test_additive_write_without_removal(rng):
    S, k, v = rng.normal(size=(3, 4)), unit(rng, 4), rng.normal(size=3)
    S1, _, _ = delta_step(S, k, v, 0.6, 0.4, remove=False)
    assert np.allclose(S1.data, 0.6 * S + 0.4 * np.outer(v, k), rtol=0, atol=1e-15)


def test_single_token_scan(rng):
    Q, K, V, _, _ = random_sequence(rng, 1, heads=1)
    out, _ = recurrent_scan(Q, K, V, np.ones((1, 1)), np.ones((1, 1)))
    assert np.allclose(out.data[0, 0], V[0, 0] * (K[0, 0] @ Q[0, 0]), rtol=0, atol=1e-15)


def test_unwritten_memory_reads_zero(rng):
    Q, K, V, alpha, _ = random_sequence(rng, 6)
    out, S = recurrent_scan(Q, K, V, alpha, np.zeros((6, 2)))
    assert np.all(out.data == 0) and np.all(S.data == 0)


def test_recurrent_scan_matches_dense_loop(rng):
    seq = random_sequence(rng, 5)
    out, S = recurrent_scan(*seq)
    ref_out, ref_S = naive_scan(*seq)
    assert np.allclose(out.data, ref_out, rtol=0, atol=1e-13)
    assert np.allclose(S.data, ref_S, rtol=0, atol=1e-13)


@pytest.mark.parametrize("method", ["sequential", "parallel"])
@pytest.mark.parametrize("chunk", [1, 4, 16, 64, 101])
def test_chunked_matches_recurrent(rng, method, chunk):
    seq = random_sequence(rng, 100)
    ref, S_ref = recurrent_scan(*seq)
    out, S = chunked_scan(*seq, chunk_size=chunk, method=method)
    assert np.max(np.abs(out.data - ref.data)) < 1e-10
    assert np.max(np.abs(S.data - S_ref.data)) < 1e-10


def test_sequential_chunks_bit_identical(rng):
    seq = random_sequence(rng, 37)
    ref, _ = recurrent_scan(*seq)
    for chunk in (1, 5, 37):
        out, _ = chunked_scan(*seq, chunk_size=chunk, method="sequential")
        assert np.array_equal(out.data, ref.data)


@pytest.mark.parametrize("remove", [True, False])
def test_parallel_without_removal_matches(rng, remove):
    seq = random_sequence(rng, 30)
    ref, _ = recurrent_scan(*seq, remove=remove)
    out, _ = chunked_scan(*seq, chunk_size=8, remove=remove, method="parallel")
    assert np.max(np.abs(out.data - ref.data)) < 1e-10


def test_state_carry_is_associative(rng):
    seq = random_sequence(rng, 20)
    full, S_full = recurrent_scan(*seq)
    first, S_mid = recurrent_scan(*(x[:7] for x in seq))
    second, S_end = recurrent_scan(*(x[7:] for x in seq), S_0=S_mid)
    assert np.array_equal(np.concatenate([first.data, second.data]), full.data)
    assert np.array_equal(S_end.data, S_full.data)


def test_forgetting_bound(rng):
    n = 12
    Q, K, _, alpha, beta = random_sequence(rng, n)
    S0 = rng.normal(size=(2, 3, 4))
    S = S0
    prod = np.ones(2)
    for t in range(n):
        S, _, _ = delta_step(S, K[t], np.zeros((2, 3)), alpha[t], beta[t])
        prod *= alpha[t]
        norms = np.linalg.norm(S.data, axis=(1, 2))
        assert np.all(norms <= prod * np.linalg.norm(S0, axis=(1, 2)) + 1e-12)


def test_scan_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        recurrent_scan(np.ones((3, 1, 2)), np.ones((3, 1, 2)) / np.sqrt(2), np.ones((3, 1, 2)),
                       np.ones((2, 1)), np.ones((3, 1)))


@pytest.mark.parametrize("method", ["recurrent", "sequential", "parallel"])
@pytest.mark.parametrize("remove", [True, False])
def test_scan_gradients(rng, method, remove):
    n = 16
    Q, K, V, alpha, beta = random_sequence(rng, n, heads=2, dk=3, dv=2)
    W = rng.normal(size=(n, 2, 2))

    def f(p):
        q, kr, v, a, b = p
        k = normalize_keys(kr)
        if method == "recurrent":
            out, S = recurrent_scan(q, k, v, a, b, remove=remove)
        else:
            out, S = chunked_scan(q, k, v, a, b, chunk_size=5, remove=remove, method=method)
        return ag.sum(out * W) + ag.sum(ag.elementwise("square", S))

    assert ag.finite_diff_check(f, [Q, K, V, alpha, beta]) < 1e-4
