import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deltamil.config import ModelConfig
from deltamil.model import MILModel, PatchBag
from deltamil.saliency import (
    NoAttentionError,
    RetentionCurve,
    export_heatmap,
    extract_attention,
    format_curves,
    make_heatmap,
    read_pgm,
    repredict,
    retained_k,
    select_subset,
    sweep,
    witness_percentile,
)
from deltamil.train import evaluate

SMALL = dict(in_dim=4, d=8, heads=2, head_dim=4, attn_dim=4, chunk_size=8)


def grid(n, w=4):
    return np.array([(i // w, i % w) for i in range(n)])


def bags(seed, n_bags=6, n=10):
    rng = np.random.default_rng(seed)
    return [PatchBag(rng.normal(size=(n, 4)), grid(n), label=i % 2) for i in range(n_bags)]


def test_select_subset_examples():
    a = np.array([0.9, 0.5, 0.1])
    assert select_subset(a, 1, "top_k").tolist() == [0]
    assert select_subset(a, 1, "bottom_k").tolist() == [2]
    for s in ("top_k", "bottom_k", "random_k"):
        assert select_subset(a, 3, s, np.random.default_rng(0)).tolist() == [0, 1, 2]
    assert select_subset([0.5, 0.5, 0.1], 1, "top_k").tolist() == [0]
    with pytest.raises(ValueError):
        select_subset(a, 0, "top_k")
    with pytest.raises(ValueError):
        select_subset(a, 4, "top_k")


@given(st.lists(st.integers(0, 6), min_size=1, max_size=30), st.data())
def test_exactly_k_and_tie_rule(vals, data):
    a = np.array(vals, dtype=float)
    k = data.draw(st.integers(1, len(a)))
    top = select_subset(a, k, "top_k")
    assert len(top) == k and len(set(top.tolist())) == k
    assert len(select_subset(a, k, "random_k", np.random.default_rng(0))) == k
    # enumeration oracle: stable sort by descending value keeps lower indices first
    oracle = sorted(sorted(range(len(a)), key=lambda i: -a[i])[:k])
    assert top.tolist() == oracle


@given(st.integers(0, 2**31 - 1), st.integers(1, 10))
def test_top_and_bottom_disjoint(seed, k):
    a = np.random.default_rng(seed).permutation(2 * k + 3).astype(float)
    assert not set(select_subset(a, k, "top_k")) & set(select_subset(a, k, "bottom_k"))


def test_extract_attention_examples(rng):
    m = MILModel(ModelConfig(**SMALL, model="abmil"), seed=0)
    one = PatchBag(rng.normal(size=(1, 4)), grid(1), label=0)
    assert extract_attention(m, one).tolist() == [1.0]
    same = PatchBag(np.tile(rng.normal(size=(1, 4)), (5, 1)), grid(5), label=0)
    assert np.allclose(extract_attention(m, same), 0.2, rtol=0, atol=1e-15)
    with pytest.raises(NoAttentionError, match="no attention available"):
        extract_attention(MILModel(ModelConfig(**SMALL, model="mean"), seed=0), one)


def test_repredict_identity_and_mean_pool(rng):
    b = bags(0)[0]
    m = MILModel(ModelConfig(**SMALL), seed=1)
    before = m.state()
    assert np.array_equal(repredict(m, b, np.arange(len(b))), m.predict(b))
    assert all(np.array_equal(before[k], v) for k, v in m.state().items())
    mp = MILModel(ModelConfig(**SMALL, model="mean"), seed=0)
    x = b.features.copy()
    x[[2, 5, 7]] = x[2]
    bb = PatchBag(x, b.coords, label=0)
    assert np.allclose(repredict(mp, bb, [2, 5, 7]), repredict(mp, bb, [5]), rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        repredict(m, b, [])


def test_retained_k():
    assert retained_k(0.1, 256) == 26 and retained_k(0.001, 50) == 1 and retained_k(1.0, 7) == 7


def test_sweep_at_full_ratio_equals_eval():
    data = bags(1)
    m = MILModel(ModelConfig(**SMALL), seed=2)
    acc = evaluate(m, data)["acc"]
    for s in ("top_k", "bottom_k", "random_k"):
        c = sweep(m, data, s, [1.0], seeds=(0, 3))
        assert c.at(1.0) == acc


def test_random_k_is_deterministic():
    data = bags(2)
    m = MILModel(ModelConfig(**SMALL), seed=0)
    a = sweep(m, data, "random_k", [0.3, 0.6], seeds=(4,))
    b = sweep(m, data, "random_k", [0.3, 0.6], seeds=(4,))
    assert a.points == b.points and a.seeds == (4,)


def test_curve_validation_and_table():
    with pytest.raises(ValueError):
        RetentionCurve("top_k", [(0.5, 1.0), (0.5, 1.0)])
    with pytest.raises(ValueError):
        RetentionCurve("top_k", [(0.0, 1.0)])
    text = format_curves([RetentionCurve("random_k", [(0.5, 0.75)], (0, 1))])
    assert text.splitlines() == ["strategy\tratio\tmetric\tn_seeds", "random_k\t0.5000\t0.750000\t2"]


def test_witness_percentile_bounds(rng):
    n, m = 100, 5
    a = rng.random(n)
    mask = np.zeros(n, bool)
    mask[np.argsort(a)[-m:]] = True
    assert witness_percentile(a, mask) >= (n - m) / n
    vals = [witness_percentile(rng.random(n), rng.random(n) < 0.2) for _ in range(300)]
    assert abs(np.mean(vals) - 0.5) < 0.03
    with pytest.raises(ValueError):
        witness_percentile(a, np.zeros(n, bool))


def test_heatmap_examples(tmp_path):
    c = grid(6, 3)
    hm = make_heatmap(np.full(6, 1 / 6), c)
    assert np.unique(hm.values).tolist() == [0.5]
    px = export_heatmap([0, 0, 1, 0, 0, 0], c, tmp_path / "h.pgm").pixels()
    assert px.tolist() == [[0, 0, 255], [0, 0, 0]]
    sparse = make_heatmap([0.2, 0.8], np.array([[0, 0], [2, 2]]))
    assert sparse.mask.sum() == 2 and sparse.pixels()[1, 1] == 0


@given(st.integers(0, 2**31 - 1), st.sampled_from(["minmax", "percentile"]))
def test_heatmap_round_trip(tmp_path_factory, seed, norm):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 30))
    a = rng.random(n)
    path = tmp_path_factory.mktemp("hm") / "a.pgm"
    hm = export_heatmap(a, grid(n, 5), path, norm)
    back = read_pgm(path)
    occ = hm.mask
    assert np.all(np.abs(back[occ] / 255 - hm.values[occ]) <= 1 / 255)
    assert np.all((hm.values[occ] >= 0) & (hm.values[occ] <= 1))
    assert np.all(back[~occ] == 0)
    path2 = path.with_name("b.pgm")
    export_heatmap(a, grid(n, 5), path2, norm)
    assert path.read_bytes() == path2.read_bytes()


def test_heatmap_unwritable(tmp_path):
    with pytest.raises(OSError):
        export_heatmap([1.0], grid(1), tmp_path / "missing" / "x.pgm")
