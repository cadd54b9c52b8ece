import numpy as np
import pytest

from deltamil import autograd as ag
from deltamil.config import ModelConfig, OptimConfig
from deltamil.model import MILModel, PatchBag
from deltamil.train import (
    AdamMoments,
    DivergenceError,
    GradAccumulator,
    StepRejected,
    adam_step,
    bag_gradients,
    cross_validate,
    evaluate,
    train,
)

SMALL = dict(in_dim=4, d=8, heads=2, head_dim=4, attn_dim=4, chunk_size=8)


def toy_bags(seed, n_bags=12, n=6):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_bags):
        x = rng.normal(size=(n, 4))
        y = i % 2
        x[0, 0] += 3.0 * y
        out.append(PatchBag(x, np.array([(j // 3, j % 3) for j in range(n)]), label=y, bag_id=f"b{i}"))
    return out


def scalar_adam(gs, lr, b1=0.9, b2=0.999, eps=1e-8, wd=1e-5, p=0.0):
    m = v = 0.0
    for t, g in enumerate(gs, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps) - lr * wd * p
    return p


def test_first_step_is_sign_sized():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([3.0, -0.2, 40.0])}
    cfg = OptimConfig(lr=0.01, weight_decay=0.0)
    new, _ = adam_step(p, g, AdamMoments.zeros_like(p), 1, cfg)
    assert np.allclose(new["w"] - p["w"], -0.01 * np.sign(g["w"]), atol=1e-8)


def test_zero_gradient_no_decay_leaves_params():
    p = {"w": np.array([1.0, 2.0])}
    cfg = OptimConfig(lr=0.1, weight_decay=0.0)
    mom = AdamMoments.zeros_like(p)
    cur = p
    for t in range(1, 4):
        cur, mom = adam_step(cur, {"w": np.zeros(2)}, mom, t, cfg)
    assert np.array_equal(cur["w"], p["w"])


def test_two_steps_match_scalar_oracle():
    p = {"w": np.array([0.0])}
    cfg = OptimConfig(lr=0.1)
    mom = AdamMoments.zeros_like(p)
    for t in (1, 2):
        p, mom = adam_step(p, {"w": np.array([1.0])}, mom, t, cfg)
    assert abs(p["w"][0] - scalar_adam([1.0, 1.0], 0.1)) <= 1e-12


def test_step_preconditions():
    p = {"w": np.zeros(2)}
    with pytest.raises(StepRejected):
        adam_step(p, {"w": np.array([np.nan, 0.0])}, AdamMoments.zeros_like(p), 1, OptimConfig())
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(2)}, AdamMoments.zeros_like(p), 0, OptimConfig())
    with pytest.raises(ag.ShapeError):
        adam_step(p, {"w": np.zeros(3)}, AdamMoments.zeros_like(p), 1, OptimConfig())


def test_accumulated_gradient_is_the_mean():
    m = MILModel(ModelConfig(**SMALL), seed=0)
    bags = toy_bags(0, 5)
    per = [bag_gradients(m, b)[1] for b in bags]
    acc = GradAccumulator(list(m.params))
    for g in per:
        acc.add(g)
    mean = acc.mean()
    for k in m.params:
        oracle = sum(g[k] for g in per) / len(per)
        assert np.max(np.abs(mean[k] - oracle)) <= 1e-12


def test_lr_zero_keeps_parameters():
    bags = toy_bags(1)
    m = MILModel(ModelConfig(**SMALL), seed=0)
    init = m.state()
    before = evaluate(m, bags[8:])
    train(m, bags[:6], bags[6:8], OptimConfig(lr=0.0, weight_decay=0.0, max_epochs=2, accumulation_steps=2))
    assert all(np.array_equal(init[k], v) for k, v in m.state().items())
    assert evaluate(m, bags[8:]) == before


def test_patience_zero_runs_one_epoch():
    bags = toy_bags(2)
    m = MILModel(ModelConfig(**SMALL), seed=0)
    res = train(m, bags[:8], bags[8:], OptimConfig(lr=1e-3, early_stop_patience=0, max_epochs=10))
    assert res.epochs_run == 1 and len(res.log_lines) == 1


def test_best_state_is_restored():
    bags = toy_bags(3)
    m = MILModel(ModelConfig(**SMALL), seed=0)
    snaps = {}
    orig = m.state

    def recording_train():
        log = []
        res = train(m, bags[:8], bags[8:], OptimConfig(lr=5e-2, accumulation_steps=1, max_epochs=6, early_stop_patience=6),
                    log=lambda line: (log.append(line), snaps.__setitem__(len(log), orig())))
        return res

    res = recording_train()
    want = snaps[res.best_epoch]
    assert all(np.array_equal(want[k], v) for k, v in m.state().items())


def test_log_line_format():
    bags = toy_bags(4)
    m = MILModel(ModelConfig(**SMALL), seed=0)
    res = train(m, bags[:8], bags[8:], OptimConfig(lr=1e-3, max_epochs=2, early_stop_patience=5))
    fields = res.log_lines[0].split("\t")
    assert fields[0] == "1" and fields[3] in ("best", "-") and len(fields) == 4


def test_divergence_names_the_bag():
    bags = toy_bags(5)
    bad = bags[3]
    bad.features[0, 0] = np.nan
    m = MILModel(ModelConfig(**SMALL), seed=0)
    with pytest.raises(DivergenceError, match="b3") as info:
        train(m, bags[:8], bags[8:], OptimConfig(lr=1e-3, max_epochs=1))
    assert info.value.bag_id == "b3"


def test_training_learns_toy_task():
    bags = toy_bags(6, n_bags=40)
    m = MILModel(ModelConfig(**SMALL), seed=0)
    train(m, bags[:24], bags[24:32], OptimConfig(lr=1e-2, accumulation_steps=1, max_epochs=15, early_stop_patience=5))
    assert evaluate(m, bags[32:])["auc"] >= 0.9


def test_cross_validate_is_fold_order_independent():
    bags = toy_bags(7, n_bags=18)
    folds = [(bags[:10], bags[10:14], bags[14:]), (bags[4:14], bags[14:], bags[:4])]
    cfg = OptimConfig(lr=1e-2, accumulation_steps=2, max_epochs=2)
    r1, _, _ = cross_validate(folds, ModelConfig(**SMALL), cfg)
    r2, _, _ = cross_validate(folds[::-1], ModelConfig(**SMALL), cfg)
    assert r1.per_fold["auc"] == r2.per_fold["auc"][::-1]
