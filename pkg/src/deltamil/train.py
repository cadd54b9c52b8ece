"""Adam with decoupled weight decay, gradient accumulation and early stopping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .config import ModelConfig, OptimConfig
from .metrics import MetricError, MetricsReport, accuracy, c_index, multiclass_auc
from .model import MILModel, PatchBag, SurvivalHead, survival_risk

__all__ = [
    "StepRejected",
    "DivergenceError",
    "AdamMoments",
    "adam_step",
    "GradAccumulator",
    "bag_gradients",
    "evaluate",
    "validation_metric",
    "TrainResult",
    "train",
    "cross_validate",
]


class StepRejected(FloatingPointError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, bag_id: str, detail: str = ""):
        super().__init__(f"loss diverged on bag {bag_id!r}{': ' + detail if detail else ''}")
        self.bag_id = bag_id


@dataclass
class AdamMoments:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamMoments":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], moments: AdamMoments, t: int, cfg: OptimConfig
) -> tuple[dict[str, np.ndarray], AdamMoments]:
    """One Adam update with decoupled weight decay; inputs are left untouched."""
    if t < 1:
        raise ValueError(f"step counter t must be >= 1, got {t}")
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise StepRejected(f"non-finite gradient in {bad}; step rejected")
    b1, b2 = cfg.beta1, cfg.beta2
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ag.ShapeError(f"{k}: gradient {g.shape} vs parameter {p.shape}")
        m = b1 * moments.m[k] + (1 - b1) * g
        v = b2 * moments.v[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p[k] = p - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps) - cfg.lr * cfg.weight_decay * p
        new_m[k], new_v[k] = m, v
    return new_p, AdamMoments(new_m, new_v)


class GradAccumulator:
    """Sums per-bag gradients in arrival order; ``mean()`` is the applied gradient."""

    def __init__(self, names: Sequence[str]):
        self.names = list(names)
        self.reset()

    def reset(self) -> None:
        self.total: dict[str, np.ndarray] | None = None
        self.count = 0

    def add(self, grads: dict[str, np.ndarray]) -> None:
        if self.total is None:
            self.total = {k: grads[k].copy() for k in self.names}
        else:
            for k in self.names:
                self.total[k] += grads[k]
        self.count += 1

    def mean(self) -> dict[str, np.ndarray]:
        if not self.count:
            raise ValueError("no gradients accumulated")
        return {k: v / self.count for k, v in self.total.items()}


def bag_gradients(
    model: MILModel, bag: PatchBag, dropout_rate: float = 0.0, rng: np.random.Generator | None = None
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and per-parameter gradient for a single bag."""
    names = list(model.params)
    leaves = [model.params[k] for k in names]
    try:
        with ag.Tape() as tape:
            res = model.forward(bag, train=True, dropout_rate=dropout_rate, rng=rng)
            loss = model.loss(bag, res)
        grads = ag.backward(tape, loss, leaves)
    except ag.NonFiniteError as exc:
        raise DivergenceError(bag.bag_id, str(exc)) from exc
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(bag.bag_id)
    return value, dict(zip(names, grads))


def _scores(model: MILModel, bags: Sequence[PatchBag]) -> tuple[dict[str, float], float]:
    if not bags:
        raise ValueError("evaluation set is empty")
    outs, losses = [], []
    for b in bags:
        res = model.forward(b)
        outs.append(res.output.data.copy())
        losses.append(model.loss(b, res).item())
    metrics: dict[str, float] = {}
    if model.cfg.task == "classification":
        probs = np.stack(outs)
        labels = np.array([b.label for b in bags])
        metrics["acc"] = accuracy(probs, labels)
        try:
            metrics["auc"] = multiclass_auc(probs, labels)
        except MetricError:
            pass
    else:
        risks = [survival_risk(h) for h in outs]
        try:
            metrics["c_index"] = c_index(risks, [b.time for b in bags], [b.event for b in bags])
        except MetricError:
            pass
    return metrics, float(np.mean(losses))


def evaluate(model: MILModel, bags: Sequence[PatchBag]) -> dict[str, float]:
    """ACC and AUC for classification, C-index for survival. Undefined metrics are omitted."""
    if model.cfg.task == "survival" and model.survival_head is None:
        # loss needs bin boundaries; risk scores do not
        risks = [model.score(b) for b in bags]
        try:
            return {"c_index": c_index(risks, [b.time for b in bags], [b.event for b in bags])}
        except MetricError:
            return {}
    return _scores(model, bags)[0]


def validation_metric(model: MILModel, bags: Sequence[PatchBag]) -> tuple[float, float]:
    """``(metric, loss)``; metric is AUC or C-index, NaN when undefined."""
    key = "auc" if model.cfg.task == "classification" else "c_index"
    metrics, loss = _scores(model, bags)
    return metrics.get(key, float("nan")), loss


@dataclass
class TrainResult:
    best_epoch: int
    best_metric: float
    epochs_run: int
    history: list[tuple[int, float, float, bool]] = field(default_factory=list)
    log_lines: list[str] = field(default_factory=list)


def _better(metric: float, loss: float, best: tuple[float, float] | None) -> bool:
    if best is None:
        return True
    m = -np.inf if np.isnan(metric) else metric
    bm = -np.inf if np.isnan(best[0]) else best[0]
    return m > bm or (m == bm and loss < best[1])


def train(
    model: MILModel,
    train_bags: Sequence[PatchBag],
    val_bags: Sequence[PatchBag],
    cfg: OptimConfig,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Fit ``model`` in place and leave it holding its best-validation parameters.

    Each epoch visits the training bags in a seeded shuffled order, one bag
    at a time; gradients are averaged over ``accumulation_steps`` bags (or
    the remainder at the end of an epoch) before an Adam step.
    """
    cfg.validate()
    if not train_bags or not val_bags:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    dropout_rate = cfg.effective_dropout(model.cfg.task)
    names = list(model.params)
    moments = AdamMoments.zeros_like(model.state())
    acc = GradAccumulator(names)
    t = 0
    best: tuple[float, float] | None = None
    best_state = model.state()
    best_epoch, since_best = 0, 0
    result = TrainResult(0, float("nan"), 0)

    def apply() -> None:
        nonlocal moments, t
        t += 1
        new_p, moments = adam_step(model.state(), acc.mean(), moments, t, cfg)
        model.load_state(new_p)
        acc.reset()

    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        for i in rng.permutation(len(train_bags)):
            loss, grads = bag_gradients(model, train_bags[i], dropout_rate, rng)
            losses.append(loss)
            acc.add(grads)
            if acc.count == cfg.accumulation_steps:
                apply()
        if acc.count:
            apply()
        metric, vloss = validation_metric(model, val_bags)
        improved = _better(metric, vloss, best)
        if improved:
            best, best_state, best_epoch, since_best = (metric, vloss), model.state(), epoch, 0
        else:
            since_best += 1
        train_loss = float(np.mean(losses))
        result.history.append((epoch, train_loss, metric, improved))
        line = f"{epoch}\t{train_loss:.6f}\t{metric:.6f}\t{'best' if improved else '-'}"
        result.log_lines.append(line)
        if log is not None:
            log(line)
        result.epochs_run = epoch
        if since_best >= cfg.early_stop_patience:
            break
    model.load_state(best_state)
    result.best_epoch = best_epoch
    result.best_metric = best[0] if best else float("nan")
    return result


def survival_head_for(bags: Sequence[PatchBag], n_bins: int) -> SurvivalHead:
    return SurvivalHead.from_times([b.time for b in bags], n_bins)


def cross_validate(
    folds: Sequence[tuple[list[PatchBag], list[PatchBag], list[PatchBag]]],
    model_cfg: ModelConfig,
    optim_cfg: OptimConfig,
    seed: int = 0,
    log: Callable[[str], None] | None = None,
) -> tuple[MetricsReport, list[MILModel], list[TrainResult]]:
    """Train a fresh model per ``(train, val, test)`` split; report test metrics per fold.

    Every fold is seeded from ``seed`` alone, so results do not depend on
    which folds run or in what order.
    """
    report = MetricsReport()
    models, results = [], []
    for k, (tr, va, te) in enumerate(folds):
        head = survival_head_for(tr, model_cfg.n_bins) if model_cfg.task == "survival" else None
        model = MILModel(model_cfg, seed=seed, survival_head=head)
        if log is not None:
            log(f"# fold {k}")
        res = train(model, tr, va, optim_cfg, log)
        report.add(**evaluate(model, te))
        models.append(model)
        results.append(res)
    return report, models, results
