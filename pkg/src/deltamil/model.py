"""Slide-level MIL model: embedding, GDN stack, aggregation and task heads.

Baselines share the same code path with the block stack switched off:
``abmil`` is embedding + gated attention pooling, ``mean``/``max`` pool the
embeddings directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .block import BlockParams, _uniform, init_block, stack_forward
from .config import ModelConfig
from .delta import GateTrace

__all__ = [
    "PatchBag",
    "SlideRepr",
    "SurvivalHead",
    "ForwardResult",
    "MILModel",
    "zscore",
    "embed",
    "aggregate_attention",
    "aggregate_pool",
    "classify",
    "cross_entropy",
    "survival_nll",
    "survival_risk",
    "full_forward",
]

ZSCORE_STD_FLOOR = 1e-6
PROB_FLOOR = 1e-12


@dataclass
class PatchBag:
    features: np.ndarray  # (N, c)
    coords: np.ndarray  # (N, 2) integer grid positions (row, col)
    label: int | None = None
    time: float | None = None
    event: bool | None = None
    bag_id: str = ""
    witness: np.ndarray | None = None  # ground truth for evaluation only

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        if self.features.ndim != 2 or len(self.features) < 1:
            raise ValueError(f"bag needs at least one patch, got features of shape {self.features.shape}")
        if len(self.coords) != len(self.features):
            raise ValueError("one coordinate pair per patch required")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def has_survival(self) -> bool:
        return self.time is not None

    def subset(self, index) -> "PatchBag":
        """Sub-bag restricted to ``index`` (patch order follows ``index``)."""
        index = np.asarray(index, dtype=np.intp)
        if index.size == 0:
            raise ValueError("empty patch subset")
        return PatchBag(
            self.features[index],
            self.coords[index],
            self.label,
            self.time,
            self.event,
            self.bag_id,
            None if self.witness is None else self.witness[index],
        )


@dataclass
class SlideRepr:
    vector: Tensor  # (d,)
    attention: np.ndarray | None = None  # (N,), sums to 1


@dataclass
class SurvivalHead:
    """Discrete-time hazard head; ``boundaries`` are the interior bin cut points."""

    boundaries: np.ndarray

    def __post_init__(self):
        self.boundaries = np.asarray(self.boundaries, dtype=np.float64)
        if np.any(self.boundaries <= 0) or np.any(np.diff(self.boundaries) <= 0):
            raise ValueError("bin boundaries must be positive and strictly increasing")

    @property
    def n_bins(self) -> int:
        return len(self.boundaries) + 1

    def bin_of(self, time: float) -> int:
        return int(np.searchsorted(self.boundaries, time, side="right"))

    @classmethod
    def from_times(cls, times, n_bins: int) -> "SurvivalHead":
        qs = np.quantile(np.asarray(times, dtype=np.float64), np.arange(1, n_bins) / n_bins)
        qs = np.maximum.accumulate(qs)
        # strictly increasing even for tied quantiles
        for i in range(1, len(qs)):
            if qs[i] <= qs[i - 1]:
                qs[i] = np.nextafter(qs[i - 1], np.inf)
        return cls(qs)


@dataclass
class ForwardResult:
    output: Tensor  # class probabilities or hazards
    logits: Tensor
    slide: SlideRepr
    traces: list[GateTrace] = field(default_factory=list)


def zscore(features: np.ndarray) -> np.ndarray:
    """Per-dimension standardization across a bag's patches (population std)."""
    mu = features.mean(axis=0)
    sd = np.maximum(features.std(axis=0), ZSCORE_STD_FLOOR)
    return (features - mu) / sd


def embed(bag: PatchBag, W_e, b_e, zscore_flag: bool = False) -> Tensor:
    x = bag.features
    if len(x) == 0:
        raise ValueError("cannot embed an empty bag")
    if zscore_flag:
        x = zscore(x)
    out = ag.matmul(Tensor(x), W_e)
    return out + ag.broadcast_to(b_e, out.shape)


def aggregate_attention(Z_out, V, U, w) -> SlideRepr:
    """Gated attention pooling ``softmax_i(w^T (tanh(V z_i) * sigmoid(U z_i)))``."""
    Z_out = ag.as_tensor(Z_out)
    h = ag.elementwise("tanh", ag.matmul(Z_out, V)) * ag.elementwise("sigmoid", ag.matmul(Z_out, U))
    scores = ag.reshape(ag.matmul(h, ag.reshape(w, (-1, 1))), (1, -1))
    attn = ag.softmax(scores, axis=-1)
    vector = ag.reshape(ag.matmul(attn, Z_out), (-1,))
    return SlideRepr(vector, attn.data.reshape(-1).copy())


def aggregate_pool(Z_out, mode: str) -> SlideRepr:
    Z_out = ag.as_tensor(Z_out)
    if mode == "mean":
        return SlideRepr(ag.mean(Z_out, axis=0))
    if mode == "max":
        return SlideRepr(ag.max_reduce(Z_out, axis=0))
    raise ValueError(f"unknown pooling mode {mode!r}")


def _logits(slide: SlideRepr, W, b) -> Tensor:
    v = ag.reshape(slide.vector, (1, -1))
    out = ag.matmul(v, W)
    return ag.reshape(out + ag.reshape(b, out.shape), (-1,))


def classify(slide: SlideRepr, W, b) -> tuple[Tensor, Tensor]:
    """Returns ``(probabilities, logits)``."""
    logits = _logits(slide, W, b)
    return ag.softmax(logits), logits


def cross_entropy(probs, label: int) -> Tensor:
    probs = ag.as_tensor(probs)
    return -ag.elementwise("log", ag.maximum_const(probs[label], PROB_FLOOR))


def _log_survival(logits: Tensor) -> Tensor:
    """Cumulative ``log S(b) = sum_{tau <= b} log(1 - h_tau)``."""
    n = logits.shape[0]
    log_1mh = ag.elementwise("log", ag.elementwise("sigmoid", -logits))
    tri = Tensor(np.tril(np.ones((n, n))))
    return ag.reshape(ag.matmul(tri, ag.reshape(log_1mh, (n, 1))), (n,))


def survival_nll(logits, time: float, event: bool, head: SurvivalHead) -> Tensor:
    """Discrete-time hazard negative log-likelihood.

    Death in bin b costs ``-log(h_b S(b-1))``; censoring in bin b costs ``-log S(b)``.
    """
    logits = ag.as_tensor(logits)
    b = head.bin_of(time)
    log_S = _log_survival(logits)
    if event:
        log_h = ag.elementwise("log", ag.elementwise("sigmoid", logits[b]))
        ll = log_h + log_S[b - 1] if b > 0 else log_h
    else:
        ll = log_S[b]
    return -ll


def survival_risk(hazards: np.ndarray) -> float:
    """Risk score ``-sum_b S(b)``; larger means earlier expected death."""
    return float(-np.sum(np.cumprod(1.0 - np.asarray(hazards))))


class MILModel:
    """Parameter container plus forward pass.

    ``params`` is an ordered ``name -> Tensor`` mapping; names are the
    parameter groups reported by gradient checks and saved in checkpoints.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, survival_head: SurvivalHead | None = None):
        cfg.validate()
        self.cfg = cfg
        self.survival_head = survival_head
        rng = np.random.default_rng(seed)
        d = cfg.d
        n_out = cfg.n_classes if cfg.task == "classification" else cfg.n_bins
        p: dict[str, np.ndarray | Tensor] = {
            "embed.W": _uniform(rng, cfg.in_dim, (cfg.in_dim, d)),
            "embed.b": np.zeros(d),
        }
        if cfg.model == "deltamil":
            for i in range(cfg.layers):
                for k, t in init_block(cfg, rng).items():
                    p[f"blocks.{i}.{k}"] = t
        if self._aggregator == "attention":
            p["agg.V"] = _uniform(rng, d, (d, cfg.attn_dim))
            p["agg.U"] = _uniform(rng, d, (d, cfg.attn_dim))
            p["agg.w"] = _uniform(rng, cfg.attn_dim, (cfg.attn_dim,))
        p["head.W"] = _uniform(rng, d, (d, n_out))
        p["head.b"] = np.zeros(n_out)
        self.params: dict[str, Tensor] = {
            k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=True, name=k) for k, v in p.items()
        }
        for k, t in self.params.items():
            t.name = k

    @property
    def _aggregator(self) -> str:
        if self.cfg.model == "abmil":
            return "attention"
        if self.cfg.model in ("mean", "max"):
            return self.cfg.model
        return self.cfg.aggregator

    @property
    def has_attention(self) -> bool:
        return self._aggregator == "attention"

    def blocks(self) -> list[BlockParams]:
        out = []
        for i in range(self.cfg.layers if self.cfg.model == "deltamil" else 0):
            prefix = f"blocks.{i}."
            out.append({k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)})
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise KeyError(f"parameter names differ: {sorted(set(state) ^ set(self.params))}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data[...] = v

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def forward(self, bag: PatchBag, train: bool = False, dropout_rate: float = 0.0, rng=None) -> ForwardResult:
        cfg, p = self.cfg, self.params
        Z = embed(bag, p["embed.W"], p["embed.b"], cfg.zscore)
        traces: list[GateTrace] = []
        if cfg.model == "deltamil":
            Z, traces = stack_forward(Z, bag.coords, self.blocks(), cfg, dropout_rate, train, rng)
        agg = self._aggregator
        if agg == "attention":
            slide = aggregate_attention(Z, p["agg.V"], p["agg.U"], p["agg.w"])
        else:
            slide = aggregate_pool(Z, agg)
        if cfg.task == "classification":
            out, logits = classify(slide, p["head.W"], p["head.b"])
        else:
            logits = _logits(slide, p["head.W"], p["head.b"])
            out = ag.elementwise("sigmoid", logits)
        return ForwardResult(out, logits, slide, traces)

    def loss(self, bag: PatchBag, result: ForwardResult) -> Tensor:
        if self.cfg.task == "classification":
            if bag.label is None:
                raise ValueError(f"bag {bag.bag_id!r} has no class label")
            return cross_entropy(result.output, int(bag.label))
        if bag.time is None:
            raise ValueError(f"bag {bag.bag_id!r} has no survival record")
        if self.survival_head is None:
            raise ValueError("survival model needs bin boundaries (survival_head)")
        return survival_nll(result.logits, bag.time, bool(bag.event), self.survival_head)

    def predict(self, bag: PatchBag) -> np.ndarray:
        """Class probabilities, or per-bin hazards for survival."""
        return self.forward(bag).output.data.copy()

    def score(self, bag: PatchBag) -> np.ndarray | float:
        """Probabilities for classification, risk score for survival."""
        out = self.predict(bag)
        return out if self.cfg.task == "classification" else survival_risk(out)


def full_forward(bag: PatchBag, model_config: ModelConfig, params: dict[str, Tensor], task: str | None = None):
    """Functional form: returns ``(prediction, SlideRepr, traces)``."""
    if task is not None and task != model_config.task:
        raise ValueError(f"task {task!r} does not match model config {model_config.task!r}")
    model = MILModel.__new__(MILModel)
    model.cfg, model.params, model.survival_head = model_config, params, None
    res = model.forward(bag)
    return res.output, res.slide, res.traces
