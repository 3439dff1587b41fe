"""Training loop, run configuration and evaluation of a trained model.

Four composition variants share everything except the composition head/loss:
``compnet`` (composed classifiers, approximate softmax), ``bce`` (composed
classifiers, binary cross-entropy), ``softmax_product`` (no composition loss,
p_ao = p_a * p_o at inference) and ``composition_fc`` (one directly learned
classifier per seen pair).
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional

import numpy as np

from .data import Dataset
from .inference import GridScorer
from .loss import LossSettings, LossWeights, batch_loss
from .metrics import MetricReport, ap_table, map_by_split, pair_key, precision_at_1
from .model import CompNet, ModelConfig
from .numerics import SGD, LrSchedule, lr_at

log = logging.getLogger(__name__)

BASELINES = ("compnet", "softmax_product", "composition_fc", "bce")
SCORING = {"compnet": "compnet", "bce": "compnet", "softmax_product": "product",
           "composition_fc": "fc"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    baseline: str = "compnet"
    feature_dim: int = 32
    encoder: str = "mlp"
    encoder_hidden: List[int] = field(default_factory=list)
    dropout: float = 0.3
    slope: float = 0.1
    detach_composition_inputs: bool = False
    loss_weights: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    num_negatives: Optional[int] = None
    negatives_from: str = "seen"
    conditional: bool = True
    conditional_support: str = "all"
    k_a: int = 5
    k_o: int = 5
    epochs: int = 10
    epoch_budgets: List[int] = field(default_factory=list)
    batch_size: int = 128
    base_rate: float = 0.1 / 256
    warmup_fraction: float = 0.05
    decay: str = "step"
    decay_factor: float = 0.5
    decay_steps: int = 10
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_norm: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if self.num_negatives is not None and self.num_negatives < 1:
            raise ConfigError("num_negatives must be >= 1 (omit it for all seen pairs)")
        if self.k_a < 1 or self.k_o < 1:
            raise ConfigError("k_a and k_o must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if any(b < 1 for b in self.epoch_budgets):
            raise ConfigError("epoch budgets must be >= 1")
        try:
            self.loss_settings()
            self.schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run settings: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def loss_settings(self) -> LossSettings:
        weights = list(self.loss_weights)
        composition = {"compnet": "compnet", "bce": "bce", "composition_fc": "fc",
                       "softmax_product": "none"}[self.baseline]
        if self.baseline == "softmax_product":
            weights[2] = 0.0
        return LossSettings(LossWeights.from_list(weights), self.num_negatives,
                            self.negatives_from, self.conditional, self.conditional_support,
                            composition)

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.base_rate, self.batch_size, self.warmup_fraction, self.decay,
                          self.decay_factor, self.decay_steps)

    def model_config(self, dataset: Dataset) -> ModelConfig:
        raw_dim = int(dataset.samples[0].feature.shape[0])
        feature_dim = raw_dim if self.encoder == "identity" else self.feature_dim
        return ModelConfig(raw_dim, feature_dim, len(dataset.attributes), len(dataset.objects),
                           self.encoder, list(self.encoder_hidden), self.slope, self.dropout,
                           self.detach_composition_inputs, self.seed)


@dataclass
class TrainedModel:
    model: CompNet
    config: RunConfig
    seen_pairs: List[tuple]
    fc: Optional[np.ndarray] = None
    history: List[dict] = field(default_factory=list)

    def scorer(self) -> GridScorer:
        return GridScorer(self.model.eval(), SCORING[self.config.baseline], fc=self.fc,
                          fc_pairs=self.seen_pairs)

    def meta(self) -> dict:
        return {"run_config": self.config.to_dict(),
                "seen_pairs": [list(p) for p in self.seen_pairs], "history": self.history}

    def save(self, path):
        from .model import save_checkpoint

        extra = {"fc.W": self.fc} if self.fc is not None else None
        save_checkpoint(path, self.model, self.meta(), extra)

    @classmethod
    def load(cls, path) -> "TrainedModel":
        from .model import load_checkpoint

        model, header = load_checkpoint(path)
        meta = header["meta"]
        cfg = RunConfig.from_dict(meta["run_config"])
        seen = [tuple(p) for p in meta["seen_pairs"]]
        return cls(model.eval(), cfg, seen, header["extra"].get("fc.W"), meta.get("history", []))


def train(dataset: Dataset, cfg: RunConfig, epochs: Optional[int] = None,
          callback=None) -> TrainedModel:
    """Train on the ``train`` partition following the configured LR schedule."""
    epochs = epochs or cfg.epochs
    model = CompNet(cfg.model_config(dataset))
    model.reseed_dropout([cfg.seed, 2])
    seen = dataset.space.mask("seen")
    seen_pairs = [tuple(map(int, p)) for p in np.argwhere(seen)]
    fc = None
    if cfg.baseline == "composition_fc":
        rng_fc = np.random.default_rng([cfg.seed, 3])
        limit = np.sqrt(6.0 / model.D)
        fc = np.concatenate([rng_fc.uniform(-limit, limit, (len(seen_pairs), model.D)),
                             np.zeros((len(seen_pairs), 1))], axis=1)
    train_samples = dataset.partition("train")
    if not train_samples:
        raise ConfigError("dataset has no train images")
    X, Ya, Yo = dataset.arrays(train_samples)
    settings = cfg.loss_settings()
    schedule = cfg.schedule()
    optimizer = SGD(cfg.momentum, cfg.weight_decay, cfg.clip_norm)
    params = dict(model.params)
    if fc is not None:
        params["fc.W"] = fc
    n = X.shape[0]
    steps_per_epoch = -(-n // cfg.batch_size)
    total = steps_per_epoch * epochs
    rng = np.random.default_rng([cfg.seed, 4])
    history = []
    step = 0
    model.train()
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        sums: Dict[str, float] = {}
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            rate = lr_at(schedule, step, total)
            _, parts, grads = batch_loss(model, X[idx], Ya[idx], Yo[idx], seen, settings, fc=fc)
            optimizer.step(params, grads, rate)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            step += 1
        entry = {"epoch": epoch + 1, "lr": rate, **{k: v / n for k, v in sums.items()}}
        if not np.isfinite(entry["total"]):
            raise FloatingPointError(f"loss diverged at epoch {epoch + 1}")
        history.append(entry)
        log.info("epoch %d loss %.4f (%.1fs)", epoch + 1, entry["total"], time.perf_counter() - t0)
        if callback is not None:
            callback(entry)
    model.eval()
    return TrainedModel(model, cfg, seen_pairs, fc, history)


def evaluate(trained: TrainedModel, dataset: Dataset, k_a: Optional[int] = None,
             k_o: Optional[int] = None, samples=None) -> MetricReport:
    """Head P@1 and seen/unseen composition mAP over the test partitions."""
    k_a = k_a or trained.config.k_a
    k_o = k_o or trained.config.k_o
    samples = samples if samples is not None else dataset.partition("test-seen", "test-unseen")
    if not samples:
        raise ConfigError("dataset has no test images")
    model = trained.model.eval()
    X, Ya, Yo = dataset.arrays(samples)
    ids = np.array([s.id for s in samples])
    F = model.encode(X)
    s_a, s_o = model.head_scores(F)
    p1_o, skip_o = precision_at_1(s_o, Yo)
    p1_a, skip_a = precision_at_1(s_a, Ya)
    scores = trained.scorer().score(F, k_a, k_o)
    relevance = Ya[:, :, None] & Yo[:, None, :]
    space = dataset.space
    pairs = sorted(space.seen) + sorted(space.unseen)
    if trained.config.baseline == "composition_fc":
        pairs = sorted(space.seen)
    table = ap_table(scores, relevance, pairs, ids)
    seen_map, unseen_map = map_by_split(table, space.seen, space.unseen)
    n_seen = sum(p in table for p in space.seen)
    n_unseen = sum(p in table for p in space.unseen)
    return MetricReport(p1_o, p1_a, seen_map, unseen_map, n_seen, n_unseen,
                        len(pairs) - len(table), max(skip_a, skip_o), min(k_a, len(dataset.attributes)),
                        min(k_o, len(dataset.objects)), trained.config.baseline,
                        {pair_key(p): v for p, v in sorted(table.items())})
