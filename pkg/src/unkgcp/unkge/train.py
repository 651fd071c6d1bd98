"""Minibatch training with early stopping, plus the pseudo-labelling
(semi-supervised) loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..dataset import SplitDataset, TripleSet, corrupt_negatives, holdout
from ..errors import ConfigError, TrainingError
from ..seeding import derive_seed, rng_for
from .model import Mapping, ModelParams, init_params, predict
from .objectives import MSE, Batch, Gradient, Pinball, SemiMSE, gradient

log = logging.getLogger(__name__)

VALIDATION_FRACTION = 0.05


@dataclass(frozen=True)
class SemiConfig:
    t_new_semi: int = 20
    t_semi_train: int = 30
    m_semi_fraction: float = 0.8
    pool_size: int = 100_000

    def validate(self, max_epochs: int) -> None:
        if not 0 <= self.t_new_semi < self.t_semi_train <= max_epochs:
            raise ConfigError("need 0 <= t_new_semi < t_semi_train <= max_epochs")
        if not 0.0 < self.m_semi_fraction <= 1.0:
            raise ConfigError("m_semi_fraction must lie in (0, 1]")
        if self.pool_size < 1:
            raise ConfigError("pool_size must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    dim: int = 128
    batch_size: int = 256
    neg_per_pos: int = 10
    patience: int = 200
    max_epochs: int = 1000
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    neg_weight: float = 1.0
    mapping: Mapping = Mapping.LOGI
    semi: SemiConfig | None = None
    resample_negatives: bool = True
    # "pos-neg": mean of positive and negative-sample validation MSE;
    # "pos": positive validation MSE only (for worlds whose corruptions are not false)
    early_stop: str = "pos-neg"

    def __post_init__(self):
        for name in ("learning_rate", "dim", "batch_size", "neg_per_pos", "patience", "max_epochs", "neg_weight"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.patience > self.max_epochs:
            raise ConfigError("patience must not exceed max_epochs")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.early_stop not in ("pos-neg", "pos"):
            raise ConfigError(f"unknown early-stopping criterion {self.early_stop!r}")
        object.__setattr__(self, "mapping", Mapping(self.mapping))
        if self.semi is not None:
            self.semi.validate(self.max_epochs)

    def semi_batch_size(self) -> int:
        if self.semi is None:
            return 0
        return math.floor(self.semi.m_semi_fraction * self.batch_size)


@dataclass
class TrainResult:
    params: ModelParams
    best_epoch: int
    history: list[dict] = field(default_factory=list)


class _Optimizer:
    def __init__(self, cfg: TrainConfig, params: ModelParams):
        self.cfg = cfg
        self.t = 0
        if cfg.optimizer == "adam":
            self.m = [np.zeros_like(params.entity_emb), np.zeros_like(params.relation_emb), np.zeros(2)]
            self.v = [np.zeros_like(params.entity_emb), np.zeros_like(params.relation_emb), np.zeros(2)]

    def step(self, params: ModelParams, g: Gradient, scale: float) -> None:
        lr = self.cfg.learning_rate
        grads = [g.entity * scale, g.relation * scale, np.array([g.w, g.b]) * scale]
        if self.cfg.optimizer == "sgd":
            upd = [lr * x for x in grads]
        else:
            b1, b2 = self.cfg.betas
            self.t += 1
            c1 = 1.0 - b1 ** self.t
            c2 = 1.0 - b2 ** self.t
            upd = []
            for m, v, x in zip(self.m, self.v, grads):
                m *= b1
                m += (1.0 - b1) * x
                v *= b2
                v += (1.0 - b2) * x * x
                upd.append(lr * (m / c1) / (np.sqrt(v / c2) + self.cfg.eps))
        params.entity_emb -= upd[0]
        params.relation_emb -= upd[1]
        params.w -= float(upd[2][0])
        params.b -= float(upd[2][1])


def _validation_criterion(params: ModelParams, objective, val: TripleSet, val_neg: TripleSet,
                          mode: str = "pos-neg") -> float:
    p = predict(params, val)
    if isinstance(objective, Pinball):
        diff = val.c - p
        return float(np.mean(np.where(diff > 0, objective.tau * diff, (objective.tau - 1.0) * diff)))
    pos_mse = float(np.mean((p - val.c) ** 2))
    if mode == "pos":
        return pos_mse
    neg_mse = float(np.mean(predict(params, val_neg) ** 2))
    return 0.5 * (pos_mse + neg_mse)


def _sample_pool(train: TripleSet, n_entities: int, size: int, rng: np.random.Generator) -> TripleSet:
    src = train[rng.integers(0, len(train), size=size)]
    return corrupt_negatives(src, n_entities, 1, rng, known=train)


def pseudo_label(params: ModelParams, pool: TripleSet) -> TripleSet:
    """Pair each pool triple with the current model's prediction."""
    return pool.with_scores(predict(params, pool)) if len(pool) else TripleSet.empty()


def fit(data: SplitDataset, cfg: TrainConfig, objective=None, semi: bool = False) -> TrainResult:
    """Train on the proper training split; returns the best-validation epoch.

    ``objective`` defaults to ``MSE(cfg.neg_weight)``. With ``semi=True``
    (and ``cfg.semi`` set) pseudo-labelled pool triples join every batch
    from epoch ``t_new_semi`` on.
    """
    if objective is None:
        objective = MSE(cfg.neg_weight)
    if len(data.train) == 0:
        raise ConfigError("training split is empty")
    semi_cfg = cfg.semi if semi else None
    n_ent = data.n_entities
    uses_neg = not isinstance(objective, Pinball)
    if semi_cfg is not None and not isinstance(objective, MSE):
        raise ConfigError("semi-supervised training only supports the MSE objective")

    train, val = holdout(data.train, VALIDATION_FRACTION, derive_seed(cfg.seed, "validation"))
    val_neg = corrupt_negatives(val, n_ent, cfg.neg_per_pos, derive_seed(cfg.seed, "val-negatives"), known=data.train)
    params = init_params(n_ent, data.n_relations, cfg.dim, rng_for(cfg.seed, "init"), cfg.mapping)
    opt = _Optimizer(cfg, params)
    k = cfg.neg_per_pos
    n_semi = cfg.semi_batch_size() if semi_cfg is not None else 0
    fixed_neg = None
    if uses_neg and not cfg.resample_negatives:
        fixed_neg = corrupt_negatives(train, n_ent, k, derive_seed(cfg.seed, "negatives"))

    best = (math.inf, -1, params.copy())
    history = []
    pool = None
    for epoch in range(cfg.max_epochs):
        in_semi = semi_cfg is not None and epoch >= semi_cfg.t_new_semi
        if in_semi and epoch < semi_cfg.t_semi_train:
            pool = pseudo_label(params, _sample_pool(train, n_ent, semi_cfg.pool_size, rng_for(cfg.seed, "semi-pool", epoch)))
        epoch_obj = SemiMSE() if in_semi else objective
        neg = None
        if uses_neg:
            neg = fixed_neg if fixed_neg is not None else corrupt_negatives(
                train, n_ent, k, derive_seed(cfg.seed, "negatives", epoch))
        order = rng_for(cfg.seed, "shuffle", epoch).permutation(len(train))
        semi_rng = rng_for(cfg.seed, "semi-batch", epoch)
        total = 0.0
        for start in range(0, len(train), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = Batch(train[idx])
            if uses_neg:
                batch.neg = neg[(idx[:, None] * k + np.arange(k)).ravel()]
            if in_semi and n_semi:
                batch.semi = pool[semi_rng.integers(0, len(pool), size=n_semi)]
            loss, g = gradient(params, epoch_obj, batch)
            if not math.isfinite(loss):
                raise TrainingError("non-finite training loss", epoch)
            total += loss
            opt.step(params, g, 1.0 / len(idx))
            if not (np.isfinite(params.w) and np.isfinite(params.b)):
                raise TrainingError("parameters diverged", epoch)
        crit = _validation_criterion(params, objective, val, val_neg, cfg.early_stop)
        if not math.isfinite(crit):
            raise TrainingError("non-finite validation criterion", epoch)
        history.append({"epoch": epoch, "train_loss": total / len(train), "val_criterion": crit})
        if crit < best[0]:
            best = (crit, epoch, params.copy())
        elif epoch - best[1] >= cfg.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best[1])
            break
    best_params = best[2].astype(np.float32)
    return TrainResult(best_params, best[1], history)


def train(data: SplitDataset, cfg: TrainConfig, objective=None) -> ModelParams:
    return fit(data, cfg, objective).params


def train_semi(data: SplitDataset, cfg: TrainConfig) -> ModelParams:
    """Pseudo-labelled training; identical to :func:`train` when ``cfg.semi`` is None."""
    if cfg.semi is None:
        return train(data, cfg)
    return fit(data, cfg, semi=True).params


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
