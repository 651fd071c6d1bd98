"""Closed-form training objectives and their analytic gradients.

All objectives are sums over examples (not means); the trainer rescales.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dataset import TripleSet
from .model import Mapping, ModelParams, gather, output_map


@dataclass(frozen=True)
class MSE:
    """``sum_pos (M(q) - c)^2 + neg_weight * sum_neg M(q)^2``."""

    neg_weight: float = 1.0


@dataclass(frozen=True)
class Pinball:
    tau: float

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"pinball tau must lie in (0, 1), got {self.tau}")


@dataclass(frozen=True)
class SemiMSE:
    """Pseudo-label objective: ``L_pos + (L_semi + L_neg) / (n_semi + n_neg)``."""


@dataclass
class Batch:
    pos: TripleSet
    neg: TripleSet | None = None
    semi: TripleSet | None = None


@dataclass
class Gradient:
    entity: np.ndarray
    relation: np.ndarray
    w: float
    b: float

    def flat(self) -> np.ndarray:
        return np.concatenate([self.entity.ravel(), self.relation.ravel(), [self.w, self.b]])

    def is_zero(self) -> bool:
        return not np.any(self.flat())


def _forward(params: ModelParams, triples: TripleSet):
    eh, er, et = gather(params, triples.h, triples.r, triples.t)
    raw = np.einsum("ij,ij,ij->i", eh, et, er)
    z = params.w * raw + params.b
    return eh, er, et, raw, z, output_map(params.mapping, z)


def _stack(batch: Batch, objective):
    """Concatenate the batch into one TripleSet plus per-row loss weights."""
    parts = [batch.pos]
    if isinstance(objective, Pinball):
        return batch.pos, None
    neg = batch.neg if batch.neg is not None else TripleSet.empty()
    semi = batch.semi if batch.semi is not None else TripleSet.empty()
    if isinstance(objective, MSE):
        weights = np.concatenate([np.ones(len(batch.pos)), np.full(len(neg), objective.neg_weight)])
        parts.append(neg)
    elif isinstance(objective, SemiMSE):
        n_gen = len(semi) + len(neg)
        gen_w = 1.0 / n_gen if n_gen else 0.0
        weights = np.concatenate([np.ones(len(batch.pos)), np.full(len(semi) + len(neg), gen_w)])
        parts += [semi, neg]
    else:
        raise TypeError(f"unknown objective {objective!r}")
    return TripleSet.concat(parts), weights


def _loss_and_dp(objective, p: np.ndarray, c: np.ndarray, weights):
    if isinstance(objective, Pinball):
        tau = objective.tau
        diff = c - p
        loss = np.sum(np.where(diff > 0, tau * diff, (tau - 1.0) * diff))
        dp = np.where(diff > 0, -tau, np.where(diff < 0, 1.0 - tau, 0.0))
        return float(loss), dp
    resid = p - c
    return float(np.sum(weights * resid * resid)), 2.0 * weights * resid


def objective_value(params: ModelParams, objective, batch: Batch) -> float:
    rows, weights = _stack(batch, objective)
    if len(rows) == 0:
        return 0.0
    p = _forward(params, rows)[-1]
    return _loss_and_dp(objective, p, rows.c, weights)[0]


def gradient(params: ModelParams, objective, batch: Batch) -> tuple[float, Gradient]:
    """Loss value and its gradient with respect to every parameter.

    The pinball kink and the rectifier corners use subgradient 0.
    """
    rows, weights = _stack(batch, objective)
    gE = np.zeros(params.entity_emb.shape)
    gR = np.zeros(params.relation_emb.shape)
    if len(rows) == 0:
        return 0.0, Gradient(gE, gR, 0.0, 0.0)
    eh, er, et, raw, z, p = _forward(params, rows)
    loss, dp = _loss_and_dp(objective, p, rows.c, weights)
    if params.mapping is Mapping.LOGI:
        dz = dp * p * (1.0 - p)
    else:
        dz = np.where((z > 0.0) & (z < 1.0), dp, 0.0)
    draw = (dz * params.w)[:, None]
    np.add.at(gE, rows.h, draw * et * er)
    np.add.at(gE, rows.t, draw * eh * er)
    np.add.at(gR, rows.r, draw * eh * et)
    return loss, Gradient(gE, gR, float(np.dot(dz, raw)), float(np.sum(dz)))


def mse_objective(params: ModelParams, positives: TripleSet, negatives: TripleSet | None = None,
                  neg_weight: float = 1.0) -> float:
    return objective_value(params, MSE(neg_weight), Batch(positives, negatives))


def pinball_objective(params: ModelParams, triples: TripleSet, tau: float) -> float:
    return objective_value(params, Pinball(tau), Batch(triples))


def pinball_loss(pred, target, tau: float):
    """Elementwise pinball loss; used to evaluate fitted quantile models."""
    diff = np.asarray(target) - np.asarray(pred)
    return np.where(diff > 0, tau * diff, (tau - 1.0) * diff)
