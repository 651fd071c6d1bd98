"""Planted-model generators and brute-force oracles for the conformal code.

Nothing here is used to *produce* intervals; these functions exist to check
the production path from an independent direction:

* :func:`grid_membership` evaluates the rank-count acceptance rule on a grid
  of candidate scores, without ever forming a threshold or an interval.
* :func:`monte_carlo_validity` simulates exchangeable calibration/test
  scores and counts how often the test score is accepted.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from .dataset import TripleSet
from .unkge.model import Mapping, ModelParams, predict

LN2 = math.log(2.0)


@dataclass
class PlantedWorld:
    true_params: ModelParams
    noise_sigma: float
    heteroscedastic: bool
    seed: int

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _binary_entropy(p: np.ndarray, delta: float = 1e-6) -> np.ndarray:
    p = np.clip(p, delta, 1.0 - delta)
    return -(p * np.log(p) + (1.0 - p) * np.log(1.0 - p))


def generate_planted(n_entities: int, n_relations: int, dim: int, n_triples: int,
                     noise_sigma: float = 0.05, heteroscedastic: bool = False, seed: int = 0,
                     scale: float = 2.0, rank: int | None = 4) -> tuple[PlantedWorld, TripleSet]:
    """Sample a hidden logistic DistMult model and noisy observations of it.

    Triples are drawn uniformly without replacement from E x R x E (with
    replacement if the space is huge). Relation vectors are supported on the
    first ``rank`` coordinates only (all ``dim`` if None), which keeps the
    world learnable from few triples per entity. Observed scores are
    ``clip(M_true(q) + noise, 0, 1)``; heteroscedastic noise has standard
    deviation ``sigma * H(M_true(q)) / ln 2``.
    """
    if min(n_entities, n_relations, dim, n_triples) < 1:
        raise ValueError("all counts must be >= 1")
    rng = np.random.default_rng(seed)
    E = rng.normal(0.0, 1.0, size=(n_entities, dim))
    k = dim if rank is None else max(1, min(rank, dim))
    R = np.zeros((n_relations, dim))
    R[:, :k] = rng.normal(0.0, 1.0 / math.sqrt(k), size=(n_relations, k))
    true = ModelParams(E, R, w=scale, b=0.0, mapping=Mapping.LOGI)

    space = n_entities * n_relations * n_entities
    if space <= 50_000_000:
        keys = rng.choice(space, size=min(n_triples, space), replace=False)
    else:
        keys = rng.integers(0, space, size=n_triples)
    h, rem = np.divmod(keys, n_relations * n_entities)
    r, t = np.divmod(rem, n_entities)
    m = predict(true, h, r, t)
    sd = noise_sigma * (_binary_entropy(m) / LN2 if heteroscedastic else np.ones_like(m))
    c = np.clip(m + rng.normal(0.0, 1.0, size=len(m)) * sd, 0.0, 1.0)
    return PlantedWorld(true, noise_sigma, heteroscedastic, seed), TripleSet(h, r, t, c)


# --------------------------------------------------------------------------
# grid oracle


def _oracle_score(pred: float, c: np.ndarray, entropy_normalized: bool, delta: float) -> np.ndarray:
    resid = np.abs(pred - c)
    if not entropy_normalized:
        return resid
    p = min(max(pred, delta), 1.0 - delta)
    return resid / (-(p * math.log(p) + (1.0 - p) * math.log(1.0 - p)))


def candidate_grid(step: float = 1e-3) -> np.ndarray:
    n = int(round(1.0 / step))
    # i / n is the correctly rounded grid point; i * step drifts (700 * 0.001 != 0.7)
    return np.arange(n + 1) / n


def grid_membership(model: ModelParams, cal_scores, q, alpha: float, step: float = 1e-3,
                    entropy_normalized: bool = False, delta: float = 1e-6) -> np.ndarray:
    """Grid candidates accepted by the literal rank-count rule.

    A candidate ``c`` is accepted iff
    ``#{i in cal and the test point : s_i >= s_new(c)} / (l + 1) > 1 - alpha``.
    ``cal_scores`` are taken as given (any order).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    cal = np.asarray(cal_scores, dtype=np.float64)
    ell = len(cal)
    grid = candidate_grid(step)
    pred = predict(model, q)
    s_new = _oracle_score(pred, grid, entropy_normalized, delta)
    # the test point itself always satisfies s_new >= s_new
    counts = 1 + np.sum(cal[None, :] >= s_new[:, None], axis=1)
    bound = (1 - Fraction(repr(float(alpha)))) * (ell + 1)
    accept = np.array([Fraction(int(n)) > bound for n in counts], dtype=bool)
    return grid[accept]


# --------------------------------------------------------------------------
# Monte Carlo validity


def _bimodal(rng: np.random.Generator, shape) -> np.ndarray:
    pick = rng.random(shape) < 0.5
    return np.abs(np.where(pick, rng.normal(0.1, 0.02, shape), rng.normal(0.8, 0.1, shape)))


SCORE_DISTRIBUTIONS: dict[str, Callable[[np.random.Generator, tuple], np.ndarray]] = {
    "uniform": lambda rng, shape: rng.random(shape),
    "exponential": lambda rng, shape: rng.exponential(1.0, shape),
    "bimodal": _bimodal,
}


@dataclass(frozen=True)
class MCResult:
    ell: int
    alpha: float
    n_trials: int
    coverage: float
    exact: float

    @property
    def upper_bound(self) -> float:
        return self.alpha + 1.0 / (self.ell + 1)

    @property
    def stderr(self) -> float:
        return math.sqrt(max(self.exact * (1.0 - self.exact), 1e-12) / self.n_trials)

    @property
    def exact_in_band(self) -> bool:
        return self.alpha - 1e-12 <= self.exact <= self.upper_bound + 1e-12


def exact_coverage(ell: int, alpha: float) -> float:
    """``ceil(alpha (l + 1)) / (l + 1)``, capped at 1."""
    k = math.ceil(Fraction(repr(float(alpha))) * (ell + 1))
    return min(k, ell + 1) / (ell + 1)


def _mc_chunk(ell: int, k: int, n: int, dist, seed_seq: np.random.SeedSequence) -> int:
    rng = np.random.default_rng(seed_seq)
    draws = dist(rng, (n, ell + 1))
    if k > ell:
        return n
    if k <= 0:
        return 0
    cal = np.partition(draws[:, :ell], k - 1, axis=1)[:, k - 1]
    return int(np.sum(draws[:, ell] <= cal))


def monte_carlo_validity(ell: int, alpha: float, n_trials: int, score_dist="uniform", seed: int = 0,
                         workers: int = 1, chunk_size: int = 2000) -> MCResult:
    """Fraction of trials in which an exchangeable test score is accepted.

    Each trial draws ``l + 1`` i.i.d. scores; the first ``l`` calibrate and
    the last is accepted iff it is <= the ``ceil(alpha (l + 1))``-th smallest
    calibration score. Trials are grouped in fixed chunks with spawned seeds,
    so the result does not depend on ``workers``.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    dist = SCORE_DISTRIBUTIONS[score_dist] if isinstance(score_dist, str) else score_dist
    k = math.ceil(Fraction(repr(float(alpha))) * (ell + 1))
    sizes = [min(chunk_size, n_trials - i) for i in range(0, n_trials, chunk_size)]
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))
    jobs = list(zip(sizes, seeds))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            hits = list(pool.map(lambda job: _mc_chunk(ell, k, job[0], dist, job[1]), jobs))
    else:
        hits = [_mc_chunk(ell, k, n, dist, s) for n, s in jobs]
    return MCResult(ell, float(alpha), n_trials, sum(hits) / n_trials, exact_coverage(ell, alpha))
