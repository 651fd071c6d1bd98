"""Shared test utilities: finite-difference oracle and small random fixtures."""
import numpy as np

from unkgcp.dataset import TripleSet
from unkgcp.unkge.model import Mapping, ModelParams
from unkgcp.unkge.objectives import objective_value


def random_params(rng, n_ent=6, n_rel=3, dim=8, mapping=Mapping.LOGI, spread=0.8):
    return ModelParams(rng.uniform(-spread, spread, (n_ent, dim)), rng.uniform(-spread, spread, (n_rel, dim)),
                       w=rng.uniform(0.5, 2.0), b=rng.uniform(-0.5, 0.5), mapping=mapping)


def random_triples(rng, n, n_ent=6, n_rel=3, zero=False):
    c = np.zeros(n) if zero else rng.random(n)
    return TripleSet(rng.integers(0, n_ent, n), rng.integers(0, n_rel, n), rng.integers(0, n_ent, n), c)


def numerical_gradient(params: ModelParams, objective, batch, step: float = 1e-5) -> np.ndarray:
    """Central differences over every parameter, in ``Gradient.flat()`` order."""
    base = params.copy()
    slots = [(base.entity_emb, idx) for idx in np.ndindex(base.entity_emb.shape)]
    slots += [(base.relation_emb, idx) for idx in np.ndindex(base.relation_emb.shape)]
    out = []
    for arr, idx in slots:
        orig = arr[idx]
        arr[idx] = orig + step
        up = objective_value(base, objective, batch)
        arr[idx] = orig - step
        down = objective_value(base, objective, batch)
        arr[idx] = orig
        out.append((up - down) / (2 * step))
    for name in ("w", "b"):
        orig = getattr(base, name)
        setattr(base, name, orig + step)
        up = objective_value(base, objective, batch)
        setattr(base, name, orig - step)
        down = objective_value(base, objective, batch)
        setattr(base, name, orig)
        out.append((up - down) / (2 * step))
    return np.array(out)


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
