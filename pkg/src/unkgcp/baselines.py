"""Comparison interval predictors: Fisher prediction intervals (FPI) and
pinball-loss quantile regression (QR)."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist
from typing import Callable

import numpy as np

from .conformal import PredictionInterval
from .dataset import SplitDataset, TripleSet
from .errors import ConfigError
from .unkge.model import ModelParams, load_checkpoint, predict, save_checkpoint
from .unkge.objectives import Pinball
from .unkge.train import TrainConfig, train

_BETACF_TOL = 1e-12
_BETACF_MAXITER = 10_000
NORMAL_FALLBACK_DF = 100_000


# --------------------------------------------------------------------------
# Student t


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, _BETACF_MAXITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETACF_TOL:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta function ``I_x(a, b)``."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_cdf(x: float, df: float) -> float:
    if math.isinf(x):
        return 1.0 if x > 0 else 0.0
    tail = 0.5 * betainc(0.5 * df, 0.5, df / (df + x * x))
    return 1.0 - tail if x >= 0 else tail


def t_quantile(p: float, df: float) -> float:
    """Inverse t CDF by bracketed bisection on :func:`t_cdf`.

    The bracket starts at [-50, 50] and is widened for heavy tails (small df).
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if df < 1:
        raise ValueError("df must be >= 1")
    if p == 0.5:
        return 0.0
    if df > NORMAL_FALLBACK_DF:
        return NormalDist().inv_cdf(p)
    if p < 0.5:
        return -t_quantile(1.0 - p, df)
    lo, hi = 0.0, 50.0
    while t_cdf(hi, df) < p:
        lo, hi = hi, hi * 2.0
        if hi > 1e300:
            return math.inf
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, df) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


# --------------------------------------------------------------------------
# FPI


@dataclass(frozen=True)
class FpiStats:
    mean: float
    var: float
    n: int

    def __post_init__(self):
        if self.var < 0 or self.n < 2:
            raise ConfigError("FPI needs var >= 0 and at least two calibration points")

    @property
    def std(self) -> float:
        return math.sqrt(self.var)


def fpi_fit(cal) -> FpiStats:
    """Mean and unbiased variance of the calibration ground-truth scores."""
    c = np.asarray(cal.c if hasattr(cal, "c") else cal, dtype=np.float64)
    if len(c) < 2:
        raise ConfigError("FPI needs at least two calibration triples")
    return FpiStats(float(c.mean()), float(c.var(ddof=1)), len(c))


def fpi_half_width(stats: FpiStats, alpha: float, quantile_level: float | None = None) -> float:
    """``|t_{l-1}(level)| * s * sqrt(l / (l - 1))``.

    ``quantile_level`` defaults to ``(1 - alpha) / 2``; by symmetry of the t
    distribution its magnitude equals that of the ``(1 + alpha) / 2`` quantile.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    level = (1.0 - alpha) / 2.0 if quantile_level is None else quantile_level
    if level <= 0.0 or level >= 1.0:
        return math.inf
    t = abs(t_quantile(level, stats.n - 1))
    return t * stats.std * math.sqrt(stats.n / (stats.n - 1))


def fpi_interval(stats: FpiStats, alpha: float, quantile_level: float | None = None) -> PredictionInterval:
    eps = fpi_half_width(stats, alpha, quantile_level)
    lo = min(max(stats.mean - eps, 0.0), 1.0)
    hi = max(min(stats.mean + eps, 1.0), 0.0)
    return PredictionInterval(lo, hi)


class FpiPredictor:
    name = "FPI"

    def __init__(self, stats: FpiStats, quantile_level: float | None = None):
        self.stats = stats
        self.quantile_level = quantile_level

    def intervals(self, triples, alpha: float):
        iv = fpi_interval(self.stats, alpha, self.quantile_level)
        n = len(triples)
        return np.full(n, iv.lower), np.full(n, iv.upper)


# --------------------------------------------------------------------------
# QR


def qr_taus(alpha: float) -> tuple[float, float]:
    lower = (1.0 - alpha) / 2.0
    return lower, 1.0 - lower


@dataclass
class QrPair:
    lower_model: ModelParams
    upper_model: ModelParams
    alpha: float

    def __post_init__(self):
        a, b = self.lower_model, self.upper_model
        if (a.n_entities, a.n_relations) != (b.n_entities, b.n_relations):
            raise ConfigError("quantile models disagree on vocabulary size")

    @property
    def taus(self) -> tuple[float, float]:
        return qr_taus(self.alpha)


def qr_fit(data: SplitDataset, cfg: TrainConfig, alpha: float) -> QrPair:
    """Train lower/upper pinball models on the proper training split."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError("QR needs alpha in (0, 1)")
    tau_lo, tau_hi = qr_taus(alpha)
    return QrPair(train(data, cfg, Pinball(tau_lo)), train(data, cfg, Pinball(tau_hi)), alpha)


def qr_intervals(pair: QrPair, triples) -> tuple[np.ndarray, np.ndarray, int]:
    """Vectorised ``(lower, upper, n_crossed)``; crossed pairs collapse to their midpoint."""
    lo = np.clip(np.atleast_1d(predict(pair.lower_model, triples)), 0.0, 1.0)
    hi = np.clip(np.atleast_1d(predict(pair.upper_model, triples)), 0.0, 1.0)
    crossed = lo > hi
    mid = 0.5 * (lo + hi)
    return np.where(crossed, mid, lo), np.where(crossed, mid, hi), int(crossed.sum())


def qr_interval(pair: QrPair, q) -> PredictionInterval:
    lo, hi, _ = qr_intervals(pair, q)
    return PredictionInterval(float(lo[0]), float(hi[0]))


class QrPredictor:
    """QR baseline over several confidence levels; pairs are fitted lazily per alpha."""

    name = "QR"

    def __init__(self, fit_fn: Callable[[float], QrPair] | None = None, pairs: dict[float, QrPair] | None = None):
        self.fit_fn = fit_fn
        self.pairs = dict(pairs or {})
        self.crossings: dict[float, int] = {}

    def pair(self, alpha: float) -> QrPair:
        if alpha not in self.pairs:
            if self.fit_fn is None:
                raise ConfigError(f"no QR pair fitted for alpha={alpha}")
            self.pairs[alpha] = self.fit_fn(alpha)
        return self.pairs[alpha]

    def intervals(self, triples, alpha: float):
        lo, hi, crossed = qr_intervals(self.pair(alpha), triples)
        self.crossings[alpha] = crossed
        return lo, hi


def save_qr_pair(directory: str | os.PathLike, pair: QrPair) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    fp_lo = save_checkpoint(d / "lower.ckpt", pair.lower_model)
    fp_hi = save_checkpoint(d / "upper.ckpt", pair.upper_model)
    tau_lo, tau_hi = pair.taus
    manifest = {"alpha": pair.alpha, "tau_lower": tau_lo, "tau_upper": tau_hi,
                "lower_fingerprint": fp_lo, "upper_fingerprint": fp_hi}
    (d / "qr.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_qr_pair(directory: str | os.PathLike) -> QrPair:
    d = Path(directory)
    manifest = json.loads((d / "qr.json").read_text(encoding="utf-8"))
    return QrPair(load_checkpoint(d / "lower.ckpt"), load_checkpoint(d / "upper.ckpt"), float(manifest["alpha"]))
