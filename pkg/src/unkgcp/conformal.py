"""Inductive conformal prediction intervals for confidence-score predictors.

Two nonconformity measures are supported: the absolute residual
``|M(q) - c|`` and the entropy-normalised residual ``|M(q) - c| / H(M(q))``.
The interval at level ``alpha`` is ``M(q) +/- eps`` with ``eps`` equal to the
``ceil(alpha * (l + 1))``-th smallest calibration score, multiplied by
``H(M(q))`` for the entropy measure, and intersected with [0, 1].
"""
from __future__ import annotations

import hashlib
import math
import os
import struct
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

import numpy as np

from .dataset import TripleSet
from .errors import ConfigError, ContractError, ParseError
from .unkge.model import ModelParams, predict

ARTIFACT_MAGIC = b"UNKGCAL\x00"
ARTIFACT_VERSION = 1
_HEADER = struct.Struct("<8sIB3xdQ32s")


class MeasureKind(str, Enum):
    ABSOLUTE = "absolute"
    ENTROPY = "entropy"


_KIND_CODES = {MeasureKind.ABSOLUTE: 0, MeasureKind.ENTROPY: 1}


@dataclass(frozen=True)
class Measure:
    kind: MeasureKind = MeasureKind.ENTROPY
    delta: float = 1e-6
    log_base: float = math.e

    def __post_init__(self):
        object.__setattr__(self, "kind", MeasureKind(self.kind))
        if not 0.0 < self.delta < 0.5:
            raise ConfigError(f"entropy clamp delta must lie in (0, 0.5), got {self.delta}")

    @classmethod
    def parse(cls, name: str, delta: float = 1e-6) -> "Measure":
        aliases = {"abs": "absolute", "cp": "absolute", "unkgcp": "entropy"}
        return cls(MeasureKind(aliases.get(name, name)), delta)


ABSOLUTE = Measure(MeasureKind.ABSOLUTE)
ENTROPY = Measure(MeasureKind.ENTROPY)


def entropy(p, delta: float = 1e-6, base: float = math.e):
    """Binary entropy of ``p`` after clamping it into ``[delta, 1 - delta]``."""
    p = np.clip(np.asarray(p, dtype=np.float64), delta, 1.0 - delta)
    h = -p * np.log(p) - (1.0 - p) * np.log1p(-p)
    if base != math.e:
        h = h / math.log(base)
    return float(h) if h.ndim == 0 else h


def scale(pred, measure: Measure):
    """Per-query normaliser: 1 for the absolute residual, ``H(pred)`` otherwise."""
    if measure.kind is MeasureKind.ABSOLUTE:
        return np.ones_like(np.asarray(pred, dtype=np.float64)) if np.ndim(pred) else 1.0
    return entropy(pred, measure.delta, measure.log_base)


def scores_from_predictions(pred, c, measure: Measure):
    out = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(c, dtype=np.float64)) / scale(pred, measure)
    return float(out) if np.ndim(out) == 0 else out


def nonconformity(model: ModelParams, triples, measure: Measure):
    """Nonconformity of labelled triple(s); a ``(h, r, t, c)`` tuple or a TripleSet."""
    if isinstance(triples, TripleSet) or hasattr(triples, "c"):
        return scores_from_predictions(predict(model, triples), triples.c, measure)
    h, r, t, c = triples
    return scores_from_predictions(predict(model, h, r, t), c, measure)


@dataclass(frozen=True)
class PredictionInterval:
    lower: float
    upper: float

    def __post_init__(self):
        if self.is_empty:
            return
        if not 0.0 <= self.lower <= self.upper <= 1.0:
            raise ContractError(f"invalid interval [{self.lower}, {self.upper}]")

    @classmethod
    def empty(cls) -> "PredictionInterval":
        return cls(math.nan, math.nan)

    @property
    def is_empty(self) -> bool:
        return math.isnan(self.lower)

    @property
    def length(self) -> float:
        return 0.0 if self.is_empty else self.upper - self.lower

    def __contains__(self, c: float) -> bool:
        return not self.is_empty and self.lower <= c <= self.upper

    def issubset(self, other: "PredictionInterval") -> bool:
        if self.is_empty:
            return True
        return not other.is_empty and other.lower <= self.lower and self.upper <= other.upper


@dataclass(frozen=True)
class CalibrationArtifact:
    scores: np.ndarray
    measure: Measure
    model_fingerprint: str = ""

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 1 or len(s) < 1:
            raise ContractError("calibration artifact needs at least one score")
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise ContractError("calibration scores must be finite and non-negative")
        if np.any(np.diff(s) < 0):
            raise ContractError("calibration scores must be sorted ascending")
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)

    @property
    def size(self) -> int:
        return len(self.scores)

    def subsample(self, idx) -> "CalibrationArtifact":
        return CalibrationArtifact(np.sort(self.scores[idx]), self.measure, self.model_fingerprint)


def calibrate(model: ModelParams, cal: TripleSet, measure: Measure, fingerprint: str | None = None) -> CalibrationArtifact:
    if len(cal) == 0:
        raise ConfigError("calibration set is empty")
    scores = np.sort(scores_from_predictions(predict(model, cal), cal.c, measure))
    fp = model.fingerprint() if fingerprint is None else fingerprint
    return CalibrationArtifact(scores, measure, fp)


def _as_fraction(alpha: float) -> Fraction:
    # the shortest decimal repr is taken as intended: 0.9 means 9/10, which
    # keeps ceil(0.07 * 100) == 7 rather than 8
    return Fraction(repr(float(alpha)))


def quantile_index(alpha: float, n: int) -> int:
    """1-based rank ``k = ceil(alpha * (n + 1))``."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"confidence level must lie in [0, 1], got {alpha}")
    return math.ceil(_as_fraction(alpha) * (n + 1))


def quantile_threshold(artifact: CalibrationArtifact, alpha: float) -> float:
    """``s_(k)``; +inf when ``k > l`` and -inf when ``k == 0`` (alpha = 0)."""
    k = quantile_index(alpha, artifact.size)
    if k > artifact.size:
        return math.inf
    if k == 0:
        return -math.inf
    return float(artifact.scores[k - 1])


def _check_measure(artifact: CalibrationArtifact, measure: Measure | None) -> None:
    if measure is not None and measure != artifact.measure:
        raise ContractError(f"artifact was calibrated with {artifact.measure.kind.value}, "
                            f"not {measure.kind.value}")


def half_widths(pred, artifact: CalibrationArtifact, alpha: float):
    """Unclipped tolerance ``eps`` for each prediction (may be +/-inf)."""
    thr = quantile_threshold(artifact, alpha)
    sc = scale(pred, artifact.measure)
    if math.isinf(thr):
        return np.full(np.shape(pred), thr) if np.ndim(pred) else thr
    return thr * sc


def intervals_from_predictions(pred, artifact: CalibrationArtifact, alpha: float):
    """Vectorised ``(lower, upper)`` arrays; empty intervals are NaN."""
    pred = np.asarray(pred, dtype=np.float64)
    eps = np.asarray(half_widths(pred, artifact, alpha), dtype=np.float64)
    if np.any(eps == -math.inf):
        nan = np.full(pred.shape, np.nan)
        return nan, nan.copy()
    with np.errstate(invalid="ignore"):
        lower = np.maximum(pred - eps, 0.0)
        upper = np.minimum(pred + eps, 1.0)
    return lower, upper


def predict_interval(model: ModelParams, artifact: CalibrationArtifact, q, alpha: float,
                     measure: Measure | None = None) -> PredictionInterval:
    """Interval for one query ``q = (h, r, t)``."""
    _check_measure(artifact, measure)
    pred = predict(model, q)
    lo, hi = intervals_from_predictions(np.array([pred]), artifact, alpha)
    if math.isnan(lo[0]):
        return PredictionInterval.empty()
    return PredictionInterval(float(lo[0]), float(hi[0]))


def predict_intervals(model: ModelParams, artifact: CalibrationArtifact, triples, alpha: float,
                      measure: Measure | None = None):
    """``(point, lower, upper)`` arrays for a batch of queries."""
    _check_measure(artifact, measure)
    pred = predict(model, triples)
    lo, hi = intervals_from_predictions(pred, artifact, alpha)
    return pred, lo, hi


class ConformalPredictor:
    """A frozen model paired with its calibration artifact."""

    def __init__(self, model: ModelParams, artifact: CalibrationArtifact, name: str | None = None,
                 verify: bool = True):
        if verify and artifact.model_fingerprint and artifact.model_fingerprint != model.fingerprint():
            raise ContractError("calibration artifact was produced by a different checkpoint")
        self.model = model
        self.artifact = artifact
        self.name = name or ("UnKGCP" if artifact.measure.kind is MeasureKind.ENTROPY else "CP")

    def point(self, triples):
        return predict(self.model, triples)

    def intervals(self, triples, alpha: float):
        return intervals_from_predictions(predict(self.model, triples), self.artifact, alpha)

    def half_widths(self, triples, alpha: float):
        return half_widths(predict(self.model, triples), self.artifact, alpha)


# --------------------------------------------------------------------------
# artifact files


def artifact_to_bytes(artifact: CalibrationArtifact) -> bytes:
    fp = bytes.fromhex(artifact.model_fingerprint) if artifact.model_fingerprint else b"\x00" * 32
    if len(fp) != 32:
        raise ContractError("model fingerprint must be a SHA-256 hex digest")
    header = _HEADER.pack(ARTIFACT_MAGIC, ARTIFACT_VERSION, _KIND_CODES[artifact.measure.kind],
                          artifact.measure.delta, artifact.size, fp)
    return header + np.ascontiguousarray(artifact.scores, dtype="<f8").tobytes()


def artifact_from_bytes(blob: bytes, expected_fingerprint: str | None = None) -> CalibrationArtifact:
    if len(blob) < _HEADER.size:
        raise ParseError("calibration artifact truncated")
    magic, version, code, delta, n, fp = _HEADER.unpack_from(blob, 0)
    if magic != ARTIFACT_MAGIC:
        raise ParseError("not a calibration artifact (bad magic)")
    if version != ARTIFACT_VERSION:
        raise ParseError(f"unsupported artifact version {version}")
    kind = {v: k for k, v in _KIND_CODES.items()}.get(code)
    if kind is None:
        raise ParseError(f"unknown measure code {code}")
    if len(blob) != _HEADER.size + 8 * n:
        raise ParseError("calibration artifact size does not match its header")
    scores = np.frombuffer(blob, dtype="<f8", count=n, offset=_HEADER.size).astype(np.float64)
    if np.any(np.diff(scores) < 0):
        raise ParseError("calibration scores are not sorted")
    fingerprint = "" if fp == b"\x00" * 32 else fp.hex()
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise ContractError("calibration artifact fingerprint does not match the checkpoint")
    return CalibrationArtifact(scores, Measure(kind, delta), fingerprint)


def save_artifact(path: str | os.PathLike, artifact: CalibrationArtifact) -> None:
    with open(path, "wb") as fh:
        fh.write(artifact_to_bytes(artifact))


def load_artifact(path: str | os.PathLike, expected_fingerprint: str | None = None) -> CalibrationArtifact:
    with open(path, "rb") as fh:
        return artifact_from_bytes(fh.read(), expected_fingerprint)


def file_fingerprint(path: str | os.PathLike) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
