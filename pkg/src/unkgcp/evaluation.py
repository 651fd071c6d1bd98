"""Coverage/sharpness metrics, conditionality bins, sweeps over confidence
level and calibration size, shift detection, and CSV / JSON-lines reports."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import spearmanr

from .baselines import FpiPredictor, QrPredictor, fpi_fit, qr_fit
from .conformal import ABSOLUTE, ENTROPY, ConformalPredictor, Measure, PredictionInterval, calibrate, \
    intervals_from_predictions, scores_from_predictions
from .dataset import SplitDataset, TripleSet, corrupt_negatives, split
from .errors import ConfigError, ContractError
from .seeding import derive_seed, rng_for
from .unkge.model import ModelParams, predict
from .unkge.train import TrainConfig, fit, train_semi

DEFAULT_ALPHAS = (0.80, 0.85, 0.90, 0.95)
REPORT_COLUMNS = ("predictor", "backbone", "dataset", "alpha", "trial", "coverage", "sharpness")
BIN_COLUMNS = ("bin_lo", "bin_hi", "mean_len", "count")
CALIB_COLUMNS = ("size", "cov_mean", "cov_std", "sharp_mean", "sharp_std")


# --------------------------------------------------------------------------
# metrics


def _bounds(intervals) -> tuple[np.ndarray, np.ndarray]:
    """Accept ``(lower, upper)`` arrays or a sequence of PredictionInterval."""
    if isinstance(intervals, tuple) and len(intervals) == 2 and np.ndim(intervals[0]) == 1:
        return np.asarray(intervals[0], dtype=np.float64), np.asarray(intervals[1], dtype=np.float64)
    lo = np.array([iv.lower for iv in intervals], dtype=np.float64)
    hi = np.array([iv.upper for iv in intervals], dtype=np.float64)
    return lo, hi


def interval_lengths(lower, upper) -> np.ndarray:
    """Interval lengths with empty (NaN) intervals counted as 0."""
    length = np.asarray(upper, dtype=np.float64) - np.asarray(lower, dtype=np.float64)
    return np.where(np.isnan(length), 0.0, length)


def covered(lower, upper, truths) -> np.ndarray:
    truths = np.asarray(truths, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return (np.asarray(lower) <= truths) & (truths <= np.asarray(upper))


def coverage(intervals, truths) -> float:
    """Fraction of truths inside their (closed) interval."""
    lo, hi = _bounds(intervals)
    truths = np.asarray(truths, dtype=np.float64)
    if len(lo) != len(truths):
        raise ContractError(f"{len(lo)} intervals but {len(truths)} truths")
    if len(lo) == 0:
        raise ContractError("coverage of an empty test set is undefined")
    return float(np.mean(covered(lo, hi, truths)))


def sharpness(intervals) -> float:
    """Mean interval length."""
    lo, hi = _bounds(intervals)
    if len(lo) == 0:
        raise ContractError("sharpness of an empty test set is undefined")
    return float(np.mean(interval_lengths(lo, hi)))


def point_metrics(pred, truths) -> dict[str, float]:
    err = np.asarray(pred, dtype=np.float64) - np.asarray(truths, dtype=np.float64)
    return {"mse": float(np.mean(err ** 2)), "mae": float(np.mean(np.abs(err)))}


@dataclass
class EvalReport:
    alpha: float
    coverage: float
    sharpness: float
    n_test: int
    predictor_id: str
    trial_seed: int = 0
    backbone: str = ""
    dataset: str = ""
    trial: int = 0

    def __post_init__(self):
        if not (0.0 <= self.coverage <= 1.0 and 0.0 <= self.sharpness <= 1.0):
            raise ContractError("coverage and sharpness must lie in [0, 1]")

    def row(self) -> dict:
        return {"predictor": self.predictor_id, "backbone": self.backbone, "dataset": self.dataset,
                "alpha": self.alpha, "trial": self.trial, "coverage": self.coverage,
                "sharpness": self.sharpness}


def evaluate_predictor(predictor, test: TripleSet, alpha: float, **meta) -> EvalReport:
    lo, hi = predictor.intervals(test, alpha)
    return EvalReport(alpha, coverage((lo, hi), test.c), sharpness((lo, hi)), len(test), predictor.name, **meta)


# --------------------------------------------------------------------------
# conditionality


@dataclass
class ConditionalityBins:
    edges: np.ndarray
    mean_len: np.ndarray
    mean_err: np.ndarray
    count: np.ndarray
    covered_only: bool = True

    @property
    def n_bins(self) -> int:
        return len(self.count)

    def rows(self) -> list[dict]:
        return [{"bin_lo": float(self.edges[i]), "bin_hi": float(self.edges[i + 1]),
                 "mean_len": float(self.mean_len[i]), "count": int(self.count[i])}
                for i in range(self.n_bins)]

    def populated(self) -> np.ndarray:
        return self.count > 0

    def spearman(self) -> float:
        """Rank correlation of bin mean error and bin mean length over populated bins."""
        mask = self.populated()
        if mask.sum() < 2:
            return math.nan
        return float(spearmanr(self.mean_err[mask], self.mean_len[mask]).statistic)


def conditionality_bins(abs_errors, interval_lengths_, covered_flags=None, n_bins: int = 30,
                        covered_only: bool = True) -> ConditionalityBins:
    """Bin points by absolute prediction error into equal-width bins.

    Only covered points enter when ``covered_only``; the bin range spans the
    errors of the points that enter. Empty bins are kept with count 0 and
    NaN mean length.
    """
    if n_bins < 2:
        raise ConfigError("n_bins must be >= 2")
    err = np.asarray(abs_errors, dtype=np.float64)
    length = np.asarray(interval_lengths_, dtype=np.float64)
    if len(err) != len(length):
        raise ContractError("errors and lengths differ in length")
    if covered_only:
        if covered_flags is None:
            raise ContractError("covered_flags required when covered_only")
        flags = np.asarray(covered_flags, dtype=bool)
        err, length = err[flags], length[flags]
    if len(err) == 0:
        edges = np.zeros(n_bins + 1)
        empty = np.full(n_bins, np.nan)
        return ConditionalityBins(edges, empty, empty.copy(), np.zeros(n_bins, int), covered_only)
    lo, hi = float(err.min()), float(err.max())
    edges = np.linspace(lo, hi, n_bins + 1)
    if hi > lo:
        idx = np.clip(np.searchsorted(edges, err, side="right") - 1, 0, n_bins - 1)
    else:
        idx = np.zeros(len(err), dtype=int)
    count = np.bincount(idx, minlength=n_bins)
    return ConditionalityBins(edges, _bin_means(idx, length, count), _bin_means(idx, err, count), count, covered_only)


def _bin_means(idx: np.ndarray, values: np.ndarray, count: np.ndarray) -> np.ndarray:
    # shifted by each bin's first value, so a bin of identical values has that value as its exact mean
    ref = np.zeros(len(count))
    first = np.unique(idx, return_index=True)
    ref[first[0]] = values[first[1]]
    dev = np.bincount(idx, weights=values - ref[idx], minlength=len(count))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, ref + dev / count, np.nan)


def predictor_bins(predictor: ConformalPredictor, test: TripleSet, alpha: float, n_bins: int = 30,
                   clipped: bool = True) -> ConditionalityBins:
    """Conditionality bins for a conformal predictor on ``test``.

    With ``clipped=False`` lengths are the raw ``2 * eps`` before
    intersecting with [0, 1].
    """
    pred = predictor.point(test)
    lo, hi = intervals_from_predictions(pred, predictor.artifact, alpha)
    lengths = interval_lengths(lo, hi) if clipped else 2.0 * np.asarray(predictor.half_widths(test, alpha))
    return conditionality_bins(np.abs(pred - test.c), lengths, covered(lo, hi, test.c), n_bins)


# --------------------------------------------------------------------------
# sweeps


def confidence_sweep(predictors: Sequence, test: TripleSet, alphas: Sequence[float] = DEFAULT_ALPHAS,
                     **meta) -> list[EvalReport]:
    alphas = list(alphas)
    if alphas != sorted(alphas):
        raise ConfigError("alphas must be sorted ascending")
    return [evaluate_predictor(p, test, a, **meta) for p in predictors for a in alphas]


def calib_sizes(full: int, start: int = 10) -> list[int]:
    if full <= start:
        raise ConfigError(f"calibration set ({full}) must be larger than the start size ({start})")
    sizes = []
    s = start
    while s < full:
        sizes.append(s)
        s *= 2
    sizes.append(full)
    return sizes


@dataclass
class CalibSweepRow:
    size: int
    cov_mean: float
    cov_std: float
    sharp_mean: float
    sharp_std: float

    def row(self) -> dict:
        return asdict(self)


def calib_size_sweep(model: ModelParams, cal: TripleSet, test: TripleSet, measure: Measure = ENTROPY,
                     alpha: float = 0.9, start: int = 10, repeats: int = 10, seed: int = 0) -> list[CalibSweepRow]:
    """Coverage/sharpness over random calibration subsets of doubling size."""
    from .conformal import CalibrationArtifact

    cal_scores = scores_from_predictions(predict(model, cal), cal.c, measure)
    test_pred = predict(model, test)
    out = []
    for size in calib_sizes(len(cal), start):
        covs, sharps = [], []
        for rep in range(repeats):
            idx = rng_for(seed, "calib-sweep", size, rep).choice(len(cal), size=size, replace=False)
            art = CalibrationArtifact(np.sort(cal_scores[idx]), measure)
            lo, hi = intervals_from_predictions(test_pred, art, alpha)
            covs.append(coverage((lo, hi), test.c))
            sharps.append(sharpness((lo, hi)))
        out.append(CalibSweepRow(size, float(np.mean(covs)), float(np.std(covs)),
                                 float(np.mean(sharps)), float(np.std(sharps))))
    return out


# --------------------------------------------------------------------------
# shift detection


@dataclass(frozen=True)
class ShiftResult:
    flagged: bool
    gap: float


def shift_detect(report: EvalReport, tol: float = 0.05) -> ShiftResult:
    """Flag when empirical coverage falls short of the target by more than ``tol``."""
    gap = report.alpha - report.coverage
    return ShiftResult(gap > tol, gap)


def negative_test_set(data: SplitDataset, seed: int, per_positive: int = 1) -> TripleSet:
    """Corrupted test triples with ground truth 0."""
    return corrupt_negatives(data.test, data.n_entities, per_positive, seed, known=data.all_triples())


# --------------------------------------------------------------------------
# report emission


def _render(value):
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".6g")
    if isinstance(value, (np.integer,)):
        return int(value)
    return value


def _as_row(obj) -> dict:
    if isinstance(obj, dict):
        return obj
    if hasattr(obj, "row"):
        return obj.row()
    if is_dataclass(obj):
        return asdict(obj)
    raise TypeError(f"cannot render {type(obj).__name__} as a report row")


def emit_report(rows: Iterable, fmt: str = "csv", columns: Sequence[str] | None = None) -> bytes:
    """Serialise rows to CSV (with header) or JSON lines, floats at 6 significant digits."""
    rows = [_as_row(r) for r in rows]
    if columns is None:
        if not rows:
            raise ConfigError("columns are required to emit an empty table")
        columns = list(rows[0].keys())
    columns = list(columns)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_render(r.get(c, "")) for c in columns])
        return buf.getvalue().encode("utf-8")
    if fmt in ("jsonl", "json-lines"):
        lines = []
        for r in rows:
            rendered = {}
            for c in columns:
                v = r.get(c)
                rendered[c] = float(_render(v)) if isinstance(v, (float, np.floating)) and math.isfinite(v) else _render(v)
            lines.append(json.dumps(rendered))
        return ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")
    raise ConfigError(f"unknown report format {fmt!r}")


# --------------------------------------------------------------------------
# multi-trial protocol


BACKBONES = ("ukge-logi", "ukge-rect", "passleaf")


@dataclass
class ExperimentConfig:
    backbone: str = "ukge-logi"
    train: TrainConfig = field(default_factory=TrainConfig)
    alphas: tuple[float, ...] = (0.9,)
    trials: int = 1
    master_seed: int = 0
    dataset_name: str = ""
    include_fpi: bool = True
    include_qr: bool = False
    n_bins: int = 30
    shift_tol: float = 0.05

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; choose from {', '.join(BACKBONES)}")
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ConfigError("alphas must lie in [0, 1]")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")


@dataclass
class TrialOutcome:
    trial: int
    split_seed: int
    model: ModelParams
    data: SplitDataset
    point: dict[str, float]
    positive: list[EvalReport]
    negative: list[EvalReport]
    bins: dict[str, ConditionalityBins]
    qr_crossings: dict[float, int] = field(default_factory=dict)


def backbone_config(backbone: str, cfg: TrainConfig) -> TrainConfig:
    from dataclasses import replace

    from .unkge.model import Mapping

    mapping = Mapping.RECT if backbone == "ukge-rect" else Mapping.LOGI
    return replace(cfg, mapping=mapping)


def train_backbone(data: SplitDataset, backbone: str, cfg: TrainConfig):
    cfg = backbone_config(backbone, cfg)
    if backbone == "passleaf":
        if cfg.semi is None:
            from dataclasses import replace

            from .unkge.train import SemiConfig

            cfg = replace(cfg, semi=SemiConfig())
        return fit(data, cfg, semi=True)
    return fit(data, cfg)


def build_predictors(exp: ExperimentConfig, data: SplitDataset, model: ModelParams, cfg: TrainConfig) -> list:
    fp = model.fingerprint()
    preds = [ConformalPredictor(model, calibrate(model, data.cal, ENTROPY, fp), verify=False),
             ConformalPredictor(model, calibrate(model, data.cal, ABSOLUTE, fp), verify=False)]
    if exp.include_fpi:
        preds.append(FpiPredictor(fpi_fit(data.cal)))
    if exp.include_qr and exp.backbone != "passleaf":
        qr_cfg = backbone_config(exp.backbone, cfg)
        preds.append(QrPredictor(lambda a: qr_fit(data, qr_cfg, a)))
    return preds


def run_trial(exp: ExperimentConfig, base: SplitDataset, trial: int) -> TrialOutcome:
    if trial == 0:
        data = base
    else:
        seed = derive_seed(exp.master_seed, "split", trial)
        data = split(base.all_triples(), base.ratios, seed, vocab=base.vocab)
    cfg = TrainConfig(**{**{f.name: getattr(exp.train, f.name) for f in fields(TrainConfig)},
                         "seed": derive_seed(exp.master_seed, "train", trial)})
    result = train_backbone(data, exp.backbone, cfg)
    model = result.params
    predictors = build_predictors(exp, data, model, cfg)
    neg_test = negative_test_set(data, derive_seed(exp.master_seed, "test-negatives", trial))
    meta = dict(backbone=exp.backbone, dataset=exp.dataset_name, trial=trial, trial_seed=data.split_seed)
    pos = confidence_sweep(predictors, data.test, sorted(exp.alphas), **meta)
    neg = confidence_sweep(predictors, neg_test, sorted(exp.alphas), **meta)
    alpha_bins = 0.9 if 0.9 in exp.alphas else sorted(exp.alphas)[-1]
    bins = {p.name: predictor_bins(p, data.test, alpha_bins, exp.n_bins)
            for p in predictors if isinstance(p, ConformalPredictor)}
    crossings = next((p.crossings for p in predictors if isinstance(p, QrPredictor)), {})
    return TrialOutcome(trial, data.split_seed, model, data, point_metrics(predict(model, data.test), data.test.c),
                        pos, neg, bins, crossings)


def run_trials(exp: ExperimentConfig, base: SplitDataset) -> list[TrialOutcome]:
    return [run_trial(exp, base, i) for i in range(exp.trials)]
