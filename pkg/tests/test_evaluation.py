import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unkgcp.conformal import ABSOLUTE, ENTROPY, ConformalPredictor, PredictionInterval, calibrate
from unkgcp.errors import ConfigError, ContractError
from unkgcp.evaluation import (
    CALIB_COLUMNS,
    REPORT_COLUMNS,
    EvalReport,
    ExperimentConfig,
    calib_size_sweep,
    calib_sizes,
    conditionality_bins,
    confidence_sweep,
    coverage,
    emit_report,
    negative_test_set,
    predictor_bins,
    run_trials,
    sharpness,
    shift_detect,
)
from unkgcp.unkge import TrainConfig


class TestMetrics:
    def test_full_intervals(self):
        assert coverage([PredictionInterval(0, 1)] * 3, [0.1, 0.5, 1.0]) == 1.0
        assert sharpness([PredictionInterval(0, 1)] * 3) == 1.0

    def test_point_intervals(self):
        truths = [0.2, 0.7]
        ivs = [PredictionInterval(c, c) for c in truths]
        assert coverage(ivs, truths) == 1.0 and sharpness(ivs) == 0.0

    def test_count(self):
        assert coverage([PredictionInterval(0, 0.5), PredictionInterval(0.6, 1)], [0.7, 0.7]) == 0.5

    def test_sharpness_mean(self):
        assert sharpness([PredictionInterval(0.2, 0.4), PredictionInterval(0.1, 0.7)]) == pytest.approx(0.4)

    def test_arrays_and_empty_intervals(self):
        lo = np.array([0.1, np.nan])
        hi = np.array([0.3, np.nan])
        assert coverage((lo, hi), [0.2, 0.2]) == 0.5
        assert sharpness((lo, hi)) == pytest.approx(0.1)

    def test_mismatch(self):
        with pytest.raises(ContractError):
            coverage([PredictionInterval(0, 1)], [0.1, 0.2])
        with pytest.raises(ContractError):
            sharpness([])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 50), st.integers(0, 2**31))
    def test_permutation_invariant(self, n, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random(n), rng.random(n)
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        c = rng.random(n)
        perm = rng.permutation(n)
        assert coverage((lo, hi), c) == coverage((lo[perm], hi[perm]), c[perm])
        assert sharpness((lo, hi)) == pytest.approx(sharpness((lo[perm], hi[perm])))


class TestBins:
    def test_identical_errors(self):
        b = conditionality_bins(np.full(10, 0.2), np.full(10, 0.3), np.ones(10, bool))
        assert b.populated().sum() == 1 and b.count.sum() == 10

    def test_constant_lengths(self):
        rng = np.random.default_rng(0)
        b = conditionality_bins(rng.random(500), np.full(500, 0.25), rng.random(500) < 0.9)
        assert np.all(b.mean_len[b.populated()] == 0.25)

    def test_counts_and_edges(self):
        rng = np.random.default_rng(1)
        err = rng.exponential(0.1, 300)
        flags = rng.random(300) < 0.8
        b = conditionality_bins(err, rng.random(300), flags, n_bins=30)
        assert b.count.sum() == flags.sum() and b.n_bins == 30
        assert np.all(np.diff(b.edges) >= 0)
        assert b.edges[0] == err[flags].min() and b.edges[-1] == err[flags].max()
        empty = ~b.populated()
        assert np.all(b.count[empty] == 0)
        assert [r["count"] for r in b.rows()] == b.count.tolist()

    def test_monotone_lengths_give_positive_rank_correlation(self):
        err = np.linspace(0, 1, 200)
        b = conditionality_bins(err, 0.1 + err, np.ones(200, bool), n_bins=10)
        assert b.spearman() == pytest.approx(1.0)

    def test_precondition(self):
        with pytest.raises(ConfigError):
            conditionality_bins([0.1], [0.1], [True], n_bins=1)
        with pytest.raises(ContractError):
            conditionality_bins([0.1, 0.2], [0.1], [True, True])


class TestSweeps:
    def test_confidence_sweep_shape_and_monotone(self, planted):
        d, m = planted.data, planted.model
        preds = [ConformalPredictor(m, calibrate(m, d.cal, ENTROPY)), ConformalPredictor(m, calibrate(m, d.cal, ABSOLUTE))]
        rows = confidence_sweep(preds, d.test)
        assert len(rows) == 8
        for name in ("UnKGCP", "CP"):
            mine = [r for r in rows if r.predictor_id == name]
            assert [r.alpha for r in mine] == [0.80, 0.85, 0.90, 0.95]
            assert all(a.sharpness <= b.sharpness for a, b in zip(mine, mine[1:]))
            assert mine[-1].coverage >= mine[0].coverage

    def test_alphas_sorted(self, planted):
        with pytest.raises(ConfigError):
            confidence_sweep([], planted.data.test, [0.9, 0.8])

    def test_sizes(self):
        assert calib_sizes(100) == [10, 20, 40, 80, 100]
        assert calib_sizes(80) == [10, 20, 40, 80]
        with pytest.raises(ConfigError):
            calib_sizes(10)

    def test_calib_sweep(self, planted):
        d, m = planted.data, planted.model
        rows = calib_size_sweep(m, d.cal, d.test, ENTROPY, 0.9, repeats=10, seed=4)
        assert [r.size for r in rows] == calib_sizes(len(d.cal))
        assert rows[-1].cov_std == 0.0 and rows[-1].sharp_std == 0.0
        assert rows[0].cov_std > rows[-1].cov_std
        again = calib_size_sweep(m, d.cal, d.test, ENTROPY, 0.9, repeats=10, seed=4)
        assert emit_report(rows, columns=CALIB_COLUMNS) == emit_report(again, columns=CALIB_COLUMNS)


class TestShift:
    def test_no_flag(self):
        s = shift_detect(EvalReport(0.9, 0.9, 0.3, 10, "UnKGCP"))
        assert not s.flagged and s.gap == pytest.approx(0.0)

    def test_flag(self):
        s = shift_detect(EvalReport(0.9, 0.75, 0.3, 10, "UnKGCP"), tol=0.05)
        assert s.flagged and s.gap == pytest.approx(0.15)

    def test_negative_set(self, planted):
        neg = negative_test_set(planted.data, seed=0)
        assert len(neg) == len(planted.data.test) and np.all(neg.c == 0)

    def test_report_range(self):
        with pytest.raises(ContractError):
            EvalReport(0.9, 1.2, 0.3, 10, "x")


class TestEmit:
    ROWS = [EvalReport(0.9, 0.912345678, 0.2, 100, "UnKGCP", backbone="ukge-logi", dataset="d"),
            EvalReport(0.95, 0.96, 0.31, 100, "CP", backbone="ukge-logi", dataset="d")]

    def test_header_only(self):
        assert emit_report([], "csv", REPORT_COLUMNS).decode() == ",".join(REPORT_COLUMNS) + "\n"

    def test_csv_roundtrip(self):
        blob = emit_report(self.ROWS, "csv", REPORT_COLUMNS)
        parsed = list(csv.DictReader(io.StringIO(blob.decode())))
        assert list(parsed[0].keys()) == list(REPORT_COLUMNS)
        assert float(parsed[0]["coverage"]) == pytest.approx(0.912345678, rel=1e-6)
        assert parsed[0]["coverage"] == "0.912346"

    def test_jsonl(self):
        lines = emit_report(self.ROWS, "jsonl", REPORT_COLUMNS).decode().splitlines()
        assert len(lines) == 2 and json.loads(lines[1])["predictor"] == "CP"

    def test_deterministic(self):
        assert emit_report(self.ROWS) == emit_report(self.ROWS)

    def test_bad_format(self):
        with pytest.raises(ConfigError):
            emit_report(self.ROWS, "xml")


class TestTrials:
    CFG = TrainConfig(learning_rate=0.02, dim=8, batch_size=128, neg_per_pos=1, patience=5, max_epochs=15,
                      neg_weight=0.001, early_stop="pos")

    def _data(self):
        from unkgcp.dataset import split
        from unkgcp.testbed import generate_planted

        return split(generate_planted(60, 2, 4, 3000, seed=0)[1], seed=1)

    def test_trials_resplit_and_repeat(self):
        exp = ExperimentConfig(train=self.CFG, alphas=(0.8, 0.9), trials=2, master_seed=5)
        data = self._data()
        a = run_trials(exp, data)
        b = run_trials(exp, data)
        assert [o.split_seed for o in a] == [o.split_seed for o in b]
        assert a[0].split_seed == data.split_seed and a[1].split_seed != data.split_seed
        assert len(a[0].positive) == 3 * 2 and len(a[0].negative) == 3 * 2
        assert [r.coverage for o in a for r in o.positive] == [r.coverage for o in b for r in o.positive]
        assert set(a[0].bins) == {"UnKGCP", "CP"}

    def test_passleaf_backbone(self):
        from dataclasses import replace

        from unkgcp.unkge import SemiConfig

        cfg = replace(self.CFG, semi=SemiConfig(t_new_semi=2, t_semi_train=5, pool_size=500))
        out = run_trials(ExperimentConfig(backbone="passleaf", train=cfg), self._data())
        assert out[0].positive[0].predictor_id == "UnKGCP"

    def test_bad_backbone(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(backbone="beurre")

    def test_unclipped_absolute_bins_constant(self, planted):
        d, m = planted.data, planted.model
        b = predictor_bins(ConformalPredictor(m, calibrate(m, d.cal, ABSOLUTE)), d.test, 0.9, clipped=False)
        vals = b.mean_len[b.populated()]
        assert np.all(vals == vals[0])
