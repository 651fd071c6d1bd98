import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unkgcp.dataset import (
    PRESETS,
    NEG_RETRY_LIMIT,
    Identity,
    LogCapMinMax,
    MinMaxTo,
    RawTriple,
    TripleSet,
    WeightedTriple,
    corrupt_negatives,
    encode,
    holdout,
    load_split,
    normalize_scores,
    parse_tsv,
    save_split,
    scheme_from_dict,
    split,
    split_sizes,
)
from unkgcp.errors import ConfigError, DegenerateRangeError, ParseError


def raws(scores):
    return [RawTriple(f"h{i}", "r", f"t{i}", s) for i, s in enumerate(scores)]


class TestParse:
    def test_single_line(self):
        assert parse_tsv(b"a\trel\tb\t0.7\n") == [RawTriple("a", "rel", "b", 0.7)]

    def test_empty(self):
        assert parse_tsv(b"") == []

    def test_nan_rejected_with_line(self):
        with pytest.raises(ParseError) as exc:
            parse_tsv("a\trel\tb\tNaN")
        assert exc.value.line == 1

    def test_malformed_line_number(self):
        with pytest.raises(ParseError, match="line 3"):
            parse_tsv("a\tr\tb\t0.1\n\nbad line\n")

    def test_bad_number(self):
        with pytest.raises(ParseError):
            parse_tsv("a\tr\tb\tx\n")

    def test_order_and_file_objects(self):
        text = "a\tr\tb\t0.1\nc\tr\td\t0.2\n"
        assert parse_tsv(io.BytesIO(text.encode())) == parse_tsv(io.StringIO(text))
        assert [t.head for t in parse_tsv(text)] == ["a", "c"]

    def test_empty_label(self):
        with pytest.raises(ParseError):
            parse_tsv("\tr\tb\t0.1\n")


class TestNormalize:
    def test_cn15k_cap_maps_to_upper(self):
        out = normalize_scores(raws([0.5, 1.0, 3.0, 7.0]), PRESETS["cn15k"])
        assert out[2].score == pytest.approx(1.0)
        assert out[3].score == pytest.approx(1.0)
        assert out[0].score == pytest.approx(0.5)

    def test_cn15k_log_oracle(self):
        # independent evaluation: log then min-max into [0.5, 1]
        raw = [0.5, 1.0, 2.0]
        logs = [math.log(x) for x in raw]
        want = [0.5 + 0.5 * (v - logs[0]) / (logs[-1] - logs[0]) for v in logs]
        got = [t.score for t in normalize_scores(raws(raw), LogCapMinMax(3.0, 0.5, 1.0))]
        assert got == pytest.approx(want)

    def test_nl27k_min_to_lower(self):
        out = normalize_scores(raws([0.3, 0.8, 0.5]), PRESETS["nl27k"])
        assert out[0].score == pytest.approx(0.1)
        assert out[1].score == pytest.approx(1.0)

    def test_minmax_midpoint(self):
        out = normalize_scores(raws([0.1, 0.5, 0.9]), MinMaxTo(0.1, 1.0))
        assert out[1].score == pytest.approx(0.55)

    def test_identity(self):
        raw = raws([0.2, 0.9])
        assert normalize_scores(raw, Identity()) == raw

    def test_degenerate(self):
        with pytest.raises(DegenerateRangeError):
            normalize_scores(raws([0.4, 0.4]), MinMaxTo(0.1, 1.0))

    def test_log_requires_positive(self):
        with pytest.raises(ValueError):
            normalize_scores(raws([0.0, 1.0]), LogCapMinMax())

    def test_scheme_dict_roundtrip(self):
        for s in (Identity(), MinMaxTo(0.1, 1.0), LogCapMinMax(3.0, 0.5, 1.0)):
            assert scheme_from_dict(s.to_dict()) == s

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0.01, 100.0), min_size=2, max_size=30).filter(lambda v: max(v) > min(v)),
           st.sampled_from([MinMaxTo(0.1, 1.0), LogCapMinMax(3.0, 0.5, 1.0), MinMaxTo(0.0, 1.0)]))
    def test_monotone_and_bounded(self, values, scheme):
        if isinstance(scheme, LogCapMinMax) and min(values) >= scheme.cap:
            return
        out = [t.score for t in normalize_scores(raws(values), scheme)]
        assert all(0.0 <= v <= 1.0 for v in out)
        order = np.argsort(values, kind="stable")
        assert np.all(np.diff(np.array(out)[order]) >= -1e-12)


class TestEncode:
    def test_first_occurrence(self):
        vocab, ts = encode([RawTriple("a", "r1", "b", 0.7)])
        assert vocab.entities == {"a": 0, "b": 1} and vocab.relations == {"r1": 0}
        assert ts[0] == WeightedTriple(0, 0, 1, 0.7)

    def test_self_loop(self):
        _, ts = encode([RawTriple("a", "r1", "a", 0.2)])
        assert ts[0] == WeightedTriple(0, 0, 0, 0.2)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            encode([RawTriple("a", "r1", "b", 1.3)])

    def test_weighted_triple_checks_score(self):
        with pytest.raises(ValueError):
            WeightedTriple(0, 0, 0, -0.1)


def _triples(n, n_ent=20, seed=0):
    rng = np.random.default_rng(seed)
    return TripleSet(rng.integers(0, n_ent, n), rng.integers(0, 3, n), rng.integers(0, n_ent, n), rng.random(n))


class TestSplit:
    def test_sizes_default_ratios(self):
        assert split_sizes(100, (0.85, 0.07, 0.08)) == (85, 7, 8)

    def test_remainder_to_train(self):
        assert split_sizes(101, (0.85, 0.07, 0.08)) == (86, 7, 8)

    def test_deterministic(self):
        ts = _triples(3)
        a = split(ts, (1 / 3, 1 / 3, 1 / 3), seed=5)
        b = split(ts, (1 / 3, 1 / 3, 1 / 3), seed=5)
        assert a.train == b.train and a.cal == b.cal and a.test == b.test

    def test_degenerate(self):
        with pytest.raises(ConfigError):
            split(_triples(10), (0.98, 0.01, 0.01))

    def test_ratio_sum(self):
        with pytest.raises(ConfigError):
            split_sizes(100, (0.5, 0.2, 0.2))

    @given(st.integers(30, 400), st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_partition(self, n, seed):
        ts = _triples(n, seed=seed)
        ts = ts.with_scores(np.arange(n) / n)  # unique tags
        d = split(ts, seed=seed)
        tags = np.concatenate([d.train.c, d.cal.c, d.test.c])
        assert sorted(tags.tolist()) == sorted(ts.c.tolist())

    def test_holdout(self):
        ts = _triples(200)
        rest, held = holdout(ts, 0.05, 1)
        assert len(held) == 10 and len(rest) == 190


class TestNegatives:
    def test_length_and_scores(self):
        pos = _triples(50)
        neg = corrupt_negatives(pos, 20, 10, seed=0)
        assert len(neg) == 500
        assert np.all(neg.c == 0.0)

    def test_replaced_entity_differs(self):
        pos = _triples(1000, n_ent=5, seed=3)
        neg = corrupt_negatives(pos, 5, 1, seed=4)
        changed_h = neg.h != pos.h
        changed_t = neg.t != pos.t
        # exactly one side replaces, and the replacement differs from the original
        assert np.all(changed_h ^ changed_t)
        assert np.all(neg.r == pos.r)

    def test_coin_is_fair(self):
        pos = _triples(4000, n_ent=50, seed=1)
        neg = corrupt_negatives(pos, 50, 1, seed=2)
        frac_head = np.mean(neg.h != pos.h)
        assert abs(frac_head - 0.5) < 0.04

    def test_avoids_known_positives(self):
        pos = _triples(300, n_ent=30, seed=5)
        neg = corrupt_negatives(pos, 30, 4, seed=6, known=pos)
        known = set(pos.keys(30, 3).tolist())
        assert not known & set(neg.keys(30, 3).tolist())

    def test_retry_limit_keeps_collision(self):
        # every corruption of (0, 0, 1) over two entities is a known positive
        pos = TripleSet([0, 1, 0], [0, 0, 0], [1, 1, 0], [0.5, 0.5, 0.5])
        neg = corrupt_negatives(pos[:1], 2, 3, seed=0, known=pos)
        assert len(neg) == 3 and NEG_RETRY_LIMIT == 100

    def test_needs_two_entities(self):
        with pytest.raises(ConfigError):
            corrupt_negatives(TripleSet([0], [0], [0], [0.5]), 1, 1, seed=0)

    def test_seeded(self):
        pos = _triples(40)
        assert corrupt_negatives(pos, 20, 3, seed=9) == corrupt_negatives(pos, 20, 3, seed=9)


def test_save_load_roundtrip(tmp_path):
    raw = [RawTriple(f"e{i % 7}", f"r{i % 2}", f"e{(i * 3) % 7}", (i % 10) / 10) for i in range(60)]
    vocab, ts = encode(raw)
    data = split(ts, seed=3, vocab=vocab)
    save_split(tmp_path / "d", data, MinMaxTo(0.1, 1.0))
    back, manifest = load_split(tmp_path / "d")
    assert back.train == data.train and back.cal == data.cal and back.test == data.test
    assert back.vocab.entities == vocab.entities
    assert manifest["split_seed"] == 3 and manifest["scheme"] == MinMaxTo(0.1, 1.0).to_dict()


def test_save_is_byte_identical(tmp_path):
    ts = _triples(100)
    data = split(ts, seed=1)
    save_split(tmp_path / "a", data)
    save_split(tmp_path / "b", data)
    for name in ("train.tsv", "cal.tsv", "test.tsv", "manifest.json", "entities.vocab"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_load_missing_manifest(tmp_path):
    with pytest.raises(ConfigError):
        load_split(tmp_path)
