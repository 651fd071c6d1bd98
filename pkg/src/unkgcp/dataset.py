"""Weighted-triple datasets: parsing, score normalisation, encoding, splitting
and negative sampling.

Triples are held column-wise in :class:`TripleSet` (numpy arrays) because
every downstream consumer is vectorised; :class:`WeightedTriple` is the
row view handed out when iterating.
"""
from __future__ import annotations

import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DegenerateRangeError, ParseError

MANIFEST_NAME = "manifest.json"
SPLIT_NAMES = ("train", "cal", "test")
NEG_RETRY_LIMIT = 100


@dataclass(frozen=True)
class RawTriple:
    head: str
    relation: str
    tail: str
    score: float

    def __post_init__(self):
        if not (self.head and self.relation and self.tail):
            raise ValueError("triple labels must be non-empty")
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite score {self.score!r}")


@dataclass(frozen=True)
class WeightedTriple:
    h: int
    r: int
    t: int
    c: float

    def __post_init__(self):
        if not 0.0 <= self.c <= 1.0:
            raise ValueError(f"confidence {self.c!r} outside [0, 1]")


class TripleSet:
    """Column store of encoded weighted triples.

    Parameters
    ----------
    h, r, t : array-like of int
        Head, relation and tail indices.
    c : array-like of float
        Confidence scores; every value must lie in [0, 1].
    """

    __slots__ = ("h", "r", "t", "c")

    def __init__(self, h, r, t, c):
        self.h = np.asarray(h, dtype=np.int64).reshape(-1)
        self.r = np.asarray(r, dtype=np.int64).reshape(-1)
        self.t = np.asarray(t, dtype=np.int64).reshape(-1)
        self.c = np.asarray(c, dtype=np.float64).reshape(-1)
        n = len(self.h)
        if not (len(self.r) == len(self.t) == len(self.c) == n):
            raise ValueError("triple columns differ in length")
        if n and not (np.all(self.c >= 0.0) and np.all(self.c <= 1.0)):
            bad = self.c[(self.c < 0.0) | (self.c > 1.0) | np.isnan(self.c)][0]
            raise ValueError(f"confidence {bad!r} outside [0, 1]")
        for name in ("h", "r", "t"):
            if n and getattr(self, name).min() < 0:
                raise ValueError(f"negative {name} index")

    @classmethod
    def empty(cls) -> "TripleSet":
        return cls([], [], [], [])

    @classmethod
    def from_triples(cls, triples: Iterable[WeightedTriple]) -> "TripleSet":
        rows = [(x.h, x.r, x.t, x.c) for x in triples]
        if not rows:
            return cls.empty()
        h, r, t, c = zip(*rows)
        return cls(h, r, t, c)

    @classmethod
    def concat(cls, parts: Sequence["TripleSet"]) -> "TripleSet":
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.h for p in parts]),
            np.concatenate([p.r for p in parts]),
            np.concatenate([p.t for p in parts]),
            np.concatenate([p.c for p in parts]),
        )

    def __len__(self) -> int:
        return len(self.h)

    def __iter__(self) -> Iterator[WeightedTriple]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return WeightedTriple(int(self.h[i]), int(self.r[i]), int(self.t[i]), float(self.c[i]))
        return TripleSet(self.h[i], self.r[i], self.t[i], self.c[i])

    def __eq__(self, other) -> bool:
        if not isinstance(other, TripleSet):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in self.__slots__)

    def __repr__(self) -> str:
        return f"TripleSet(n={len(self)})"

    def with_scores(self, c) -> "TripleSet":
        return TripleSet(self.h, self.r, self.t, c)

    def keys(self, n_entities: int, n_relations: int) -> np.ndarray:
        """Unique int64 key per (h, r, t); used for membership tests."""
        return (self.h * n_relations + self.r) * n_entities + self.t


@dataclass
class Vocab:
    entities: dict[str, int] = field(default_factory=dict)
    relations: dict[str, int] = field(default_factory=dict)

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def entity_labels(self) -> list[str]:
        return _inverse(self.entities)

    def relation_labels(self) -> list[str]:
        return _inverse(self.relations)

    def lookup(self, head: str, relation: str, tail: str) -> tuple[int, int, int]:
        try:
            return self.entities[head], self.relations[relation], self.entities[tail]
        except KeyError as exc:
            raise ConfigError(f"label {exc.args[0]!r} not in vocabulary") from None


def _inverse(mapping: dict[str, int]) -> list[str]:
    out = [""] * len(mapping)
    for label, idx in mapping.items():
        out[idx] = label
    return out


@dataclass
class SplitDataset:
    train: TripleSet
    cal: TripleSet
    test: TripleSet
    vocab: Vocab
    split_seed: int
    ratios: tuple[float, float, float] = (0.85, 0.07, 0.08)

    @property
    def n_entities(self) -> int:
        return self.vocab.n_entities

    @property
    def n_relations(self) -> int:
        return self.vocab.n_relations

    def all_triples(self) -> TripleSet:
        return TripleSet.concat([self.train, self.cal, self.test])


# --------------------------------------------------------------------------
# parsing


def parse_tsv(source: bytes | str | IO) -> list[RawTriple]:
    """Parse ``head<TAB>relation<TAB>tail<TAB>score`` lines.

    ``source`` may be raw bytes, a text string or a (binary or text) file
    object. Blank lines are skipped but still count towards line numbers.
    """
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        data = source.read()
        text = data.decode("utf-8") if isinstance(data, bytes) else data
    out = []
    for lineno, line in enumerate(io.StringIO(text), start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ParseError(f"expected 4 tab-separated fields, got {len(fields)}", lineno)
        head, rel, tail, score_s = fields
        try:
            score = float(score_s)
        except ValueError:
            raise ParseError(f"score {score_s!r} is not a number", lineno) from None
        if not math.isfinite(score):
            raise ParseError(f"non-finite score {score_s!r}", lineno)
        if not (head and rel and tail):
            raise ParseError("empty label", lineno)
        out.append(RawTriple(head, rel, tail, score))
    return out


# --------------------------------------------------------------------------
# normalisation


@dataclass(frozen=True)
class Identity:
    def to_dict(self) -> dict:
        return {"kind": "identity"}


@dataclass(frozen=True)
class MinMaxTo:
    lo: float = 0.0
    hi: float = 1.0

    def to_dict(self) -> dict:
        return {"kind": "minmax", "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class LogCapMinMax:
    cap: float = 3.0
    lo: float = 0.5
    hi: float = 1.0

    def to_dict(self) -> dict:
        return {"kind": "logcap", "cap": self.cap, "lo": self.lo, "hi": self.hi}


Scheme = Identity | MinMaxTo | LogCapMinMax

# Benchmark presets.
PRESETS: dict[str, Scheme] = {
    "cn15k": LogCapMinMax(cap=3.0, lo=0.5, hi=1.0),
    "nl27k": MinMaxTo(lo=0.1, hi=1.0),
    "ppi5k": Identity(),
}


def scheme_from_dict(d: dict) -> Scheme:
    kind = d.get("kind")
    if kind == "identity":
        return Identity()
    if kind == "minmax":
        return MinMaxTo(float(d["lo"]), float(d["hi"]))
    if kind == "logcap":
        return LogCapMinMax(float(d["cap"]), float(d["lo"]), float(d["hi"]))
    raise ConfigError(f"unknown normalization scheme {kind!r}")


def normalize_scores(raw: Sequence[RawTriple], scheme: Scheme) -> list[RawTriple]:
    """Map native dataset scores into [0, 1].

    Statistics are taken over the whole of ``raw``; callers normalise before
    splitting.
    """
    if not raw:
        raise ConfigError("cannot normalize an empty dataset")
    if isinstance(scheme, Identity):
        return list(raw)
    scores = np.array([x.score for x in raw], dtype=np.float64)
    lo, hi = scheme.lo, scheme.hi
    if not 0.0 <= lo <= hi <= 1.0:
        raise ConfigError(f"target range [{lo}, {hi}] must lie inside [0, 1]")
    if isinstance(scheme, LogCapMinMax):
        if np.any(scores <= 0):
            raise ValueError("log normalization needs strictly positive scores")
        scores = np.log(np.minimum(scores, scheme.cap))
    elif not isinstance(scheme, MinMaxTo):
        raise ConfigError(f"unknown normalization scheme {scheme!r}")
    smin, smax = scores.min(), scores.max()
    if smax == smin:
        raise DegenerateRangeError("all scores identical; min-max range is degenerate")
    mapped = lo + (hi - lo) * (scores - smin) / (smax - smin)
    mapped = np.clip(mapped, lo, hi)
    return [RawTriple(x.head, x.relation, x.tail, float(v)) for x, v in zip(raw, mapped)]


# --------------------------------------------------------------------------
# encoding and splitting


def encode(raw: Sequence[RawTriple], vocab: Vocab | None = None) -> tuple[Vocab, TripleSet]:
    """Assign dense ids in first-occurrence order (extending ``vocab`` if given)."""
    vocab = vocab or Vocab()
    ents, rels = vocab.entities, vocab.relations
    n = len(raw)
    h = np.empty(n, np.int64)
    r = np.empty(n, np.int64)
    t = np.empty(n, np.int64)
    c = np.empty(n, np.float64)
    for i, x in enumerate(raw):
        if not 0.0 <= x.score <= 1.0:
            raise ValueError(f"score {x.score!r} of triple {i} outside [0, 1]; normalize first")
        h[i] = ents.setdefault(x.head, len(ents))
        r[i] = rels.setdefault(x.relation, len(rels))
        t[i] = ents.setdefault(x.tail, len(ents))
        c[i] = x.score
    return vocab, TripleSet(h, r, t, c)


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    if len(ratios) != 3 or any(x <= 0 for x in ratios):
        raise ConfigError(f"ratios must be three positive numbers, got {ratios!r}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {sum(ratios)!r}")
    # 1e-9 guards products like 0.29 * 100 = 28.999999999999996
    n_cal = math.floor(ratios[1] * n + 1e-9)
    n_test = math.floor(ratios[2] * n + 1e-9)
    n_train = n - n_cal - n_test
    if min(n_train, n_cal, n_test) <= 0:
        raise ConfigError(f"split of {n} triples by {tuple(ratios)} leaves a part empty")
    return n_train, n_cal, n_test


def split(
    triples: TripleSet,
    ratios: Sequence[float] = (0.85, 0.07, 0.08),
    seed: int = 0,
    vocab: Vocab | None = None,
) -> SplitDataset:
    n_train, n_cal, _ = split_sizes(len(triples), ratios)
    perm = np.random.default_rng(seed).permutation(len(triples))
    parts = np.split(perm, [n_train, n_train + n_cal])
    if vocab is None:
        n_ent = int(max(triples.h.max(), triples.t.max())) + 1
        n_rel = int(triples.r.max()) + 1
        vocab = Vocab({f"e{i}": i for i in range(n_ent)}, {f"r{i}": i for i in range(n_rel)})
    return SplitDataset(
        train=triples[parts[0]],
        cal=triples[parts[1]],
        test=triples[parts[2]],
        vocab=vocab,
        split_seed=seed,
        ratios=tuple(float(x) for x in ratios),
    )


def holdout(triples: TripleSet, fraction: float, seed: int) -> tuple[TripleSet, TripleSet]:
    """Seeded (rest, held-out) partition; used to carve early-stopping data."""
    n_hold = max(1, int(round(fraction * len(triples))))
    if n_hold >= len(triples):
        raise ConfigError("training part too small to hold out validation triples")
    perm = np.random.default_rng(seed).permutation(len(triples))
    return triples[np.sort(perm[n_hold:])], triples[np.sort(perm[:n_hold])]


# --------------------------------------------------------------------------
# negatives


def corrupt_negatives(
    pos: TripleSet,
    n_entities: int | Vocab,
    per_positive: int,
    seed: int | np.random.Generator,
    known: TripleSet | None = None,
) -> TripleSet:
    """Corrupt head or tail of every positive ``per_positive`` times.

    Row ``i * per_positive + j`` is the j-th corruption of positive ``i``.
    Samples matching a triple in ``known`` (default: ``pos``) are redrawn up
    to ``NEG_RETRY_LIMIT`` times, after which the collision is kept.
    """
    if isinstance(n_entities, Vocab):
        n_entities = n_entities.n_entities
    if per_positive < 1:
        raise ConfigError("per_positive must be >= 1")
    if n_entities < 2:
        raise ConfigError("negative sampling needs at least two entities")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    known = pos if known is None else known
    h = np.repeat(pos.h, per_positive)
    r = np.repeat(pos.r, per_positive)
    t = np.repeat(pos.t, per_positive)
    n = len(h)
    if n == 0:
        return TripleSet.empty()
    n_rel = int(max(r.max(), known.r.max() if len(known) else 0)) + 1
    known_keys = np.unique(known.keys(n_entities, n_rel))

    corrupt_head = rng.random(n) < 0.5
    orig = np.where(corrupt_head, h, t)
    todo = np.arange(n)
    new_h, new_t = h.copy(), t.copy()
    for _ in range(NEG_RETRY_LIMIT + 1):
        # draw from E \ {orig} by sampling n_entities - 1 slots and skipping orig
        draw = rng.integers(0, n_entities - 1, size=len(todo))
        draw = draw + (draw >= orig[todo])
        ch = corrupt_head[todo]
        new_h[todo] = np.where(ch, draw, h[todo])
        new_t[todo] = np.where(ch, t[todo], draw)
        keys = (new_h[todo] * n_rel + r[todo]) * n_entities + new_t[todo]
        idx = np.searchsorted(known_keys, keys)
        idx = np.minimum(idx, len(known_keys) - 1)
        hit = known_keys[idx] == keys
        todo = todo[hit]
        if len(todo) == 0:
            break
    return TripleSet(new_h, r, new_t, np.zeros(n))


# --------------------------------------------------------------------------
# persistence


def write_triples(path: str | os.PathLike, triples: TripleSet) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for h, r, t, c in zip(triples.h.tolist(), triples.r.tolist(), triples.t.tolist(), triples.c.tolist()):
            fh.write(f"{h}\t{r}\t{t}\t{c!r}\n")


def read_triples(path: str | os.PathLike) -> TripleSet:
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return TripleSet.empty()
    try:
        arr = np.loadtxt(io.StringIO(text), delimiter="\t", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if arr.shape[1] != 4:
        raise ParseError(f"{path}: expected 4 columns, got {arr.shape[1]}")
    return TripleSet(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2].astype(np.int64), arr[:, 3])


def _write_vocab(path: Path, mapping: dict[str, int]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for label, idx in sorted(mapping.items(), key=lambda kv: kv[1]):
            fh.write(f"{label}\t{idx}\n")


def _read_vocab(path: Path) -> dict[str, int]:
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line:
            continue
        label, _, idx = line.rpartition("\t")
        if not label:
            raise ParseError(f"{path}: malformed vocab row", lineno)
        out[label] = int(idx)
    if sorted(out.values()) != list(range(len(out))):
        raise ParseError(f"{path}: vocabulary ids are not dense")
    return out


def save_split(directory: str | os.PathLike, data: SplitDataset, scheme: Scheme | None = None,
               extra: dict | None = None) -> Path:
    """Write ``train/cal/test.tsv``, two vocab files and ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in SPLIT_NAMES:
        write_triples(d / f"{name}.tsv", getattr(data, name))
    _write_vocab(d / "entities.vocab", data.vocab.entities)
    _write_vocab(d / "relations.vocab", data.vocab.relations)
    manifest = {
        "format": "unkgcp-split/1",
        "split_seed": data.split_seed,
        "ratios": list(data.ratios),
        "scheme": (scheme or Identity()).to_dict(),
        "sizes": {name: len(getattr(data, name)) for name in SPLIT_NAMES},
        "n_entities": data.n_entities,
        "n_relations": data.n_relations,
    }
    if extra:
        manifest.update(extra)
    (d / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return d


def load_split(directory: str | os.PathLike) -> tuple[SplitDataset, dict]:
    d = Path(directory)
    mpath = d / MANIFEST_NAME
    if not mpath.is_file():
        raise ConfigError(f"{d} has no {MANIFEST_NAME}; run `unkgcp ingest` first")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    vocab = Vocab(_read_vocab(d / "entities.vocab"), _read_vocab(d / "relations.vocab"))
    parts = {name: read_triples(d / f"{name}.tsv") for name in SPLIT_NAMES}
    for name, part in parts.items():
        if len(part) and (max(part.h.max(), part.t.max()) >= vocab.n_entities or part.r.max() >= vocab.n_relations):
            raise ParseError(f"{d / (name + '.tsv')}: index outside vocabulary")
    data = SplitDataset(
        parts["train"], parts["cal"], parts["test"], vocab,
        split_seed=int(manifest["split_seed"]), ratios=tuple(manifest["ratios"]),
    )
    return data, manifest
