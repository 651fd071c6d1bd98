"""DistMult-style scoring with a logistic or rectified output map, plus the
binary checkpoint format."""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from ..errors import ContractError, ParseError

CHECKPOINT_MAGIC = b"UNKGCKPT"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIB3xQQI")
_SCALARS = struct.Struct("<dd")


class Mapping(str, Enum):
    LOGI = "logi"
    RECT = "rect"


_MAPPING_CODES = {Mapping.LOGI: 0, Mapping.RECT: 1}


@dataclass
class ModelParams:
    """Entity/relation embeddings and the scalar output map ``f(w * raw + b)``."""

    entity_emb: np.ndarray
    relation_emb: np.ndarray
    w: float = 1.0
    b: float = 0.0
    mapping: Mapping = Mapping.LOGI

    def __post_init__(self):
        self.mapping = Mapping(self.mapping)
        self.w = float(self.w)
        self.b = float(self.b)
        E, R = self.entity_emb, self.relation_emb
        if E.ndim != 2 or R.ndim != 2 or E.shape[1] != R.shape[1] or E.shape[1] < 1:
            raise ContractError(f"embedding shapes {E.shape} / {R.shape} are inconsistent")
        if not (np.all(np.isfinite(E)) and np.all(np.isfinite(R)) and np.isfinite(self.w) and np.isfinite(self.b)):
            raise ContractError("model parameters must be finite")

    @property
    def dim(self) -> int:
        return self.entity_emb.shape[1]

    @property
    def n_entities(self) -> int:
        return self.entity_emb.shape[0]

    @property
    def n_relations(self) -> int:
        return self.relation_emb.shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(self.entity_emb.copy(), self.relation_emb.copy(), self.w, self.b, self.mapping)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.entity_emb.astype(dtype), self.relation_emb.astype(dtype), self.w, self.b, self.mapping)

    def fingerprint(self) -> str:
        """SHA-256 of the checkpoint serialisation."""
        return hashlib.sha256(to_bytes(self)).hexdigest()


def init_params(n_entities: int, n_relations: int, dim: int, rng: np.random.Generator,
                mapping: Mapping = Mapping.LOGI) -> ModelParams:
    bound = 0.5 / np.sqrt(dim)
    return ModelParams(
        rng.uniform(-bound, bound, size=(n_entities, dim)),
        rng.uniform(-bound, bound, size=(n_relations, dim)),
        w=1.0, b=0.0, mapping=mapping,
    )


def _check_index(idx: np.ndarray, n: int, what: str) -> None:
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)].flat[0]
        raise IndexError(f"{what} index {bad} out of range [0, {n})")


def gather(params: ModelParams, h, r, t):
    h = np.asarray(h, dtype=np.int64)
    r = np.asarray(r, dtype=np.int64)
    t = np.asarray(t, dtype=np.int64)
    _check_index(h, params.n_entities, "head")
    _check_index(t, params.n_entities, "tail")
    _check_index(r, params.n_relations, "relation")
    E, R = params.entity_emb, params.relation_emb
    return (E[h].astype(np.float64, copy=False), R[r].astype(np.float64, copy=False),
            E[t].astype(np.float64, copy=False))


def raw_score(params: ModelParams, h, r, t):
    """``sum_j e_h[j] * e_t[j] * r[j]``; scalar in, scalar out, arrays broadcast."""
    eh, er, et = gather(params, h, r, t)
    out = np.einsum("...j,...j,...j->...", eh, et, er)
    return float(out) if np.ndim(out) == 0 else out


PREDICT_CHUNK = 8192


def output_map(mapping: Mapping, z):
    if mapping is Mapping.LOGI:
        return np.exp(-np.logaddexp(0.0, -z))
    return np.clip(z, 0.0, 1.0)


def predict(params: ModelParams, h, r=None, t=None):
    """Confidence prediction in [0, 1].

    Accepts ``(h, r, t)`` indices (scalars or arrays), a single triple-like
    tuple, or any object with ``h``, ``r``, ``t`` attributes
    (:class:`~unkgcp.dataset.TripleSet`, :class:`~unkgcp.dataset.WeightedTriple`).
    """
    if r is None:
        if hasattr(h, "h"):
            h, r, t = h.h, h.r, h.t
        else:
            h, r, t = h[0], h[1], h[2]
    if np.ndim(h) == 1 and np.size(h) > PREDICT_CHUNK:
        # bounded working set keeps the cost per query flat for big batches
        h, r, t = np.asarray(h), np.asarray(r), np.asarray(t)
        return np.concatenate([predict(params, h[i:i + PREDICT_CHUNK], r[i:i + PREDICT_CHUNK], t[i:i + PREDICT_CHUNK])
                               for i in range(0, len(h), PREDICT_CHUNK)])
    z = params.w * np.asarray(raw_score(params, h, r, t)) + params.b
    out = output_map(params.mapping, z)
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# checkpoints


def to_bytes(params: ModelParams) -> bytes:
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, _MAPPING_CODES[params.mapping],
                          params.n_entities, params.n_relations, params.dim)
    return b"".join([
        header,
        np.ascontiguousarray(params.entity_emb, dtype="<f4").tobytes(),
        np.ascontiguousarray(params.relation_emb, dtype="<f4").tobytes(),
        _SCALARS.pack(params.w, params.b),
    ])


def from_bytes(blob: bytes) -> ModelParams:
    if len(blob) < _HEADER.size:
        raise ParseError("checkpoint truncated")
    magic, version, code, n_e, n_r, d = _HEADER.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ParseError("not a checkpoint file (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    mapping = {v: k for k, v in _MAPPING_CODES.items()}.get(code)
    if mapping is None:
        raise ParseError(f"unknown mapping code {code}")
    off = _HEADER.size
    expected = off + 4 * d * (n_e + n_r) + _SCALARS.size
    if len(blob) != expected:
        raise ParseError(f"checkpoint size {len(blob)} != expected {expected}")
    E = np.frombuffer(blob, dtype="<f4", count=n_e * d, offset=off).reshape(n_e, d).astype(np.float32)
    off += 4 * n_e * d
    R = np.frombuffer(blob, dtype="<f4", count=n_r * d, offset=off).reshape(n_r, d).astype(np.float32)
    off += 4 * n_r * d
    w, b = _SCALARS.unpack_from(blob, off)
    return ModelParams(E, R, w, b, mapping)


def save_checkpoint(path: str | os.PathLike, params: ModelParams) -> str:
    """Write ``params`` and return the fingerprint of the written bytes."""
    blob = to_bytes(params)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path: str | os.PathLike) -> ModelParams:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
