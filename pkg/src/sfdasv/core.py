"""Shared domain types, seeded randomness and embedding math."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

SEGMENT_SECONDS = 8.0


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentRecord:
    segment_id: str
    recording_id: str
    speaker_id: Optional[str]
    features: np.ndarray
    channel: str = "I"
    duration_s: float = SEGMENT_SECONDS


@dataclass(frozen=True)
class TrialPair:
    seg_a: str
    seg_b: str
    label: int

    def __post_init__(self):
        if self.seg_a == self.seg_b:
            raise ValueError(f"self-pair on segment {self.seg_a}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; its stream is fixed for a seed on every platform."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def child_rngs(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return list(rng.spawn(n))


def derive_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


def as_embedding(values) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1:
        raise ShapeError(f"embedding must be 1-D, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("embedding has non-finite entries")
    return vec


def cosine_similarity(a, b) -> float:
    a = as_embedding(a)
    b = as_embedding(b)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for a zero-norm embedding")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_similarity_rows(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-wise cosine between two equally shaped matrices."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ShapeError(f"shape mismatch: {A.shape} vs {B.shape}")
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValueError("cosine similarity undefined for a zero-norm embedding")
    return np.clip(np.einsum("ij,ij->i", A, B) / (na * nb), -1.0, 1.0)


def mean_embedding(items: Sequence) -> np.ndarray:
    if len(items) == 0:
        raise ValueError("mean of an empty embedding list")
    stacked = np.vstack([as_embedding(x) for x in items])
    return stacked.mean(axis=0)


def l2_normalize(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize a zero-norm embedding")
    return X / norms


# Embedding file: "dim=<D>" header, then "<id> <v1> ... <vD>" per line.

def format_float(x: float) -> str:
    return repr(float(x))


def write_embeddings(path, ids: Iterable[str], vectors: np.ndarray) -> None:
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    ids = list(ids)
    if len(ids) != vectors.shape[0]:
        raise ShapeError("one id per embedding required")
    with open(path, "w") as fh:
        fh.write(f"dim={vectors.shape[1]}\n")
        for key, vec in zip(ids, vectors):
            fh.write(key + " " + " ".join(format_float(v) for v in vec) + "\n")


def read_embeddings(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("dim="):
            raise ValueError(f"{path}: missing dim=<D> header")
        dim = int(header[4:])
        ids, rows = [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected {dim} values")
            ids.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    return ids, np.asarray(rows, dtype=np.float64).reshape(len(ids), dim)
