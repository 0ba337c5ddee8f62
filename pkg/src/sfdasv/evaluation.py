"""Trial scoring and equal error rate."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import SegmentRecord, TrialPair, cosine_similarity_rows
from .model import EmbeddingModel, SiameseHead, siamese_forward

COSINE = "cosine"
SIAMESE = "siamese"


@dataclass(frozen=True)
class ScoredTrial:
    pair: TrialPair
    score: float
    backend: str = COSINE


@dataclass(frozen=True)
class EerResult:
    eer: float
    threshold: float
    n_target: int
    n_nontarget: int

    def line(self) -> str:
        return (f"eer={self.eer!r} threshold={self.threshold!r} "
                f"n_target={self.n_target} n_nontarget={self.n_nontarget}")


def score_trials(model: EmbeddingModel, pairs: Sequence[TrialPair],
                 segments: Mapping[str, SegmentRecord], backend: str = COSINE,
                 head: Optional[SiameseHead] = None) -> list[ScoredTrial]:
    """Score every pair with cosine similarity or the Siamese head, in input order."""
    if backend not in (COSINE, SIAMESE):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == SIAMESE and head is None:
        raise ValueError("siamese backend needs a trained SiameseHead")
    if not pairs:
        return []
    missing = sorted({sid for p in pairs for sid in (p.seg_a, p.seg_b) if sid not in segments})
    if missing:
        raise KeyError(f"{len(missing)} trial segment(s) not found, e.g. {missing[0]}")
    ids = sorted({sid for p in pairs for sid in (p.seg_a, p.seg_b)})
    row = {sid: i for i, sid in enumerate(ids)}
    E = model.embed(np.vstack([segments[sid].features for sid in ids]))
    ia = np.array([row[p.seg_a] for p in pairs])
    ib = np.array([row[p.seg_b] for p in pairs])
    if backend == COSINE:
        scores = cosine_similarity_rows(E[ia], E[ib])
    else:
        scores = siamese_forward(head, E[ia], E[ib])
    return [ScoredTrial(p, float(s), backend) for p, s in zip(pairs, np.atleast_1d(scores))]


def _error_curves(scores: np.ndarray, labels: np.ndarray):
    """FAR and FRR at every distinct score used as an accept-if-score>=t threshold.

    A final +inf threshold (reject everything) closes the sweep.
    """
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    lab = labels[order]
    n_t = int(lab.sum())
    n_n = len(lab) - n_t
    thresholds, first = np.unique(s, return_index=True)
    # counts strictly below each threshold = index of its first occurrence
    tgt_below = np.concatenate([[0], np.cumsum(lab)])[first]
    non_below = first - tgt_below
    frr = np.append(tgt_below / n_t, 1.0)
    far = np.append((n_n - non_below) / n_n, 0.0)
    return np.append(thresholds, np.inf), far, frr


def eer_from_arrays(scores, labels) -> EerResult:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    n_t = int(labels.sum())
    n_n = len(labels) - n_t
    if n_t == 0 or n_n == 0:
        raise ValueError("EER needs at least one target and one non-target trial")
    thr, far, frr = _error_curves(scores, labels)
    diff = frr - far  # -1 at the lowest threshold, +1 at +inf
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0:
        return EerResult(float(far[i]), float(thr[i]), n_t, n_n)
    alpha = -diff[i - 1] / (diff[i] - diff[i - 1])
    eer = far[i - 1] + alpha * (far[i] - far[i - 1])
    if np.isfinite(thr[i]):
        threshold = thr[i - 1] + alpha * (thr[i] - thr[i - 1])
    else:
        threshold = thr[i - 1]
    return EerResult(float(eer), float(threshold), n_t, n_n)


def compute_eer(scored: Sequence[ScoredTrial]) -> EerResult:
    """Equal error rate, linearly interpolated where FAR and FRR cross."""
    return eer_from_arrays([t.score for t in scored], [t.pair.label for t in scored])


def write_scores(path, scored: Sequence[ScoredTrial]) -> None:
    with open(path, "w") as fh:
        for t in scored:
            fh.write(f"{t.pair.seg_a}\t{t.pair.seg_b}\t{t.pair.label}\t{t.score!r}\n")


def read_scores(path, backend: str = COSINE) -> list[ScoredTrial]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            a, b, lab, score = line.rstrip("\n").split("\t")
            out.append(ScoredTrial(TrialPair(a, b, int(lab)), float(score), backend))
    return out
