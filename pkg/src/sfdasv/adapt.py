"""Unsupervised iterative cluster-then-train adaptation.

Starting from a pretrained network, each round embeds the unlabelled target
segments, clusters them into ``k`` pseudo-speakers, holds out one segment per
pseudo-speaker for validation and fine-tunes on the rest. Rounds continue
while the validation error keeps falling.

Technique I clusters every segment on its own. Technique II clusters one
mean embedding per recording and hands the cluster id to all its segments.
"""
from __future__ import annotations

import json
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .cluster import ClusterConfig, cluster, purity
from .core import SegmentRecord, make_rng
from .model import ClassifierHead, EmbeddingModel, TrainConfig, save_checkpoint, train_si

log = logging.getLogger(__name__)

ERROR_ROSE = "ErrorRose"
MAX_ITERATIONS = "MaxIterations"


@dataclass
class AdaptConfig:
    technique: str = "II"
    clustering: ClusterConfig = field(default_factory=lambda: ClusterConfig(k=2))
    max_iterations: int = 5
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def __post_init__(self):
        if self.technique not in ("I", "II"):
            raise ValueError(f"technique must be 'I' or 'II', got {self.technique!r}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.train_cfg.init_mode != "finetune":
            raise ValueError("adaptation fine-tunes; train_cfg.init_mode must be 'finetune'")

    @property
    def k(self) -> int:
        return self.clustering.k


@dataclass
class IterationRecord:
    iteration: int
    validation_error: float
    cluster_purity: Optional[float] = None
    checkpoint: Optional[str] = None
    uncovered_labels: int = 0


@dataclass
class AdaptReport:
    records: list = field(default_factory=list)
    best_iteration: int = 0
    stop_reason: str = MAX_ITERATIONS

    @property
    def errors(self) -> list[float]:
        return [r.validation_error for r in self.records]

    def to_jsonl(self) -> str:
        lines = [json.dumps({
            "iteration": r.iteration, "validation_error": r.validation_error,
            "purity": r.cluster_purity, "checkpoint": r.checkpoint,
        }) for r in self.records]
        lines.append(json.dumps({"stop_reason": self.stop_reason, "best_iteration": self.best_iteration}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "AdaptReport":
        rows = [json.loads(ln) for ln in text.splitlines() if ln.strip()]
        tail = rows.pop()
        records = [IterationRecord(r["iteration"], r["validation_error"], r["purity"], r["checkpoint"])
                   for r in rows]
        return cls(records, tail["best_iteration"], tail["stop_reason"])


@dataclass
class AdaptResult:
    report: AdaptReport
    model: EmbeddingModel
    head: Optional[ClassifierHead]
    models: list  # Φ_0, Φ_1, ... in iteration order


def build_cluster_inputs(model: EmbeddingModel, segments: Sequence[SegmentRecord], technique: str):
    """Return (items, groups): one clustering item per segment (I) or per recording (II).

    ``groups[j]`` lists the segment indices that item ``j`` stands for.
    """
    if not segments:
        raise ValueError("no target segments")
    E = model.embed(np.vstack([s.features for s in segments]))
    if technique == "I":
        return E, [[i] for i in range(len(segments))]
    if technique != "II":
        raise ValueError(f"unknown technique {technique!r}")
    by_rec: "OrderedDict[str, list[int]]" = OrderedDict()
    for i, seg in enumerate(segments):
        if not seg.recording_id:
            raise ValueError(f"segment {seg.segment_id} has no recording id")
        by_rec.setdefault(seg.recording_id, []).append(i)
    groups = list(by_rec.values())
    items = np.vstack([E[idx].mean(axis=0) for idx in groups])
    return items, groups


def assign_pseudo_labels(labels: Sequence[int], groups: Sequence[Sequence[int]], n_segments: int) -> np.ndarray:
    """Spread item cluster ids back onto segments."""
    labels = np.asarray(labels)
    if len(labels) != len(groups):
        raise ValueError(f"{len(groups)} items but {len(labels)} cluster labels")
    out = np.full(n_segments, -1, dtype=np.int64)
    for lab, idx in zip(labels, groups):
        out[list(idx)] = lab
    if np.any(out < 0):
        raise ValueError("some segments are not covered by any clustered item")
    return out


def split_hypothesized_validation(pseudo_labels: Sequence[int], rng: np.random.Generator):
    """Hold out one random segment per pseudo-label.

    Returns (train indices, validation indices, uncovered labels); labels
    owning a single segment stay in train and are listed as uncovered.
    """
    pseudo_labels = np.asarray(pseudo_labels)
    val, uncovered = [], []
    for lab in np.unique(pseudo_labels):
        idx = np.flatnonzero(pseudo_labels == lab)
        if len(idx) < 2:
            uncovered.append(int(lab))
            continue
        val.append(int(idx[rng.integers(len(idx))]))
    val_set = set(val)
    train = np.array([i for i in range(len(pseudo_labels)) if i not in val_set], dtype=np.int64)
    return train, np.array(sorted(val), dtype=np.int64), uncovered


def run_adapt_loop(pretrained: EmbeddingModel, segments: Sequence[SegmentRecord], cfg: AdaptConfig,
                   error_fn: Optional[Callable] = None, checkpoint_dir: Optional[str] = None,
                   with_purity: bool = True) -> AdaptResult:
    """Iterate embed -> cluster -> pseudo-label -> split -> fine-tune.

    E_0 is the error of a classifier head fitted on top of the frozen
    pretrained network, using the pseudo-labels of its own clustering. Each
    later E_i is the best validation error of the fine-tuned network. The
    loop stops as soon as an error fails to improve (``ErrorRose``) or after
    ``cfg.max_iterations`` fine-tune passes.

    ``error_fn(iteration, model, head, X_val, y_val)``, when given, replaces
    the measured validation error (used to exercise the stop rule). Speaker
    ids on the segments are read only to report cluster purity.
    """
    segments = list(segments)
    X = np.vstack([s.features for s in segments])
    truth = [s.speaker_id for s in segments]
    have_truth = with_purity and all(t is not None for t in truth)
    rng = make_rng(cfg.seed)
    seeds = rng.integers(0, 2**62, size=(cfg.max_iterations + 1, 2))

    report = AdaptReport()
    models = [pretrained]
    heads: list = [None]

    def save(i, model, head):
        if checkpoint_dir is None:
            return None
        path = os.path.join(checkpoint_dir, f"adapt_iter{i}.ckpt")
        save_checkpoint(path, model, head)
        return path

    def pseudo_split(model, round_idx):
        items, groups = build_cluster_inputs(model, segments, cfg.technique)
        ccfg = replace(cfg.clustering, seed=int(seeds[round_idx, 0]))
        assignment = cluster(items, ccfg)
        labels = assign_pseudo_labels(assignment.labels, groups, len(segments))
        train_idx, val_idx, uncovered = split_hypothesized_validation(labels, rng)
        pur = purity(labels, truth) if have_truth else None
        return labels, train_idx, val_idx, uncovered, pur

    def fit(model, labels, train_idx, val_idx, round_idx, freeze=None):
        tcfg = replace(cfg.train_cfg, seed=int(seeds[round_idx, 1]))
        if freeze is not None:
            tcfg = replace(tcfg, freeze=frozenset(freeze))
        res = train_si(model, X[train_idx], labels[train_idx], X[val_idx], labels[val_idx],
                       tcfg, n_classes=cfg.k)
        err = res.best_val_error
        if error_fn is not None:
            err = float(error_fn(len(report.records), res.model, res.head, X[val_idx], labels[val_idx]))
        return res, err

    current = pretrained
    for i in range(cfg.max_iterations):
        labels, train_idx, val_idx, uncovered, pur = pseudo_split(current, i)
        if i == 0:
            probe, e0 = fit(pretrained, labels, train_idx, val_idx, cfg.max_iterations,
                            freeze={"base", "trunk"})
            heads[0] = probe.head
            report.records.append(IterationRecord(0, e0, pur, save(0, pretrained, probe.head),
                                                  len(uncovered)))
        res, err = fit(current, labels, train_idx, val_idx, i)
        models.append(res.model)
        heads.append(res.head)
        report.records.append(IterationRecord(i + 1, err, pur, save(i + 1, res.model, res.head),
                                              len(uncovered)))
        log.info("adapt iteration %d: E=%.4f purity=%s", i + 1, err, pur)
        current = res.model
        if err >= report.records[-2].validation_error:
            report.stop_reason = ERROR_ROSE
            break
    else:
        report.stop_reason = MAX_ITERATIONS

    errors = report.errors
    report.best_iteration = int(np.argmin(errors))
    best = report.best_iteration
    return AdaptResult(report, models[best], heads[best], models)


def write_report(path, report: AdaptReport) -> None:
    with open(path, "w") as fh:
        fh.write(report.to_jsonl())
