"""Desk-scale trend experiments on synthetic corpora.

Two setups are encoded here so tests, the CLI and ad-hoc scripts share
them: supervised fine-tuning versus from-scratch training on small target
subsets, and unsupervised cluster-then-train adaptation with Techniques I
and II. Both start from a network pretrained on a clean source channel.

Plain SGD needs a far larger step than the library default to move in 40
epochs, so the trend runs use ``learning_rate=0.1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .adapt import AdaptConfig, run_adapt_loop
from .cluster import ClusterConfig
from .core import make_rng
from .corpus import (
    CorpusSpec, PreparedDataset, filter_min_segments, generate_corpus, generate_pairs,
    segment_corpus, select_subset, speaker_labels, split_dev_speakers, split_si_validation,
)
from .evaluation import compute_eer, score_trials
from .model import EmbeddingModel, TrainConfig, TrainResult, train_si

TREND_LR = 0.1

# channel-A analogue used for the fine-tuning trend
FINETUNE_TARGET_CHANNEL = {"noise_sigma": 0.3, "distortion": 0.3, "offset": 0.5,
                           "interference_rank": 2, "interference_sigma": 2.0}
# milder damage on a tighter world: clusters are recoverable without labels
ADAPT_TARGET_CHANNEL = {"noise_sigma": 0.15, "distortion": 0.3, "offset": 0.5,
                        "interference_rank": 2, "interference_sigma": 1.5}


@dataclass
class SourceSetup:
    n_speakers: int = 200
    recordings_per_speaker: tuple = (8, 2)
    noise_sigma: float = 0.2
    learning_rate: float = 0.05
    epochs: int = 100
    batch_size: int = 32


def train_labelled(model: EmbeddingModel, dataset: PreparedDataset, cfg: TrainConfig,
                   rng: np.random.Generator) -> TrainResult:
    """SI training with one held-out segment per speaker as validation."""
    train, val = split_si_validation(dataset, rng)
    speakers = dataset.speakers
    return train_si(model, train.features(), speaker_labels(train.segments, speakers),
                    val.features(), speaker_labels(val.segments, speakers), cfg,
                    n_classes=len(speakers))


def pretrain_source(seed: int, setup: Optional[SourceSetup] = None) -> EmbeddingModel:
    """Train from scratch on a clean single-channel source corpus."""
    setup = setup or SourceSetup()
    spec = CorpusSpec(n_speakers=setup.n_speakers, channels=["I"], seed=seed,
                      recordings_per_speaker=setup.recordings_per_speaker,
                      channel_params={"I": {"noise_sigma": setup.noise_sigma}})
    rng = make_rng(seed)
    segments = segment_corpus(generate_corpus(spec, rng)["I"], rng)
    dataset = filter_min_segments(PreparedDataset(segments))
    cfg = TrainConfig(learning_rate=setup.learning_rate, epochs=setup.epochs,
                      batch_size=setup.batch_size, init_mode="scratch", seed=seed)
    return train_labelled(EmbeddingModel.init(make_rng(seed + 1)), dataset, cfg, rng).model


def _eer(model, pairs, index) -> float:
    return compute_eer(score_trials(model, pairs, index)).eer


@dataclass
class FinetuneTrend:
    sizes: Sequence[int] = (20, 50, 100)
    n_speakers: int = 200
    recordings_per_speaker: tuple = (3, 0)
    channel: dict = field(default_factory=lambda: dict(FINETUNE_TARGET_CHANNEL))
    learning_rate: float = TREND_LR
    epochs: int = 40
    n_trials: int = 2000


def finetune_trend_trial(seed: int, pretrained: EmbeddingModel,
                         setup: Optional[FinetuneTrend] = None) -> dict:
    """Baseline, fine-tune and from-scratch test EER per subset size.

    The first half of the target speakers (ascending id) is the labelled
    pool; the other half is dev, split into validation and test speakers.
    Returns ``{"baseline": e, n: {"finetune": e, "scratch": e}, ...}``.
    """
    setup = setup or FinetuneTrend()
    rng = make_rng(seed + 77)
    spec = CorpusSpec(n_speakers=setup.n_speakers, channels=["A"], seed=seed + 1000,
                      recordings_per_speaker=setup.recordings_per_speaker, speaker_offset=1000,
                      channel_params={"A": setup.channel})
    segments = segment_corpus(generate_corpus(spec)["A"], rng)
    speakers = sorted({s.speaker_id for s in segments})
    pool_ids = set(speakers[:len(speakers) // 2])
    pool = filter_min_segments(PreparedDataset([s for s in segments if s.speaker_id in pool_ids],
                                               channel="A"))
    dev = filter_min_segments(PreparedDataset([s for s in segments if s.speaker_id not in pool_ids],
                                              role="dev", channel="A"))
    _, test = split_dev_speakers(dev, rng)
    pairs = generate_pairs(test, setup.n_trials, rng)
    index = test.index()

    out: dict = {"baseline": _eer(pretrained, pairs, index)}
    n_pool = len(pool.speakers)
    for n in setup.sizes:
        subset = select_subset(pool, min(1.0, n / n_pool))
        split_seed = int(rng.integers(2**62))
        out[n] = {}
        for mode in ("finetune", "scratch"):
            cfg = TrainConfig(learning_rate=setup.learning_rate, epochs=setup.epochs,
                              init_mode=mode, seed=seed)
            res = train_labelled(pretrained, subset, cfg, make_rng(split_seed))
            out[n][mode] = _eer(res.model, pairs, index)
    return out


@dataclass
class AdaptTrend:
    n_train_speakers: int = 100
    n_dev_speakers: int = 60
    recordings_per_speaker: int = 4
    segments_per_recording: int = 5
    session_sigma: float = 0.3
    within_speaker_sigma: float = 0.1
    channel: dict = field(default_factory=lambda: dict(ADAPT_TARGET_CHANNEL))
    clustering: str = "kmeans"
    learning_rate: float = TREND_LR
    epochs: int = 40
    max_iterations: int = 3
    n_trials: int = 2000


def adapt_target(seed: int, setup: AdaptTrend):
    """Unlabelled train segments plus a (pairs, index) test set for one seed."""
    rng = make_rng(seed + 5)
    n_total = setup.n_train_speakers + setup.n_dev_speakers
    duration = setup.segments_per_recording * 8.0
    spec = CorpusSpec(n_speakers=n_total, channels=["A"], seed=seed + 2000,
                      recordings_per_speaker=(setup.recordings_per_speaker, 0),
                      recording_duration_s=(duration, 0), speech_fraction=(1.0, 0),
                      speaker_offset=3000, session_sigma=setup.session_sigma,
                      within_speaker_sigma=setup.within_speaker_sigma,
                      channel_params={"A": setup.channel})
    segments = segment_corpus(generate_corpus(spec)["A"], rng)
    speakers = sorted({s.speaker_id for s in segments})
    train_ids = set(speakers[:setup.n_train_speakers])
    train = [s for s in segments if s.speaker_id in train_ids]
    dev = PreparedDataset([s for s in segments if s.speaker_id not in train_ids], role="dev",
                          channel="A")
    _, test = split_dev_speakers(dev, rng)
    return train, generate_pairs(test, setup.n_trials, rng), test.index()


def adapt_trend_trial(seed: int, pretrained: EmbeddingModel,
                      setup: Optional[AdaptTrend] = None) -> dict:
    """Baseline EER and, per technique, test EER of every adapted iteration.

    Returns ``{"baseline": e, "I": {"eer": [...], "report": AdaptReport}, "II": ...}``
    where ``eer[i]`` belongs to fine-tune iteration ``i + 1``.
    """
    setup = setup or AdaptTrend()
    train, pairs, index = adapt_target(seed, setup)
    out: dict = {"baseline": _eer(pretrained, pairs, index)}
    for technique in ("I", "II"):
        cfg = AdaptConfig(technique=technique,
                          clustering=ClusterConfig(k=setup.n_train_speakers, method=setup.clustering),
                          max_iterations=setup.max_iterations,
                          train_cfg=TrainConfig(learning_rate=setup.learning_rate, epochs=setup.epochs),
                          seed=seed)
        res = run_adapt_loop(pretrained, train, cfg)
        out[technique] = {"eer": [_eer(m, pairs, index) for m in res.models[1:]],
                          "report": res.report}
    return out
