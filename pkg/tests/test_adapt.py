import json

import numpy as np
import pytest

from sfdasv.adapt import (
    ERROR_ROSE, MAX_ITERATIONS, AdaptConfig, AdaptReport, IterationRecord, assign_pseudo_labels,
    build_cluster_inputs, run_adapt_loop, split_hypothesized_validation, write_report,
)
from sfdasv.cluster import ClusterConfig
from sfdasv.core import SegmentRecord, make_rng
from sfdasv.experiments import SourceSetup, pretrain_source
from sfdasv.corpus import CorpusSpec, generate_corpus, segment_corpus
from sfdasv.model import EmbeddingModel, TrainConfig, load_checkpoint


def toy_segments(n_spk=4, n_rec=2, n_seg=3, seed=0, dim=6):
    rng = make_rng(seed)
    centers = 3 * rng.standard_normal((n_spk, dim))
    segs = []
    for s in range(n_spk):
        for r in range(n_rec):
            for k in range(n_seg):
                segs.append(SegmentRecord(f"p{s}-r{r}-s{k}", f"p{s}-r{r}", f"p{s}",
                                          centers[s] + 0.1 * rng.standard_normal(dim)))
    return segs


def toy_config(technique="II", max_iterations=3, seed=0, k=4):
    return AdaptConfig(technique=technique, clustering=ClusterConfig(k=k, n_init=2),
                       max_iterations=max_iterations,
                       train_cfg=TrainConfig(learning_rate=0.1, epochs=2), seed=seed)


@pytest.mark.parametrize("technique, n_items", [("I", 24), ("II", 8)])
def test_cluster_item_counts(technique, n_items):
    model = EmbeddingModel.init(make_rng(0), 6, 5, 4)
    items, groups = build_cluster_inputs(model, toy_segments(), technique)
    assert items.shape == (n_items, 4)
    assert sorted(i for g in groups for i in g) == list(range(24))


def test_technique_two_items_are_recording_means():
    model = EmbeddingModel.init(make_rng(0), 6, 5, 4)
    segs = toy_segments()
    items, groups = build_cluster_inputs(model, segs, "II")
    E = model.embed(np.vstack([s.features for s in segs]))
    np.testing.assert_allclose(items[0], E[groups[0]].mean(axis=0), atol=1e-15)
    assert all(len({segs[i].recording_id for i in g}) == 1 for g in groups)


def test_unknown_technique():
    model = EmbeddingModel.init(make_rng(0), 6, 5, 4)
    with pytest.raises(ValueError):
        build_cluster_inputs(model, toy_segments(), "III")
    with pytest.raises(ValueError):
        AdaptConfig(technique="III")


def test_pseudo_labels_broadcast_to_segments():
    out = assign_pseudo_labels([2, 0], [[0, 2], [1, 3, 4]], 5)
    assert out.tolist() == [2, 0, 2, 0, 0]
    with pytest.raises(ValueError):
        assign_pseudo_labels([1, 0], [[0], [1]], 3)


def test_hypothesized_validation_one_per_label():
    labels = np.array([0, 0, 1, 1, 1, 2])
    train, val, uncovered = split_hypothesized_validation(labels, make_rng(0))
    assert sorted(labels[val].tolist()) == [0, 1]
    assert uncovered == [2]
    assert sorted(train.tolist() + val.tolist()) == list(range(6))


def test_hypothesized_validation_all_singletons():
    train, val, uncovered = split_hypothesized_validation([0, 1, 2], make_rng(0))
    assert val.size == 0 and train.tolist() == [0, 1, 2] and uncovered == [0, 1, 2]


def injected(errors):
    return lambda i, *_: errors[i]


def test_stop_rule_error_rose(tmp_path):
    segs = toy_segments()
    res = run_adapt_loop(EmbeddingModel.init(make_rng(1), 6, 5, 4), segs, toy_config(),
                         error_fn=injected([0.40, 0.25, 0.30, 0.1]), checkpoint_dir=str(tmp_path))
    assert res.report.stop_reason == ERROR_ROSE
    assert res.report.errors == [0.40, 0.25, 0.30]
    assert res.report.best_iteration == 1
    assert res.model is res.models[1]
    ckpt, _, _ = load_checkpoint(res.report.records[1].checkpoint)
    assert ckpt.trunk_W.tobytes() == res.model.trunk_W.tobytes()


def test_equal_error_also_stops():
    res = run_adapt_loop(EmbeddingModel.init(make_rng(1), 6, 5, 4), toy_segments(), toy_config(),
                         error_fn=injected([0.3, 0.3, 0.1]))
    assert res.report.stop_reason == ERROR_ROSE and res.report.best_iteration == 0
    assert res.model is res.models[0]


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("max_iterations", [1, 2, 4])
def test_never_exceeds_max_iterations(seed, max_iterations):
    falling = [1.0 / (i + 1) for i in range(10)]
    res = run_adapt_loop(EmbeddingModel.init(make_rng(seed), 6, 5, 4), toy_segments(seed=seed),
                         toy_config(max_iterations=max_iterations, seed=seed), error_fn=injected(falling))
    assert res.report.stop_reason == MAX_ITERATIONS
    assert len(res.report.records) == max_iterations + 1
    assert res.report.best_iteration == max_iterations


def test_measured_loop_reports_purity_and_is_deterministic():
    segs = toy_segments()
    pre = EmbeddingModel.init(make_rng(2), 6, 5, 4)
    a = run_adapt_loop(pre, segs, toy_config(max_iterations=2))
    b = run_adapt_loop(pre, segs, toy_config(max_iterations=2))
    assert a.report.to_jsonl() == b.report.to_jsonl()
    assert len(a.report.records) >= 2
    assert all(0 < r.cluster_purity <= 1 for r in a.report.records)


def test_finetune_required():
    with pytest.raises(ValueError):
        AdaptConfig(train_cfg=TrainConfig(init_mode="scratch"))


def test_report_jsonl_round_trip(tmp_path):
    report = AdaptReport([IterationRecord(0, 0.4, 0.8, "a.ckpt"), IterationRecord(1, 0.25, None, None)],
                         best_iteration=1, stop_reason=ERROR_ROSE)
    write_report(tmp_path / "r.jsonl", report)
    text = (tmp_path / "r.jsonl").read_text()
    rows = [json.loads(ln) for ln in text.splitlines()]
    assert rows[-1] == {"stop_reason": ERROR_ROSE, "best_iteration": 1}
    assert rows[1]["purity"] is None
    back = AdaptReport.from_jsonl(text)
    assert back.errors == [0.4, 0.25] and back.stop_reason == ERROR_ROSE


@pytest.mark.parametrize("technique", ["I", "II"])
def test_separable_target_purity(technique):
    pre = pretrain_source(0, SourceSetup(n_speakers=60, epochs=30))
    spec = CorpusSpec(n_speakers=30, channels=["I"], seed=9, recordings_per_speaker=(4, 0),
                      recording_duration_s=(40, 0), speech_fraction=(1.0, 0), speaker_offset=500,
                      session_sigma=0.05, within_speaker_sigma=0.05,
                      channel_params={"I": {"noise_sigma": 0.05}})
    segs = segment_corpus(generate_corpus(spec)["I"], make_rng(1))
    # centroid separation at least 5x the within-speaker spread
    X = np.vstack([s.features for s in segs])
    spk = np.array([s.speaker_id for s in segs])
    cents = np.vstack([X[spk == p].mean(axis=0) for p in sorted(set(spk))])
    spread = np.sqrt(np.mean([((X[spk == p] - c) ** 2).sum(1).mean() for p, c in zip(sorted(set(spk)), cents)]))
    sep = np.median([np.linalg.norm(a - b) for i, a in enumerate(cents) for b in cents[i + 1:]])
    assert sep >= 5 * spread
    cfg = AdaptConfig(technique=technique, clustering=ClusterConfig(k=30), max_iterations=1,
                      train_cfg=TrainConfig(learning_rate=0.1, epochs=10))
    res = run_adapt_loop(pre, segs, cfg)
    assert res.report.records[1].cluster_purity >= 0.9
