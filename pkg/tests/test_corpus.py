from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfdasv.core import SegmentRecord, make_rng
from sfdasv.corpus import (
    DEV_TEST, DEV_VALIDATION, SUBSET_FRACTIONS, ChannelSpec, CorpusSpec, InfeasibleError,
    PreparedDataset, RawRecording, build_training_set, corpus_spec_from_dict, filter_min_segments,
    generate_corpus, generate_pairs, parse_key_values, read_manifest, read_trials,
    segment_corpus, segment_recording, select_subset, simulate_vad, speaker_labels,
    speaker_stats, split_dev_speakers, split_si_validation, write_manifest, write_trials,
)


def fake(counts, role="train"):
    """Dataset with counts[i] segments for speaker i."""
    segs = []
    for i, n in enumerate(counts):
        for j in range(n):
            segs.append(SegmentRecord(f"p{i:02d}-s{j:02d}", f"p{i:02d}-r{j // 2}", f"p{i:02d}",
                                      np.full(2, float(i))))
    return PreparedDataset(segs, role)


def recording(duration, fraction=1.0, channel=None):
    return RawRecording("r", "p", "I", duration, fraction, np.zeros(4), channel)


def test_default_corpus_has_three_channels_with_same_recordings():
    spec = CorpusSpec(n_speakers=5)
    out = generate_corpus(spec)
    assert sorted(out) == ["A", "D", "I"]
    ids = [[r.recording_id for r in out[ch]] for ch in ("I", "A", "D")]
    assert ids[0] == ids[1] == ids[2]


def test_generation_reproducible():
    spec = CorpusSpec(n_speakers=6, seed=4)
    a = segment_corpus(generate_corpus(spec)["A"], make_rng(1))
    b = segment_corpus(generate_corpus(spec)["A"], make_rng(1))
    assert [s.features.tobytes() for s in a] == [s.features.tobytes() for s in b]


def test_channel_difficulty_ordering():
    spec = CorpusSpec()
    noise = {ch: spec.channel_spec(ch).noise_sigma for ch in "IDA"}
    assert noise["I"] < noise["D"] < noise["A"]
    assert spec.channel_spec("I").is_identity


def test_channel_shared_across_corpora():
    a = CorpusSpec(seed=1).channel_spec("A")
    b = CorpusSpec(seed=2).channel_spec("A")
    assert a.mix.tobytes() == b.mix.tobytes()


def test_speaker_subspace():
    spec = CorpusSpec(n_speakers=3, channels=["I"], within_speaker_sigma=0.0, session_sigma=0.0,
                      channel_params={"I": {"noise_sigma": 0.0}})
    recs = generate_corpus(spec)["I"]
    assert all(not np.any(r.base_vector[spec.speaker_dim:]) for r in recs)


@pytest.mark.parametrize("duration, fraction, expected", [
    (60.0, 1.0, 7), (60.0, 0.5, 3), (8.0, 1.0, 1), (7.99, 1.0, 0), (16.0, 1.0, 2),
])
def test_segment_count(duration, fraction, expected):
    rec = recording(duration, fraction)
    assert simulate_vad(rec) == pytest.approx(duration * fraction)
    assert len(segment_recording(rec, simulate_vad(rec))) == expected


def test_segments_of_clean_recording_are_copies():
    segs = segment_recording(recording(24.0), 24.0)
    assert [s.segment_id for s in segs] == ["r-I-s000", "r-I-s001", "r-I-s002"]
    assert all(not np.any(s.features) for s in segs)


def test_noisy_segmentation_needs_rng():
    rec = recording(16.0, channel=ChannelSpec.identity("X", 4, noise_sigma=0.1))
    with pytest.raises(ValueError):
        segment_recording(rec, 16.0)


@pytest.mark.parametrize("role, kept", [("train", ["p00", "p02"]), ("dev", ["p00", "p01", "p02"])])
def test_filter_min_segments(role, kept):
    ds = filter_min_segments(fake([3, 2, 5, 1], role))
    assert ds.speakers == kept


def test_round_robin_balances_counts():
    ds = fake([10, 2, 2])
    out = build_training_set(ds.segments, 9, make_rng(0))
    assert sorted(Counter(s.speaker_id for s in out.segments).values()) == [2, 2, 5]


def test_round_robin_rejects_oversized_target():
    with pytest.raises(InfeasibleError):
        build_training_set(fake([2, 2]).segments, 5, make_rng(0))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 8), min_size=1, max_size=10), st.data())
def test_round_robin_spread_at_most_one_among_unexhausted(counts, data):
    total = sum(counts)
    target = data.draw(st.integers(1, total))
    out = build_training_set(fake(counts).segments, target, make_rng(target))
    got = Counter(s.speaker_id for s in out.segments)
    assert len(out) == target and len({s.segment_id for s in out.segments}) == target
    open_counts = [got[f"p{i:02d}"] for i, n in enumerate(counts) if got[f"p{i:02d}"] < n]
    if open_counts:
        assert max(got.values()) - min(open_counts) <= 1


def test_subsets_are_speaker_prefixes():
    ds = fake([3] * 100)
    subsets = [select_subset(ds, f).speakers for f in SUBSET_FRACTIONS]
    assert [len(s) for s in subsets] == [1, 2, 3, 6, 12, 18, 25, 100]
    for small, big in zip(subsets, subsets[1:]):
        assert big[:len(small)] == small


@pytest.mark.parametrize("fraction", [0.0, 1.5, -0.1])
def test_subset_fraction_range(fraction):
    with pytest.raises(ValueError):
        select_subset(fake([3, 3]), fraction)


@pytest.mark.parametrize("n", [2, 7, 10])
def test_dev_split_is_disjoint_and_covers(n):
    val, test = split_dev_speakers(fake([2] * n, "dev"), make_rng(n))
    assert val.role == DEV_VALIDATION and test.role == DEV_TEST
    assert not set(val.speakers) & set(test.speakers)
    assert len(val.speakers) == (n + 1) // 2 and len(val) + len(test) == 2 * n


def test_dev_split_needs_two_speakers():
    with pytest.raises(InfeasibleError):
        split_dev_speakers(fake([4], "dev"), make_rng(0))


def test_si_validation_holds_out_one_per_speaker():
    ds = fake([3, 1, 4])
    train, val = split_si_validation(ds, make_rng(0))
    assert sorted(s.speaker_id for s in val.segments) == ["p00", "p02"]
    assert len(train) + len(val) == len(ds)
    assert not {s.segment_id for s in train.segments} & {s.segment_id for s in val.segments}


def test_speaker_labels():
    ds = fake([1, 2])
    assert speaker_labels(ds.segments, ds.speakers).tolist() == [0, 1, 1]
    with pytest.raises(ValueError):
        speaker_labels(ds.segments, ["p00"])


@pytest.mark.parametrize("seed", range(20))
def test_pairs_contract(seed):
    rng = make_rng(seed)
    ds = fake(rng.integers(1, 6, size=int(rng.integers(3, 12))).tolist())
    ds.segments[0:0] = fake([2]).segments  # guarantee a target-capable speaker
    n = 2 * int(rng.integers(1, 10))
    pairs = generate_pairs(ds, n, rng)
    index = ds.index()
    assert len(pairs) == n and sum(p.label for p in pairs) == n // 2
    keys = {frozenset((p.seg_a, p.seg_b)) for p in pairs}
    assert len(keys) == n
    for p in pairs:
        assert p.seg_a != p.seg_b
        assert p.label == int(index[p.seg_a].speaker_id == index[p.seg_b].speaker_id)


def test_pairs_forced_composition():
    pairs = generate_pairs(fake([2, 2]), 4, make_rng(0))
    assert sorted(p.label for p in pairs) == [0, 0, 1, 1]


@pytest.mark.parametrize("counts, n, word", [
    ([5], 2, "non-target"),
    ([1, 1, 1], 2, "target"),
    ([2, 2], 6, "target"),
])
def test_pairs_infeasible(counts, n, word):
    with pytest.raises(InfeasibleError, match=word):
        generate_pairs(fake(counts), n, make_rng(0))


def test_pairs_odd_count_rejected():
    with pytest.raises(ValueError):
        generate_pairs(fake([3, 3]), 3, make_rng(0))


def test_pairs_deterministic():
    ds = fake([4, 4, 4])
    assert generate_pairs(ds, 10, make_rng(5)) == generate_pairs(ds, 10, make_rng(5))


def test_speaker_stats():
    st_ = speaker_stats(fake([2, 4]))
    assert st_["speakers"] == 2 and st_["segments"] == 6 and st_["mean"] == 3.0
    assert st_["hours"] == pytest.approx(6 * 8 / 3600)


def test_manifest_round_trip(tmp_path):
    spec = CorpusSpec(n_speakers=3, channels=["A"])
    segs = segment_corpus(generate_corpus(spec)["A"], make_rng(0))
    segs.append(SegmentRecord("anon-1", "anon", None, np.array([0.1] * 32), "A"))
    write_manifest(tmp_path / "m.tsv", segs)
    back = read_manifest(tmp_path / "m.tsv")
    assert [(s.segment_id, s.recording_id, s.speaker_id, s.channel) for s in back] == \
        [(s.segment_id, s.recording_id, s.speaker_id, s.channel) for s in segs]
    assert all(a.features.tobytes() == b.features.tobytes() for a, b in zip(segs, back))


def test_trials_round_trip(tmp_path):
    pairs = generate_pairs(fake([3, 3]), 4, make_rng(1))
    write_trials(tmp_path / "t.tsv", pairs)
    assert read_trials(tmp_path / "t.tsv") == pairs


def test_config_parsing():
    text = """
    # corpus
    n_speakers = 12
    recordings_per_speaker = 5, 1
    speech_fraction = 0.9
    channels = I, A
    channel.A.noise_sigma = 0.7
    """
    spec = corpus_spec_from_dict(parse_key_values(text))
    assert spec.n_speakers == 12 and spec.recordings_per_speaker == (5.0, 1.0)
    assert spec.speech_fraction == (0.9, 0.0) and spec.channels == ["I", "A"]
    assert spec.channel_spec("A").noise_sigma == 0.7


@pytest.mark.parametrize("text", ["bogus = 1", "channel.A.color = 1", "n_speakers 3",
                                  "seed = 1\nseed = 2"])
def test_config_errors(text):
    with pytest.raises(ValueError):
        corpus_spec_from_dict(parse_key_values(text))
