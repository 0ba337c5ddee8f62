"""Synthetic multi-channel speaker corpora and dataset preparation.

Speakers are Gaussian centroids in a low-dimensional subspace of the
feature space; each recording adds within-speaker jitter plus a session
offset on the remaining axes, and a channel applies an affine distortion,
white noise and colored interference. Preprocessing mirrors a real pipeline:
VAD keeps ``speech_fraction`` of each recording, the speech is cut into
8-second segments (tail dropped), and thin speakers are filtered out.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import SEGMENT_SECONDS, SegmentRecord, TrialPair, format_float, make_rng

TRAIN = "train"
DEV_VALIDATION = "dev-siamese-validation"
DEV_TEST = "dev-test"
ROLES = (TRAIN, DEV_VALIDATION, DEV_TEST, "dev")

SUBSET_FRACTIONS = (0.01, 0.02, 0.03, 0.06, 0.12, 0.18, 0.25, 1.0)

# channel damage grows I < D < A, following the channels' baseline difficulty
DEFAULT_CHANNEL_PARAMS = {
    "I": {"noise_sigma": 0.2, "distortion": 0.0, "offset": 0.0, "gain": 0.0,
          "interference_rank": 0, "interference_sigma": 0.0},
    "D": {"noise_sigma": 0.25, "distortion": 0.2, "offset": 0.3, "gain": 0.0,
          "interference_rank": 2, "interference_sigma": 1.2},
    "A": {"noise_sigma": 0.3, "distortion": 0.3, "offset": 0.5, "gain": 0.0,
          "interference_rank": 2, "interference_sigma": 2.0},
}


class InfeasibleError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelSpec:
    """Affine channel ``mix @ x + offset`` with additive noise.

    ``interference`` rows are fixed directions (already scaled) along which
    every segment receives extra Gaussian noise: the channel's colored noise.
    """

    name: str
    mix: np.ndarray
    offset: np.ndarray
    noise_sigma: float
    interference: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError(f"channel {self.name}: noise_sigma must be >= 0")
        if not np.all(np.isfinite(self.mix)):
            raise ValueError(f"channel {self.name}: mix has non-finite entries")

    @classmethod
    def identity(cls, name: str, dim: int, noise_sigma: float = 0.0) -> "ChannelSpec":
        return cls(name, np.eye(dim), np.zeros(dim), noise_sigma)

    @classmethod
    def random(cls, name: str, dim: int, seed: int, noise_sigma: float, distortion=0.0,
               offset=0.0, gain=0.0, interference_rank=0, interference_sigma=0.0) -> "ChannelSpec":
        """Seeded channel built from a handful of scalar knobs.

        ``gain`` is the log-scale spread of per-band gains, ``distortion`` the
        relative size of a Gaussian cross-band mixing term, and the
        interference is ``interference_rank`` random unit directions scaled
        by ``interference_sigma``.
        """
        rng = make_rng(seed)
        gains = np.exp(gain * rng.standard_normal(dim))
        mix = np.diag(gains) + distortion * rng.standard_normal((dim, dim)) / math.sqrt(dim)
        off = offset * rng.standard_normal(dim)
        rank = int(interference_rank)
        dirs = rng.standard_normal((rank, dim))
        if rank:
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return cls(name, mix, off, noise_sigma, interference_sigma * dirs if rank else None)

    @property
    def is_identity(self) -> bool:
        return (np.array_equal(self.mix, np.eye(self.mix.shape[0])) and not np.any(self.offset)
                and self.interference is None)

    def apply(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = self.mix @ x + self.offset
        if self.noise_sigma > 0:
            out = out + self.noise_sigma * rng.standard_normal(x.shape[0])
        return out

    def segment_noise(self, dim: int, rng: np.random.Generator) -> np.ndarray:
        noise = np.zeros(dim)
        if self.noise_sigma > 0:
            noise += self.noise_sigma * rng.standard_normal(dim)
        if self.interference is not None:
            noise += rng.standard_normal(self.interference.shape[0]) @ self.interference
        return noise


@dataclass
class CorpusSpec:
    n_speakers: int = 200
    recordings_per_speaker: tuple = (4, 1)  # (mean, spread), integer-uniform
    recording_duration_s: tuple = (60.0, 20.0)
    speech_fraction: tuple = (0.7, 0.25)
    speaker_centroid_sigma: float = 1.0
    within_speaker_sigma: float = 0.3
    feature_dim: int = 32
    speaker_dim: int = 8  # speaker centroids span the first speaker_dim axes; 0 = all
    session_sigma: float = 1.0  # per-recording nuisance on the remaining axes
    channels: list = field(default_factory=lambda: ["I", "A", "D"])
    channel_params: dict = field(default_factory=dict)
    seed: int = 0
    speaker_offset: int = 0  # first speaker number, lets corpora share an id space

    def __post_init__(self):
        if self.n_speakers < 1:
            raise ValueError("n_speakers must be positive")
        if self.recordings_per_speaker[0] < 1:
            raise ValueError("recordings_per_speaker mean must be positive")
        if self.recording_duration_s[0] <= 0:
            raise ValueError("recording_duration_s mean must be positive")
        if not 0 < self.speech_fraction[0] <= 1:
            raise ValueError("speech_fraction mean must lie in (0, 1]")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if not 0 <= self.speaker_dim <= self.feature_dim:
            raise ValueError("speaker_dim must lie in [0, feature_dim]")
        if not self.channels:
            raise ValueError("at least one channel required")

    def channel_spec(self, name: str) -> ChannelSpec:
        params = dict(DEFAULT_CHANNEL_PARAMS.get(name, DEFAULT_CHANNEL_PARAMS["A"]))
        params.update(self.channel_params.get(name, {}))
        noise = params.pop("noise_sigma")
        if not any(params[k] for k in ("distortion", "offset", "gain", "interference_rank")):
            return ChannelSpec.identity(name, self.feature_dim, noise)
        # seeded by the channel name alone so that every corpus shares the channel
        seed = sum(ord(c) * 131 ** i for i, c in enumerate(name)) + 7919
        return ChannelSpec.random(name, self.feature_dim, seed, noise, **params)


@dataclass(frozen=True)
class RawRecording:
    recording_id: str
    speaker_id: str
    channel: str
    duration_s: float
    speech_fraction: float
    base_vector: np.ndarray
    channel_spec: Optional[ChannelSpec] = None

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError(f"{self.recording_id}: duration must be positive")
        if not 0 < self.speech_fraction <= 1:
            raise ValueError(f"{self.recording_id}: speech_fraction outside (0, 1]")


@dataclass
class PreparedDataset:
    segments: list
    role: str = TRAIN
    channel: str = "I"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")

    def __len__(self):
        return len(self.segments)

    def by_speaker(self) -> dict[str, list]:
        groups = defaultdict(list)
        for seg in self.segments:
            groups[seg.speaker_id].append(seg)
        return dict(groups)

    @property
    def speakers(self) -> list[str]:
        return sorted(self.by_speaker())

    def features(self) -> np.ndarray:
        return np.vstack([s.features for s in self.segments])

    def index(self) -> dict[str, SegmentRecord]:
        return {s.segment_id: s for s in self.segments}

    def hours(self) -> float:
        return len(self.segments) * SEGMENT_SECONDS / 3600.0


def speaker_name(i: int) -> str:
    return f"spk{i:05d}"


def _draw_int(rng, mean_spread) -> int:
    mean, spread = mean_spread
    lo, hi = int(round(mean - spread)), int(round(mean + spread))
    return max(1, int(rng.integers(lo, hi + 1)))


def _draw_real(rng, mean_spread, lo=0.0, hi=math.inf) -> float:
    mean, spread = mean_spread
    value = mean + spread * rng.uniform(-1.0, 1.0) if spread > 0 else float(mean)
    return float(min(max(value, lo), hi))


def generate_corpus(spec: CorpusSpec, rng: Optional[np.random.Generator] = None) -> dict[str, list]:
    """Draw speakers and recordings, then render every recording through each channel.

    Returns ``{channel name: [RawRecording, ...]}``; every channel holds the
    same recordings in the same order.
    """
    rng = rng if rng is not None else make_rng(spec.seed)
    channels = [spec.channel_spec(name) for name in spec.channels]
    F = spec.feature_dim
    S = spec.speaker_dim or F
    out = {ch.name: [] for ch in channels}
    channel_rngs = {ch.name: r for ch, r in zip(channels, rng.spawn(len(channels)))}
    for s in range(spec.n_speakers):
        spk = speaker_name(spec.speaker_offset + s)
        centroid = np.zeros(F)
        centroid[:S] = spec.speaker_centroid_sigma * rng.standard_normal(S)
        for r in range(_draw_int(rng, spec.recordings_per_speaker)):
            base = centroid + spec.within_speaker_sigma * rng.standard_normal(F)
            if S < F and spec.session_sigma > 0:
                base[S:] += spec.session_sigma * rng.standard_normal(F - S)
            duration = _draw_real(rng, spec.recording_duration_s, lo=1e-3)
            fraction = _draw_real(rng, spec.speech_fraction, lo=0.01, hi=1.0)
            rec_id = f"{spk}-r{r:03d}"
            for ch in channels:
                crng = channel_rngs[ch.name]
                out[ch.name].append(RawRecording(
                    recording_id=rec_id, speaker_id=spk, channel=ch.name,
                    duration_s=duration, speech_fraction=fraction,
                    base_vector=ch.apply(base, crng), channel_spec=ch,
                ))
    return out


def simulate_vad(rec: RawRecording) -> float:
    return rec.duration_s * rec.speech_fraction


def segment_recording(rec: RawRecording, speech_duration_s: float,
                      rng: Optional[np.random.Generator] = None) -> list[SegmentRecord]:
    n = int(math.floor(speech_duration_s / SEGMENT_SECONDS + 1e-12)) if speech_duration_s > 0 else 0
    ch = rec.channel_spec
    noisy = ch is not None and (ch.noise_sigma > 0 or ch.interference is not None)
    if noisy and n and rng is None:
        raise ValueError("noisy channel segmentation needs an rng")
    segments = []
    for i in range(n):
        feats = rec.base_vector.copy()
        if noisy:
            feats = feats + ch.segment_noise(feats.shape[0], rng)
        segments.append(SegmentRecord(
            segment_id=f"{rec.recording_id}-{rec.channel}-s{i:03d}",
            recording_id=rec.recording_id, speaker_id=rec.speaker_id,
            features=feats, channel=rec.channel,
        ))
    return segments


def segment_corpus(recordings: Sequence[RawRecording], rng: np.random.Generator) -> list[SegmentRecord]:
    segments = []
    for rec in recordings:
        segments.extend(segment_recording(rec, simulate_vad(rec), rng))
    return segments


def filter_min_segments(dataset: PreparedDataset, min_per_speaker: Optional[int] = None) -> PreparedDataset:
    if min_per_speaker is None:
        min_per_speaker = 3 if dataset.role == TRAIN else 2
    counts = defaultdict(int)
    for seg in dataset.segments:
        counts[seg.speaker_id] += 1
    kept = [s for s in dataset.segments if counts[s.speaker_id] >= min_per_speaker]
    return replace(dataset, segments=kept)


def build_training_set(segments: Sequence[SegmentRecord], target_count: int,
                       rng: np.random.Generator, channel: str = "I") -> PreparedDataset:
    """Pick ``target_count`` segments keeping per-speaker counts as even as possible.

    Speakers are visited round-robin in a random order; each visit draws one
    unused segment, and exhausted speakers drop out.
    """
    if target_count > len(segments):
        raise InfeasibleError(f"asked for {target_count} segments, only {len(segments)} available")
    groups = defaultdict(list)
    for seg in segments:
        groups[seg.speaker_id].append(seg)
    speakers = sorted(groups)
    pools = {spk: list(rng.permutation(len(groups[spk]))) for spk in speakers}
    order = [speakers[i] for i in rng.permutation(len(speakers))]
    chosen = []
    while len(chosen) < target_count:
        for spk in order:
            if len(chosen) == target_count:
                break
            if pools[spk]:
                chosen.append(groups[spk][pools[spk].pop(0)])
        order = [spk for spk in order if pools[spk]]
    return PreparedDataset(chosen, TRAIN, channel)


def select_subset(train: PreparedDataset, fraction: float) -> PreparedDataset:
    """Keep the first ``ceil(fraction * n)`` speakers in ascending id order."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    speakers = train.speakers
    keep = set(speakers[:math.ceil(fraction * len(speakers) - 1e-9)])
    return replace(train, segments=[s for s in train.segments if s.speaker_id in keep])


def split_dev_speakers(dev: PreparedDataset, rng: np.random.Generator):
    """Partition speakers into (validation half, test half); odd counts favour validation."""
    speakers = dev.speakers
    if len(speakers) < 2:
        raise InfeasibleError(f"need at least 2 speakers to split, got {len(speakers)}")
    perm = [speakers[i] for i in rng.permutation(len(speakers))]
    n_val = (len(speakers) + 1) // 2
    val = set(perm[:n_val])
    val_ds = PreparedDataset([s for s in dev.segments if s.speaker_id in val], DEV_VALIDATION, dev.channel)
    test_ds = PreparedDataset([s for s in dev.segments if s.speaker_id not in val], DEV_TEST, dev.channel)
    return val_ds, test_ds


def split_si_validation(dataset: PreparedDataset, rng: np.random.Generator):
    """Hold out one random segment per speaker for SI validation.

    Returns (train, validation); speakers with a single segment stay in train only.
    """
    train, val = [], []
    groups = dataset.by_speaker()
    for spk in sorted(groups):
        segs = groups[spk]
        if len(segs) < 2:
            train.extend(segs)
            continue
        j = int(rng.integers(len(segs)))
        val.append(segs[j])
        train.extend(s for i, s in enumerate(segs) if i != j)
    return replace(dataset, segments=train), replace(dataset, segments=val)


def speaker_labels(segments: Sequence[SegmentRecord], speakers: Sequence[str]) -> np.ndarray:
    """Map each segment's speaker to its index in ``speakers``."""
    index = {spk: i for i, spk in enumerate(speakers)}
    try:
        return np.array([index[s.speaker_id] for s in segments], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"speaker {exc.args[0]} outside the label space") from None


def generate_pairs(dataset: PreparedDataset, n_pairs: int, rng: np.random.Generator,
                   max_attempts_factor: int = 100) -> list[TrialPair]:
    """Half same-speaker, half different-speaker pairs, no repeats, no self-pairs.

    Target pairs draw a speaker uniformly among those with two or more
    segments; non-target pairs draw two distinct speakers. Rejection sampling
    gives up after ``max_attempts_factor * n_pairs`` draws.
    """
    if n_pairs < 2 or n_pairs % 2:
        raise ValueError(f"n_pairs must be a positive even number, got {n_pairs}")
    groups = dataset.by_speaker()
    if any(spk is None for spk in groups):
        raise ValueError("pair generation needs ground-truth speaker ids")
    speakers = sorted(groups)
    multi = [spk for spk in speakers if len(groups[spk]) >= 2]
    half = n_pairs // 2
    if not multi:
        raise InfeasibleError("target pairs impossible: no speaker has 2 or more segments")
    if len(speakers) < 2:
        raise InfeasibleError("non-target pairs impossible: fewer than 2 speakers")
    n_target = sum(len(groups[s]) * (len(groups[s]) - 1) // 2 for s in multi)
    total = len(dataset.segments)
    n_nontarget = total * (total - 1) // 2 - sum(len(g) * (len(g) - 1) // 2 for g in groups.values())
    if n_target < half:
        raise InfeasibleError(f"target pairs: need {half}, only {n_target} exist")
    if n_nontarget < half:
        raise InfeasibleError(f"non-target pairs: need {half}, only {n_nontarget} exist")

    seen = set()
    pairs = []
    budget = max_attempts_factor * n_pairs

    def draw(label: int):
        nonlocal budget
        while budget > 0:
            budget -= 1
            if label == 1:
                segs = groups[multi[rng.integers(len(multi))]]
                i, j = rng.choice(len(segs), size=2, replace=False)
                a, b = segs[i], segs[j]
            else:
                si, sj = rng.choice(len(speakers), size=2, replace=False)
                ga, gb = groups[speakers[si]], groups[speakers[sj]]
                a, b = ga[rng.integers(len(ga))], gb[rng.integers(len(gb))]
            key = (a.segment_id, b.segment_id) if a.segment_id < b.segment_id else (b.segment_id, a.segment_id)
            if key in seen:
                continue
            seen.add(key)
            return TrialPair(a.segment_id, b.segment_id, label)
        kind = "target" if label == 1 else "non-target"
        raise InfeasibleError(f"{kind} pairs: attempt budget exhausted before {n_pairs} unique pairs")

    for _ in range(half):
        pairs.append(draw(1))
        pairs.append(draw(0))
    return pairs


def mean_recordings_per_speaker(segments: Sequence[SegmentRecord]) -> float:
    recs = defaultdict(set)
    for s in segments:
        recs[s.speaker_id].add(s.recording_id)
    return float(np.mean([len(v) for v in recs.values()])) if recs else 0.0


def speaker_stats(dataset: PreparedDataset) -> dict:
    counts = [len(v) for v in dataset.by_speaker().values()]
    return {
        "speakers": len(counts),
        "segments": len(dataset.segments),
        "mean": float(np.mean(counts)) if counts else 0.0,
        "std": float(np.std(counts)) if counts else 0.0,
        "recordings_per_speaker": mean_recordings_per_speaker(dataset.segments),
        "hours": dataset.hours(),
    }


# ------------------------------------------------------------ file formats

def write_manifest(path, segments: Sequence[SegmentRecord]) -> None:
    with open(path, "w") as fh:
        for s in segments:
            feats = " ".join(format_float(v) for v in s.features)
            fh.write(f"{s.segment_id}\t{s.recording_id}\t{s.speaker_id or '-'}\t{s.channel}\t{feats}\n")


def read_manifest(path) -> list[SegmentRecord]:
    segments = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields")
            seg_id, rec_id, spk, channel, feats = parts
            segments.append(SegmentRecord(
                segment_id=seg_id, recording_id=rec_id,
                speaker_id=None if spk == "-" else spk,
                features=np.array([float(v) for v in feats.split()]), channel=channel,
            ))
    return segments


def write_trials(path, pairs: Sequence[TrialPair]) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(f"{p.seg_a}\t{p.seg_b}\t{p.label}\n")


def read_trials(path) -> list[TrialPair]:
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: expected '<a>\\t<b>\\t<0|1>'")
            pairs.append(TrialPair(parts[0], parts[1], int(parts[2])))
    return pairs


# ------------------------------------------------------------------ config

_SCALAR_KEYS = {
    "n_speakers": int, "speaker_centroid_sigma": float, "within_speaker_sigma": float,
    "session_sigma": float,
    "feature_dim": int, "speaker_dim": int, "seed": int, "speaker_offset": int,
}
_PAIR_KEYS = ("recordings_per_speaker", "recording_duration_s", "speech_fraction")
_CHANNEL_FIELDS = ("noise_sigma", "distortion", "offset", "gain", "interference_rank",
                   "interference_sigma")


def parse_key_values(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def corpus_spec_from_dict(values: dict[str, str], source: str = "<config>") -> CorpusSpec:
    """Build a CorpusSpec from ``key = value`` entries; unknown keys are errors.

    Pair-valued keys take ``mean`` or ``mean, spread``; channels are a comma
    list, and per-channel overrides use ``channel.<name>.<field>``.
    """
    kwargs: dict = {}
    channel_params: dict = defaultdict(dict)
    for key, value in values.items():
        if key in _SCALAR_KEYS:
            kwargs[key] = _SCALAR_KEYS[key](value)
        elif key in _PAIR_KEYS:
            nums = [float(v) for v in value.split(",")]
            if len(nums) == 1:
                nums.append(0.0)
            if len(nums) != 2:
                raise ValueError(f"{source}: {key} takes 'mean' or 'mean, spread'")
            kwargs[key] = tuple(nums)
        elif key == "channels":
            kwargs["channels"] = [c.strip() for c in value.split(",") if c.strip()]
        elif key.startswith("channel.") and key.count(".") == 2 and key.split(".")[2] in _CHANNEL_FIELDS:
            _, name, fld = key.split(".")
            channel_params[name][fld] = float(value)
        else:
            raise ValueError(f"{source}: unknown key {key!r}")
    return CorpusSpec(channel_params=dict(channel_params), **kwargs)


def load_corpus_spec(path) -> CorpusSpec:
    with open(path) as fh:
        return corpus_spec_from_dict(parse_key_values(fh.read(), str(path)), str(path))
