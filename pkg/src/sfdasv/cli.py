"""Command-line pipeline: generate -> prepare -> train-si / train-siamese / adapt -> eval.

Every stage reads and writes plain files under ``--out``::

    corpus/<ch>.tsv                      all segments of one channel
    prepared/<ch>/train.tsv              filtered labelled pool (train speakers)
    prepared/<ch>/train-f<frac>.tsv      speaker-prefix subsets
    prepared/<ch>/dev-val.tsv, dev-test.tsv, trials-val.tsv, trials-test.tsv
    models/<name>.ckpt                   checkpoints
    adapt/<ch>-<technique>-<clustering>/ per-iteration checkpoints, report.jsonl
    scores/<name>-<ch>-<backend>.tsv     score file, plus .eer with the EER line

Configuration is a ``key = value`` file; command-line flags win. The merged
configuration of each run is written to ``<out>/logs/<command>.conf``.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys

import numpy as np

from . import corpus as C
from .adapt import AdaptConfig, run_adapt_loop, write_report
from .cluster import ClusterConfig
from .core import make_rng
from .evaluation import compute_eer, score_trials, write_scores
from .model import (
    EmbeddingModel, SiameseConfig, TrainConfig, load_checkpoint, save_checkpoint, train_si,
    train_siamese,
)

log = logging.getLogger("sfdasv")

# pipeline keys and their parsers; everything else must be a corpus key
PIPELINE_KEYS = {
    "out": str, "channel": str, "fraction": float, "fractions": str, "n_trials": int,
    "train_share": float, "learning_rate": float, "epochs": int, "batch_size": int,
    "mode": str, "init": str, "pretrained": str, "checkpoint": str,
    "technique": str, "clustering": str, "k": int, "max_iterations": int,
    "backend": str, "head_lr": float, "full_lr": float, "siamese_epochs": int,
    "n_train_pairs": int,
}
DEFAULTS = {
    "out": "run", "channel": "I", "fraction": 1.0, "n_trials": 2000, "train_share": 0.5,
    "learning_rate": 0.001, "epochs": 40, "batch_size": 32, "mode": "scratch",
    "technique": "II", "clustering": "kmeans", "max_iterations": 5, "backend": "cosine",
    "head_lr": 0.01, "full_lr": 0.001, "siamese_epochs": 20, "n_train_pairs": 2000,
}
# stream offsets so stages never share random draws
_STREAMS = {"generate": 0, "prepare": 1, "train-si": 2, "train-siamese": 3, "adapt": 4}


class CliError(Exception):
    pass


def frac_tag(fraction: float) -> str:
    return f"f{fraction:g}"


# ------------------------------------------------------------------ config

def load_settings(args) -> dict:
    """Merge defaults, the config file and explicit flags (in rising priority)."""
    raw: dict[str, str] = {}
    if args.config:
        if not os.path.isfile(args.config):
            raise CliError(f"config file not found: {args.config}")
        with open(args.config) as fh:
            raw = C.parse_key_values(fh.read(), args.config)
    settings = dict(DEFAULTS)
    corpus_keys = {}
    for key, value in raw.items():
        if key in PIPELINE_KEYS:
            settings[key] = PIPELINE_KEYS[key](value)
        else:
            corpus_keys[key] = value
    for key in ("out", "channel", "fraction", "technique", "clustering", "k", "backend",
                "checkpoint", "init", "mode"):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if args.seed is not None:
        corpus_keys["seed"] = str(args.seed)
    settings["seed"] = int(corpus_keys.get("seed", 0))
    settings["corpus"] = corpus_keys
    settings["source"] = args.config or "<flags>"
    return settings


def corpus_spec(settings: dict) -> C.CorpusSpec:
    return C.corpus_spec_from_dict(settings["corpus"], settings["source"])


def log_settings(settings: dict, command: str) -> None:
    path = out_path(settings, "logs", f"{command}.conf")
    lines = [f"command = {command}"]
    for key in sorted(k for k in settings if k not in ("corpus", "source")):
        if settings[key] is not None:
            lines.append(f"{key} = {settings[key]}")
    lines += [f"{k} = {v}" for k, v in sorted(settings["corpus"].items())]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def out_path(settings: dict, *parts: str) -> str:
    path = os.path.join(settings["out"], *parts)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    return path


def require(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise CliError(f"missing {what}: {path} (run the upstream command first)")
    return path


def stage_rng(settings: dict, command: str):
    return make_rng(settings["seed"] * 8 + _STREAMS[command])


def prepared(settings: dict, name: str) -> str:
    return os.path.join(settings["out"], "prepared", settings["channel"], name)


def pretrained_path(settings: dict) -> str:
    return settings.get("pretrained") or os.path.join(settings["out"], "models", "si-scratch-I-f1.ckpt")


# ---------------------------------------------------------------- commands

def cmd_generate(settings: dict) -> None:
    spec = corpus_spec(settings)
    rng = stage_rng(settings, "generate")
    recordings = C.generate_corpus(spec, rng)
    rows = []
    for ch in spec.channels:
        segments = C.segment_corpus(recordings[ch], rng)
        C.write_manifest(out_path(settings, "corpus", f"{ch}.tsv"), segments)
        kept = C.filter_min_segments(C.PreparedDataset(segments, channel=ch))
        recs = recordings[ch]
        rows.append((ch,
                     len(recs), len({r.recording_id for r in kept.segments}),
                     len({r.speaker_id for r in recs}), len(kept.speakers),
                     sum(r.duration_s for r in recs) / 3600.0, kept.hours()))
    print(f"{'channel':<8}{'files':>14}{'speakers':>14}{'hours':>18}")
    print(f"{'':<8}{'before after':>14}{'before after':>14}{'before   after':>18}")
    for ch, fb, fa, sb, sa, hb, ha in rows:
        print(f"{ch:<8}{fb:>7}{fa:>7}{sb:>7}{sa:>7}{hb:>9.2f}{ha:>9.2f}")


def _subset_fractions(settings: dict) -> list[float]:
    if settings.get("fractions"):
        return [float(v) for v in settings["fractions"].split(",")]
    return [settings["fraction"]]


def cmd_prepare(settings: dict, check: bool = False) -> None:
    ch = settings["channel"]
    segments = C.read_manifest(require(os.path.join(settings["out"], "corpus", f"{ch}.tsv"),
                                       f"manifest for channel {ch}"))
    rng = stage_rng(settings, "prepare")
    speakers = sorted({s.speaker_id for s in segments})
    n_train = math.ceil(settings["train_share"] * len(speakers))
    train_ids = set(speakers[:n_train])
    pool = C.filter_min_segments(C.PreparedDataset(
        [s for s in segments if s.speaker_id in train_ids], C.TRAIN, ch))
    dev = C.filter_min_segments(C.PreparedDataset(
        [s for s in segments if s.speaker_id not in train_ids], "dev", ch))
    val, test = C.split_dev_speakers(dev, rng)
    n = settings["n_trials"]
    trials_val = C.generate_pairs(val, n, rng)
    trials_test = C.generate_pairs(test, n, rng)

    subsets = []
    for fraction in sorted(_subset_fractions(settings)):
        sub = C.select_subset(pool, fraction)
        if len(sub.speakers) < 2:
            raise C.InfeasibleError(f"fraction {fraction:g} leaves {len(sub.speakers)} speaker(s); "
                                    "cannot form non-target pairs")
        subsets.append((fraction, sub))

    C.write_manifest(out_path(settings, "prepared", ch, "train.tsv"), pool.segments)
    C.write_manifest(prepared(settings, "dev-val.tsv"), val.segments)
    C.write_manifest(prepared(settings, "dev-test.tsv"), test.segments)
    C.write_trials(prepared(settings, "trials-val.tsv"), trials_val)
    C.write_trials(prepared(settings, "trials-test.tsv"), trials_test)
    print(f"train: {len(pool.speakers)} speakers {len(pool)} segments")
    print(f"dev-val: {len(val.speakers)} speakers {len(val)} segments {len(trials_val)} trials")
    print(f"dev-test: {len(test.speakers)} speakers {len(test)} segments {len(trials_test)} trials")
    for fraction, sub in subsets:
        C.write_manifest(prepared(settings, f"train-{frac_tag(fraction)}.tsv"), sub.segments)
        print(f"subset {frac_tag(fraction)}: {len(sub.speakers)} speakers {len(sub)} segments")
    if check:
        fractions = sorted(set(C.SUBSET_FRACTIONS) | {f for f, _ in subsets})
        chain = [(f, C.select_subset(pool, f).speakers) for f in fractions]
        for (fa, a), (fb, b) in zip(chain, chain[1:]):
            if b[:len(a)] != a:
                raise CliError(f"prefix property violated between {frac_tag(fa)} and {frac_tag(fb)}")
        sizes = " ".join(f"{frac_tag(f)}:{len(spk)}" for f, spk in chain)
        print(f"check: prefix property holds ({sizes})")


def _train_subset(settings: dict) -> C.PreparedDataset:
    path = require(prepared(settings, f"train-{frac_tag(settings['fraction'])}.tsv"),
                   "training subset")
    return C.PreparedDataset(C.read_manifest(path), C.TRAIN, settings["channel"])


def _load_init(path: str, feature_dim: int) -> EmbeddingModel:
    model, _, _ = load_checkpoint(require(path, "checkpoint"))
    if model.feature_dim != feature_dim:
        raise CliError(f"checkpoint {path} expects {model.feature_dim} features, data has {feature_dim}")
    return model


def cmd_train_si(settings: dict) -> str:
    data = _train_subset(settings)
    rng = stage_rng(settings, "train-si")
    mode = settings["mode"]
    if mode not in ("scratch", "finetune"):
        raise CliError(f"mode must be scratch or finetune, got {mode!r}")
    feature_dim = data.segments[0].features.shape[0]
    if mode == "finetune":
        init = _load_init(settings.get("init") or pretrained_path(settings), feature_dim)
    else:
        init = EmbeddingModel.init(make_rng(settings["seed"]), feature_dim=feature_dim)
    train, val = C.split_si_validation(data, rng)
    if not len(val):
        raise CliError("every speaker has a single segment; no SI validation split possible")
    cfg = TrainConfig(learning_rate=settings["learning_rate"], epochs=settings["epochs"],
                      batch_size=settings["batch_size"], init_mode=mode, seed=settings["seed"])
    speakers = data.speakers
    res = train_si(init, train.features(), C.speaker_labels(train.segments, speakers),
                   val.features(), C.speaker_labels(val.segments, speakers), cfg,
                   n_classes=len(speakers))
    name = f"si-{mode}-{settings['channel']}-{frac_tag(settings['fraction'])}"
    path = out_path(settings, "models", f"{name}.ckpt")
    save_checkpoint(path, res.model, res.head)
    print(f"{name}: best_epoch={res.best_epoch} val_error={res.best_val_error!r} -> {path}")
    return path


def _pair_arrays(pairs, index):
    try:
        Xa = np.vstack([index[p.seg_a].features for p in pairs])
        Xb = np.vstack([index[p.seg_b].features for p in pairs])
    except KeyError as exc:
        raise CliError(f"trial references unknown segment {exc.args[0]}") from None
    return Xa, Xb, np.array([p.label for p in pairs], dtype=np.float64)


def cmd_train_siamese(settings: dict) -> str:
    data = _train_subset(settings)
    rng = stage_rng(settings, "train-siamese")
    init = _load_init(settings.get("init") or pretrained_path(settings),
                      data.segments[0].features.shape[0])
    train_pairs = C.generate_pairs(data, settings["n_train_pairs"], rng)
    val_set = C.read_manifest(require(prepared(settings, "dev-val.tsv"), "validation manifest"))
    val_pairs = C.read_trials(require(prepared(settings, "trials-val.tsv"), "validation trials"))
    Xa, Xb, y = _pair_arrays(train_pairs, data.index())
    Va, Vb, vy = _pair_arrays(val_pairs, {s.segment_id: s for s in val_set})
    cfg = SiameseConfig(head_lr=settings["head_lr"], full_lr=settings["full_lr"],
                        epochs=settings["siamese_epochs"], batch_size=settings["batch_size"],
                        seed=settings["seed"])
    res = train_siamese(init, Xa, Xb, y, Va, Vb, vy, cfg)
    name = f"siamese-{settings['channel']}-{frac_tag(settings['fraction'])}"
    path = out_path(settings, "models", f"{name}.ckpt")
    save_checkpoint(path, res.model, siam_head=res.head)
    print(f"{name}: best_epoch={res.best_epoch} -> {path}")
    return path


def cmd_adapt(settings: dict) -> str:
    ch = settings["channel"]
    data = C.read_manifest(require(prepared(settings, "train.tsv"), "prepared training pool"))
    init = _load_init(settings.get("init") or pretrained_path(settings), data[0].features.shape[0])
    k = settings.get("k") or len({s.speaker_id for s in data})
    ccfg = ClusterConfig(k=k, method=settings["clustering"])
    cfg = AdaptConfig(technique=settings["technique"], clustering=ccfg,
                      max_iterations=settings["max_iterations"],
                      train_cfg=TrainConfig(learning_rate=settings["learning_rate"],
                                            epochs=settings["epochs"],
                                            batch_size=settings["batch_size"]),
                      seed=settings["seed"])
    # speaker ids feed only the purity column of the report
    run_dir = os.path.join(settings["out"], "adapt", f"{ch}-{cfg.technique}-{ccfg.method}")
    os.makedirs(run_dir, exist_ok=True)
    res = run_adapt_loop(init, data, cfg, checkpoint_dir=run_dir)
    # relative paths keep reports identical across output directories
    for rec in res.report.records:
        rec.checkpoint = os.path.relpath(rec.checkpoint, settings["out"])
    write_report(os.path.join(run_dir, "report.jsonl"), res.report)
    best = os.path.join(run_dir, "best.ckpt")
    save_checkpoint(best, res.model, res.head)
    for rec in res.report.records:
        print(f"iteration {rec.iteration}: E={rec.validation_error!r} purity={rec.cluster_purity!r}")
    print(f"stop={res.report.stop_reason} best_iteration={res.report.best_iteration} -> {best}")
    return best


def cmd_eval(settings: dict, baseline: bool = False) -> str:
    if baseline:
        ckpt = pretrained_path(settings)
    elif settings.get("checkpoint"):
        ckpt = settings["checkpoint"]
    else:
        raise CliError("eval needs --checkpoint or --baseline")
    model, _, siam = load_checkpoint(require(ckpt, "checkpoint"))
    backend = settings["backend"]
    if backend not in ("cosine", "siamese"):
        raise CliError(f"backend must be cosine or siamese, got {backend!r}")
    if backend == "siamese" and siam is None:
        raise CliError(f"checkpoint {ckpt} has no Siamese head")
    test = C.read_manifest(require(prepared(settings, "dev-test.tsv"), "test manifest"))
    pairs = C.read_trials(require(prepared(settings, "trials-test.tsv"), "test trials"))
    if test and test[0].features.shape[0] != model.feature_dim:
        raise CliError(f"checkpoint expects {model.feature_dim} features, "
                       f"test data has {test[0].features.shape[0]}")
    try:
        scored = score_trials(model, pairs, {s.segment_id: s for s in test}, backend, siam)
    except KeyError as exc:
        raise CliError(f"trial references unknown segment {exc.args[0]}") from None
    res = compute_eer(scored)
    stem = os.path.splitext(os.path.basename(ckpt))[0]
    if stem == "best":
        stem = os.path.basename(os.path.dirname(ckpt))
    name = f"{'baseline' if baseline else stem}-{settings['channel']}-{backend}"
    write_scores(out_path(settings, "scores", f"{name}.tsv"), scored)
    with open(out_path(settings, "scores", f"{name}.eer"), "w") as fh:
        fh.write(res.line() + "\n")
    print(res.line())
    return res.line()


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfdasv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--channel", choices=["I", "A", "D"])
        p.add_argument("--fraction", type=float, help="training subset fraction")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("generate", help="synthesize corpora and write channel manifests"))
    p = common(sub.add_parser("prepare", help="filter, split, subset and build trial lists"))
    p.add_argument("--check", action="store_true", help="verify the subset prefix property")
    p = common(sub.add_parser("train-si", help="speaker-identification training"))
    p.add_argument("--mode", choices=["scratch", "finetune"])
    p.add_argument("--init", help="checkpoint to fine-tune (default: pretrained)")
    p = common(sub.add_parser("train-siamese", help="two-phase Siamese fine-tuning"))
    p.add_argument("--init", help="checkpoint to start from (default: pretrained)")
    p = common(sub.add_parser("adapt", help="unsupervised cluster-then-train adaptation"))
    p.add_argument("--technique", choices=["I", "II"])
    p.add_argument("--clustering", choices=["kmeans", "ahc"])
    p.add_argument("--k", type=int, help="number of pseudo-speakers (default: true count)")
    p.add_argument("--init", help="checkpoint to adapt (default: pretrained)")
    p = common(sub.add_parser("eval", help="score test trials and print the EER"))
    p.add_argument("--backend", choices=["cosine", "siamese"])
    p.add_argument("--baseline", action="store_true", help="score the pretrained checkpoint")
    p.add_argument("--checkpoint", help="checkpoint to evaluate")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = load_settings(args)
        log_settings(settings, args.command)
        if args.command == "generate":
            cmd_generate(settings)
        elif args.command == "prepare":
            cmd_prepare(settings, check=args.check)
        elif args.command == "train-si":
            cmd_train_si(settings)
        elif args.command == "train-siamese":
            cmd_train_siamese(settings)
        elif args.command == "adapt":
            cmd_adapt(settings)
        else:
            cmd_eval(settings, baseline=args.baseline)
    except (CliError, ValueError, KeyError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"sfdasv {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
