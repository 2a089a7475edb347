"""``orthospot`` command line.

Exit codes: 0 ok, 2 configuration, 3 data, 4 checkpoint, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import load_config
from .dataset import (build_split, make_synthetic, pad_or_truncate, read_wav, scan_gscd, write_manifest,
                      write_wav)
from .errors import DatasetError, OrthospotError
from .evaluator import (TASKS, TaskResult, build_trials, compute_eer, extract_embeddings, score_trials,
                        write_eer_report, write_trial_dump)
from .frontend import mfcc, write_feature_dump
from .gradcheck import TOLERANCE, run_suite
from .model import ModelConfig, load_checkpoint
from .trainer import FeatureStore, derive_seed, fit

log = logging.getLogger("orthospot")


def load_split(cfg):
    if cfg.mode == "synthetic":
        return make_synthetic(cfg.synthetic_keywords, cfg.synthetic_speakers, cfg.synthetic_clips_per_pair,
                              derive_seed(cfg.seed, "split"))
    root = cfg.resolved_data_root()
    if not root:
        raise DatasetError("gscd mode needs data_root (or the ORTHOSPOT_DATA environment variable)")
    index = scan_gscd(root)
    return build_split(index, derive_seed(cfg.seed, "split"), cfg.partition, cfg.min_utterances,
                       cfg.excluded_words)


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.to_text())
    split = load_split(cfg)
    features = FeatureStore(cfg.feature_config(), cfg.dtype)
    start = time.perf_counter()
    result = fit(cfg.train_config(), split, cfg.model_sizes(), features, out, cfg.dtype)
    best = result.history[result.best_epoch - 1] if result.best_epoch else None
    print(f"trained {len(result.history)} epochs in {time.perf_counter() - start:.1f}s; "
          f"best epoch {result.best_epoch}"
          + (f" (val EER kws {best['val_eer_kws']:.4f}, sv {best['val_eer_sv']:.4f})" if best else ""))
    print(f"outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    split = load_split(cfg)
    model_config = ModelConfig(n_keywords=len(split.train_keyword_classes()),
                               n_speakers=len(split.train_speaker_classes()), dtype=cfg.dtype,
                               **cfg.model_sizes())
    params = load_checkpoint(args.checkpoint, model_config)
    clips = split.subset(args.split)
    features = FeatureStore(cfg.feature_config(), cfg.dtype)
    embeddings = dict(zip(TASKS, extract_embeddings(params, clips, features)))
    results = {}
    for task in TASKS:
        trials = build_trials(clips, task, cfg.eval_max_trials, np.random.default_rng(derive_seed(cfg.seed, "eval")))
        scores = score_trials(embeddings[task], trials)
        results[task] = TaskResult(compute_eer(scores, trials.targets), len(trials), int(trials.targets.sum()))
        if args.dump_trials:
            write_trial_dump(out / f"trials_{args.split}_{task}.tsv", clips, trials)
    txt, _ = write_eer_report(out / f"eer_{args.split}", results, args.split)
    print(Path(txt).read_text(), end="")
    return 0


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    results = run_suite(seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<22} max rel err {r.error:.3e}  ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks below {TOLERANCE:g} "
          f"in {time.perf_counter() - start:.1f}s")
    return 5 if failed else 0


def cmd_make_synthetic(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    split = make_synthetic(cfg.synthetic_keywords, cfg.synthetic_speakers, cfg.synthetic_clips_per_pair,
                           derive_seed(cfg.seed, "split"))
    if args.wav:
        for name in ("train", "validation", "test"):
            for clip in split.subset(name):
                path = out / "wav" / split.keyword_vocab[clip.keyword_id] / f"{split.speaker_vocab[clip.speaker_id]}_nohash_{clip.clip_id}.wav"
                path.parent.mkdir(parents=True, exist_ok=True)
                write_wav(path, clip.samples)
    write_manifest(split, out / "manifest.tsv")
    _print_split(split)
    return 0


def cmd_splits(args) -> int:
    cfg = load_config(args.config, args.set)
    root = args.root or cfg.resolved_data_root()
    if not root:
        raise DatasetError("no dataset root: pass --root or set ORTHOSPOT_DATA")
    seed = cfg.seed if args.seed is None else args.seed
    index = scan_gscd(root)
    summary = index.summary()
    print(f"scanned {summary['utterances']} utterances, {summary['words']} words, "
          f"{summary['speakers']} speakers ({summary['skipped']} skipped)")
    split = build_split(index, derive_seed(seed, "split"), cfg.partition, cfg.min_utterances, cfg.excluded_words)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(split, out)
    _print_split(split)
    return 0


def cmd_extract_features(args) -> int:
    cfg = load_config(args.config, args.set)
    samples = pad_or_truncate(read_wav(args.input))
    feats = mfcc(samples, cfg.feature_config()).frames
    write_feature_dump(args.out, feats)
    print(f"{args.out}: {feats.shape[0]} x {feats.shape[1]}")
    return 0


def _print_split(split) -> None:
    for name, info in split.summary().items():
        print(f"{name:<10} {info['utterances']:>7} utterances  {info['speakers']:>5} speakers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orthospot", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        return p

    p = with_config(sub.add_parser("train", help="train a model"))
    p.add_argument("--out", help="run directory (default: output_dir)")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("eval", help="EER of a checkpoint on one split"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p.add_argument("--out", help="report directory (default: output_dir)")
    p.add_argument("--dump-trials", action="store_true", help="write per-trial scores")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = with_config(sub.add_parser("make-synthetic", help="generate the synthetic corpus manifest"))
    p.add_argument("--out", help="output directory (default: output_dir)")
    p.add_argument("--wav", action="store_true", help="also write the clips as WAV files")
    p.set_defaults(func=cmd_make_synthetic)

    p = with_config(sub.add_parser("splits", help="scan Speech Commands v2 and write the split manifest"))
    p.add_argument("--root", help="dataset root (default: data_root / ORTHOSPOT_DATA)")
    p.add_argument("--seed", type=int, help="split seed (default: config seed)")
    p.add_argument("--out", required=True, help="manifest path")
    p.set_defaults(func=cmd_splits)

    p = with_config(sub.add_parser("extract-features", help="dump the MFCC matrix of one WAV file"))
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_features)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except OrthospotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
