"""Command-line interface: synth, train, eval, sweep, gradcheck.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence.  Failures print a single machine-parsable line to stderr.

PHRASEGROUND_THREADS (default 1) caps the numeric library's thread count;
forward/backward math is sequential either way, so results on one machine
are reproducible run to run.
"""

from __future__ import annotations

import os

_threads = os.environ.get("PHRASEGROUND_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import apply_overrides, dataclass_from_dict, load_config_file, write_json
from .data import (
    SPLITS,
    SyntheticConfig,
    build_world,
    generate_synthetic,
    load_manifest,
    load_vocab,
    save_manifest,
    save_vocab,
)
from .errors import ConfigError, DataError, NumericError
from .evaluate import collect_phrase_set, report
from .model import ModelConfig, ModelParams, gradcheck_model
from .optim import SEED_MODEL, TrainConfig, seeded_rng, train

SWEEP_GRID = (0.0, 0.0312, 0.0625, 0.125, 0.25, 0.5, 1.0)


def _load_config(args) -> dict:
    cfg = load_config_file(args.config) if args.config else {}
    return apply_overrides(cfg, getattr(args, "set", None))


def _require(section: dict, key: str, where: str):
    if key not in section or section[key] in (None, ""):
        raise ConfigError(f"{where}.{key} is required")
    return section[key]


def _build_model_config(model_section: dict, vocab_size: int, feature_dim: int,
                        batchnorm: bool) -> ModelConfig:
    section = dict(model_section or {})
    for key in ("vocab_size", "feature_dim", "batchnorm"):
        if key in section:
            raise ConfigError(f"model.{key} is derived from the data and regime; remove it")
    section.update(vocab_size=vocab_size, feature_dim=feature_dim, batchnorm=batchnorm)
    return dataclass_from_dict(ModelConfig, section, "model").validate()


def _train_once(cfg: dict, run_dir: Path):
    """Shared by cmd_train and cmd_sweep: one full training run into run_dir."""
    paths = cfg.get("paths", {})
    train_path = Path(_require(paths, "train_manifest", "paths"))
    val_path = Path(_require(paths, "val_manifest", "paths"))
    train_cfg = dataclass_from_dict(TrainConfig, cfg.get("train", {}), "train").resolve()

    train_manifest = load_manifest(train_path)
    vocab_name = paths.get("vocab") or (
        train_path.parent / (train_manifest.vocab_file or "vocab.json"))
    vocab = load_vocab(vocab_name)
    train_manifest = load_manifest(train_path, vocab)
    val_manifest = load_manifest(val_path, vocab)

    model_cfg = _build_model_config(cfg.get("model"), vocab.size,
                                    train_manifest.feature_dim, train_cfg.batchnorm)
    model = ModelParams.initialize(model_cfg, seeded_rng(train_cfg.seed, SEED_MODEL))
    result = train(train_manifest, val_manifest, train_cfg, model)

    run_dir.mkdir(parents=True, exist_ok=True)
    echo = {"model": {k: v for k, v in vars(model_cfg).items()},
            "paths": {k: str(v) for k, v in paths.items()},
            "train": dataclasses.asdict(train_cfg)}
    write_json(run_dir / "config.json", echo)
    with open(run_dir / "metrics.jsonl", "w") as fh:
        for record in result.metrics:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    ckpt.save_checkpoint(run_dir / "checkpoint.bin", result.model, result.adam,
                         echo, result.metrics)
    return result, echo


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    synth = dict(cfg.get("synth", {}))
    out_dir = args.out_dir or synth.pop("out_dir", None)
    if not out_dir:
        raise ConfigError("an output directory is required (--out-dir or synth.out_dir)")
    scfg = dataclass_from_dict(SyntheticConfig, synth, "synth").validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = build_world(scfg)
    save_vocab(world.vocab, out / "vocab.json")
    for split in SPLITS:
        manifest = generate_synthetic(scfg, split, world)
        save_manifest(manifest, out / f"{split}.jsonl")
    write_json(out / "synth_config.json", dataclasses.asdict(scfg))
    print(f"wrote {', '.join(s + '.jsonl' for s in SPLITS)} and vocab.json to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    run_dir = Path(_require(cfg.get("paths", {}), "run_dir", "paths"))
    result, _ = _train_once(cfg, run_dir)
    print(f"best epoch {result.best_epoch}: val_accuracy {result.best_val_accuracy:.4f} "
          f"({run_dir / 'checkpoint.bin'})")
    return 0


def cmd_eval(args) -> int:
    loaded = ckpt.load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    train_phrases = None
    if args.train_manifest:
        train_phrases = collect_phrase_set(load_manifest(args.train_manifest).samples)
    rep = report(manifest.samples, loaded.model, constraint=args.constraint,
                 train_phrases=train_phrases)
    payload = rep.to_dict()
    if args.out:
        write_json(args.out, payload)
    else:
        print(json.dumps(payload, sort_keys=True, indent=2))
    print(f"accuracy {rep.overall_accuracy:.4f} over {rep.evaluated_phrases} phrases "
          f"(upper bound {rep.proposal_upperbound:.4f})", file=sys.stderr)
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    paths = cfg.get("paths", {})
    out_dir = Path(args.out_dir or _require(paths, "sweep_dir", "paths"))
    if args.fractions is None:
        fractions = SWEEP_GRID
    else:
        try:
            fractions = tuple(float(f) for f in args.fractions.split(","))
        except ValueError as exc:
            raise ConfigError(f"--fractions: {exc}") from exc
    test_path = paths.get("test_manifest")
    test_manifest = load_manifest(test_path) if test_path else None

    rows = []
    for fraction in fractions:
        run_cfg = json.loads(json.dumps(cfg))  # deep copy, keeps the base intact
        tsec = run_cfg.setdefault("train", {})
        tsec["supervision_fraction"] = fraction
        tsec["mode"] = "unsup" if fraction == 0.0 else "semi"
        run_dir = out_dir / f"frac_{fraction:g}"
        result, echo = _train_once(run_cfg, run_dir)
        test_acc = ""
        if test_manifest is not None:
            test_acc = report(test_manifest.samples, result.model).overall_accuracy
        rows.append({"supervision_fraction": fraction,
                     "mode": tsec["mode"],
                     "att_loss_weight": echo["train"]["att_loss_weight"],
                     "best_epoch": result.best_epoch,
                     "val_accuracy": result.best_val_accuracy,
                     "test_accuracy": test_acc})

    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "sweep.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {csv_path}")
    return 0


def cmd_gradcheck(args) -> int:
    modes = ("unsup", "semi") if args.mode == "both" else (args.mode,)
    failed = False
    for mode in modes:
        results = gradcheck_model(
            mode, vocab_size=args.vocab, proposals=args.proposals,
            feature_dim=args.feature_dim, embed_dim=args.embed,
            hidden_dim=args.hidden, attn_hidden_dim=args.attn_hidden,
            rec_dim=args.rec_dim, dec_hidden_dim=args.dec_hidden,
            batch=args.batch, seed=args.seed, step=args.step, tol=args.tol)
        for r in results:
            print(f"{mode:6s} {r.group:12s} max_rel_err={r.max_rel_err:.3e} "
                  f"{'PASS' if r.passed else 'FAIL'}")
            failed = failed or not r.passed
    if failed:
        raise NumericError("gradient check failed; see report above")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phraseground",
        description="Ground textual phrases onto bounding-box proposals.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable; overrides the file)")

    p = sub.add_parser("synth", help="generate the synthetic dataset splits")
    add_config(p)
    p.add_argument("--out-dir", help="directory for manifests and vocab")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a run directory")
    add_config(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="write the report JSON here instead of stdout")
    p.add_argument("--constraint", action="store_true",
                   help="assign distinct boxes to the phrases of a sentence")
    p.add_argument("--train-manifest",
                   help="training manifest for novel-phrase detection")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="train/eval across supervision fractions")
    add_config(p)
    p.add_argument("--out-dir", help="sweep output directory (else paths.sweep_dir)")
    p.add_argument("--fractions",
                   help=f"comma-separated fractions (default {','.join(map(str, SWEEP_GRID))})")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training graphs")
    p.add_argument("--mode", choices=("unsup", "semi", "full", "both"), default="both")
    p.add_argument("--vocab", type=int, default=10)
    p.add_argument("--proposals", type=int, default=4)
    p.add_argument("--feature-dim", type=int, default=6)
    p.add_argument("--embed", type=int, default=8)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--attn-hidden", type=int, default=8)
    p.add_argument("--rec-dim", type=int, default=8)
    p.add_argument("--dec-hidden", type=int, default=8)
    p.add_argument("--batch", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def _fail(code: int, kind: str, exc: Exception) -> int:
    print(f'error kind={kind} exit={code} msg="{exc}"', file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        return _fail(2, "config", exc)
    except DataError as exc:
        return _fail(3, "data", exc)
    except NumericError as exc:
        return _fail(4, "numeric", exc)


if __name__ == "__main__":
    raise SystemExit(main())
