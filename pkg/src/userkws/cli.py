"""Command-line entry point: ``userkws <command>`` or ``python -m userkws``.

Every command accepts ``--config FILE`` with ``key = value`` lines (keys are the
long flag names with dashes or underscores); explicit flags win.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import cost as C
from .audio import FeatureExtractor, FeatureStats
from .dataset import (SessionSpec, file_digest, get_vocabulary, index_gsc, make_session, pretrain_split,
                      read_manifest, speaker_split, write_manifest)
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .training import (ExperimentGrid, TrainConfig, adapt_speaker, build_set, evaluate, pretrain, run_grid,
                       write_learning_curve)

log = logging.getLogger("userkws")
SPLIT_NOTE = "record-level seeded split of pretraining speakers' utterances (not speaker-stratified)"


def _ints(text):
    return [int(v) for v in str(text).split(",") if v]


def _ks(text):
    return [None if v == "all" else int(v) for v in str(text).split(",") if v]


def _run_config(args):
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _featurizer(args, manifest):
    cache = args.cache or str(Path(manifest).parent / "features")
    return FeatureExtractor(cache_dir=None if cache == "none" else cache)


def _manifest(path):
    header, rows = read_manifest(path)
    root = header.get("root")
    if root is None:
        raise ValueError(f"{path}: manifest header lacks 'root'")
    return header, rows, Path(root)


# commands -----------------------------------------------------------------
def cmd_prepare_data(args):
    root = Path(args.root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    out = Path(args.out)
    index = index_gsc(root)
    if not index.records:
        raise ValueError(f"no GSC-style utterances under {root}")
    vocab, split_vocab = get_vocabulary(args.vocabulary), get_vocabulary(args.split_vocabulary)
    census = index.census
    write_manifest(out / "index.tsv", [(r, "all") for r in index.records],
                   {"root": root.resolve(), "utterances": len(index.records), "speakers": len(census),
                    "skipped": index.skipped})
    lines = [f"{s}\t{w}\t{n}" for s in sorted(census) for w, n in sorted(census[s].items())]
    (out / "census.tsv").write_text("speaker\tword\tcount\n" + "\n".join(lines) + "\n")

    summary = {"speakers": len(census), "utterances": len(index.records), "splits": {}}
    for threshold in _ints(args.thresholds):
        split = speaker_split(census, split_vocab, threshold)
        online = set(split.online)
        records = index.for_vocabulary(vocab)
        pre = [r for r in records if r.speaker not in online]
        rows = [(r, "online") for r in records if r.speaker in online]
        if len(pre) >= 2:
            tr, va = pretrain_split(pre, args.ratio, args.seed)
            rows += [(r, "pretrain-train") for r in tr] + [(r, "pretrain-val") for r in va]
        name = f"split_{vocab.name}_t{threshold}.tsv"
        write_manifest(out / name, rows, {
            "root": root.resolve(), "vocabulary": vocab.name, "split_vocabulary": split_vocab.name,
            "threshold": threshold, "seed": args.seed, "ratio": args.ratio, "assumption": SPLIT_NOTE,
            "online_speakers": len(split.online), "pretraining_speakers": len(split.pretraining),
            "total_speakers": len(census)})
        summary["splits"][name] = {"online": len(split.online), "pretraining": len(split.pretraining),
                                   "sha256": file_digest(out / name)}
    if args.features:
        featurize = FeatureExtractor(cache_dir=out / "features")
        for r in index.for_vocabulary(vocab):
            featurize(root / r.path)
    _write_json(out / "prepare.json", {"run_config": _run_config(args), **summary})
    print(json.dumps(summary, sort_keys=True))


def _select_speakers(rows, max_speakers, seed):
    speakers = sorted({r.speaker for r, _ in rows})
    if max_speakers and max_speakers < len(speakers):
        picked = np.random.default_rng(seed).choice(len(speakers), size=max_speakers, replace=False)
        keep = {speakers[i] for i in picked}
        rows = [(r, role) for r, role in rows if r.speaker in keep]
    return rows


def cmd_pretrain(args):
    header, rows, root = _manifest(args.manifest)
    vocab = get_vocabulary(header.get("vocabulary", args.vocabulary))
    rows = [(r, role) for r, role in rows if role.startswith("pretrain")]
    rows = _select_speakers(rows, args.max_speakers, args.seed)
    train_r = [r for r, role in rows if role == "pretrain-train"]
    val_r = [r for r, role in rows if role == "pretrain-val"]
    featurize = _featurizer(args, args.manifest)
    raw = [featurize(root / r.path) for r in train_r]
    stats = FeatureStats.compute(raw)
    train = build_set(train_r, vocab, featurize, stats, root)
    val = build_set(val_r, vocab, featurize, stats, root)
    config = ModelConfig(args.size, len(vocab), args.fusion, args.width)
    model = build_model(config, seed=args.seed, vocabulary=vocab.words, stats=stats,
                        speakers=sorted(set(train.speakers) | set(val.speakers)))
    tc = TrainConfig.pretraining(max_epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                                 patience=args.patience, seed=args.seed)
    history = pretrain(model, train, val, tc)
    out = Path(args.out)
    record = {"run_config": _run_config(args), "manifest_sha256": file_digest(args.manifest),
              "train_utterances": len(train), "val_utterances": len(val),
              "speakers": len(model.embedding), "history": history.to_dict()}
    save_checkpoint(model, out / "checkpoint.bin", extra={"run_config": _run_config(args),
                                                          "manifest_sha256": record["manifest_sha256"]})
    write_learning_curve(out / "learning_curve.csv", history.epochs)
    _write_json(out / "run.json", record)
    print(json.dumps({"best_epoch": history.best_epoch, "best_val_loss": history.best_val_loss,
                      "val_error": history.epochs[history.best_epoch - 1].val_error}))


def cmd_adapt(args):
    header, rows, root = _manifest(args.manifest)
    model = load_checkpoint(args.checkpoint)
    vocab = get_vocabulary(header.get("vocabulary", args.vocabulary))
    records = [r for r, _ in rows if r.speaker == args.speaker]
    if not records:
        raise ValueError(f"speaker {args.speaker!r} not in {args.manifest}")
    spec = SessionSpec(args.speaker, _ks(args.samples_per_class)[0], args.classes, args.seed)
    session = make_session(records, vocab, spec)
    featurize = _featurizer(args, args.manifest)
    sets = [build_set(s, vocab, featurize, model.stats, root) for s in (session.train, session.val, session.test)]
    tc = TrainConfig.online(max_epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                            patience=args.patience, seed=args.seed)
    result = adapt_speaker(model, args.speaker, *sets, policy=args.policy, config=tc, spec=spec)
    out = Path(args.out)
    stem = f"session_{args.speaker}_{args.policy}_s{args.seed}"
    _write_json(out / f"{stem}.json", {"run_config": _run_config(args),
                                       "manifest_sha256": file_digest(args.manifest),
                                       "checkpoint_sha256": file_digest(args.checkpoint),
                                       "result": result.to_dict()})
    write_learning_curve(out / f"{stem}.csv", result)
    if args.save_checkpoint:
        save_checkpoint(model, out / f"{stem}.bin", extra={"run_config": _run_config(args)})
    print(json.dumps({"test_error": result.test_error, "baseline_test_error": result.baseline_test_error}))


def cmd_evaluate(args):
    header, rows, root = _manifest(args.manifest)
    model = load_checkpoint(args.checkpoint)
    vocab = get_vocabulary(header.get("vocabulary", args.vocabulary))
    records = [r for r, role in rows if (args.role in (None, role)) and r.word in vocab]
    if args.speaker:
        records = [r for r in records if r.speaker == args.speaker]
    data = build_set(records, vocab, _featurizer(args, args.manifest), model.stats, root)
    error = evaluate(model, data, allow_unregistered=True)
    out = {"run_config": _run_config(args), "manifest_sha256": file_digest(args.manifest),
           "utterances": len(data), "error": error}
    if args.out:
        _write_json(Path(args.out) / "evaluate.json", out)
    print(json.dumps({"utterances": len(data), "error": error}))


def cmd_grid(args):
    header, rows, root = _manifest(args.manifest)
    vocab = header.get("vocabulary", args.vocabulary)
    speakers = args.speakers.split(",") if args.speakers else sorted({r.speaker for r, role in rows
                                                                       if role == "online"})
    if not speakers:
        raise ValueError("no online-learning speakers in the manifest")
    grid = ExperimentGrid(args.checkpoint, vocab, _ks(args.samples_per_class), _ints(args.classes),
                          args.policies.split(","), speakers, _ints(args.seeds),
                          TrainConfig.online(max_epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                                             patience=args.patience))
    records = [r for r, _ in rows if r.speaker in set(speakers)]
    table = run_grid(grid, records, _featurizer(args, args.manifest), root, args.out, args.jobs)
    _write_json(Path(args.out) / "grid.json", {"run_config": _run_config(args),
                                               "manifest_sha256": file_digest(args.manifest),
                                               "checkpoint_sha256": file_digest(args.checkpoint)})
    print((Path(args.out) / "grid.csv").read_text(), end="")
    return table


def cmd_cost(args):
    profile = C.SocProfile.from_file(args.profile) if args.profile else C.VEGA
    sizes = ["S", "M", "L"] if args.size == "all" else [args.size]
    policies = ["full", "classifier-only", "embedding-only"] if args.policy == "all" else [args.policy]
    reports = []
    for size in sizes:
        config = ModelConfig(size, args.classes, args.fusion, args.width)
        for policy in policies:
            reports.append(C.cost_report(config, C.UpdateStrategy(policy, args.samples, args.batch), profile))
    text = C.format_reports(reports, args.format)
    if args.format == "text":
        verdicts = [f"{r.size}/{r.policy}: {C.fits_on(profile, r)}" for r in reports]
        text += f"fits on {profile.name}: " + "; ".join(verdicts) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text, end="")


# parser -------------------------------------------------------------------
def _add_train_flags(p, epochs, batch, lr, patience):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch", type=int, default=batch)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--patience", type=int, default=patience)


def build_parser():
    parser = argparse.ArgumentParser(prog="userkws", description="speaker-adaptive keyword spotting")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="index GSC, write split manifests and the feature cache")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocabulary", default="GSC10")
    p.add_argument("--split-vocabulary", default="GSC10")
    p.add_argument("--thresholds", default="3,6,9")
    p.add_argument("--ratio", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--features", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("pretrain", help="pretrain backbone, embeddings and classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocabulary", default="GSC10")
    p.add_argument("--size", default="S", choices=["S", "M", "L"])
    p.add_argument("--fusion", default="mul")
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--max-speakers", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache", default=None)
    _add_train_flags(p, 40, 128, 1e-3, 10)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="one online-learning session for one speaker")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--speaker", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocabulary", default="GSC10")
    p.add_argument("--policy", default="embedding-only")
    p.add_argument("--samples-per-class", default="4")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache", default=None)
    p.add_argument("--save-checkpoint", action="store_true")
    _add_train_flags(p, 40, 10, 1e-5, 5)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", help="top-1 error of a checkpoint on manifest records")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocabulary", default="GSC10")
    p.add_argument("--role", default=None)
    p.add_argument("--speaker", default=None)
    p.add_argument("--cache", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid", help="few-shot grid over samples per class, classes, policies")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocabulary", default="GSC10")
    p.add_argument("--samples-per-class", default="4,all")
    p.add_argument("--classes", default="10")
    p.add_argument("--policies", default="embedding-only")
    p.add_argument("--speakers", default=None)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--cache", default=None)
    _add_train_flags(p, 40, 10, 1e-5, 5)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("cost", help="parameters, FLOPs, memory and energy per update strategy")
    p.add_argument("--size", default="S", choices=["S", "M", "L", "all"])
    p.add_argument("--policy", default="embedding-only",
                   choices=["full", "classifier-only", "embedding-only", "backbone-only", "all"])
    p.add_argument("--samples", type=int, default=40)
    p.add_argument("--batch", type=int, default=10)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--fusion", default="mul")
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--profile", default=None)
    p.add_argument("--format", default="text", choices=["text", "csv"])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_cost)

    for sp in sub.choices.values():
        sp.add_argument("--config", default=None, help="key = value file; flags override it")
    return parser


def read_config_file(path):
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, _, value = (s.strip() for s in line.partition("="))
            values[key.replace("-", "_")] = value
    return values


def _bool(text):
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sp = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sp._actions}
        defaults = {}
        for key, value in read_config_file(args.config).items():
            if key not in known:
                raise ValueError(f"{args.config}: unknown key {key!r} for {args.command}")
            action = known[key]
            if action.nargs == 0:  # on/off switches
                defaults[key] = _bool(value)
            else:
                defaults[key] = action.type(value) if action.type else value
            if action.choices and defaults[key] not in action.choices:
                raise ValueError(f"{args.config}: {key} must be one of {list(action.choices)}")
        sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _message(exc):
    if isinstance(exc, OSError) and exc.filename is not None:
        return f"{exc.strerror or 'I/O error'}: {exc.filename}"
    if isinstance(exc, KeyError) and exc.args:
        return str(exc.args[0])
    return str(exc)


def main(argv=None):
    try:
        args = parse_args(argv)
    except ValueError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, KeyError, FileNotFoundError, OSError, FloatingPointError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": _message(exc)}), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
