"""Command-line entry point: ``python -m pdhybrid <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical failure (divergence, failed gradient check).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .dataio import (FormatError, load_checkpoint, read_manifest, read_recording, read_segments,
                     save_checkpoint, write_csv, write_json, write_segments)
from .evaluation import check_plan, make_kfold, make_loocv, report_from_predictions
from .model import HybridConfig
from .preprocess import (MONTAGES, TARGET_FS, MontageError, PreprocessConfig, SegmentBatch,
                         get_montage, preprocess_recording, select_channels)
from .synth import SynthSpec, synth_generate
from .training import (DivergenceError, HyperparamSpace, TrainConfig,
                       crossval_validation_objective, random_search, run_ablation, run_crossval,
                       select_best_fold_model)

log = logging.getLogger("pdhybrid")

DATA_ENV = "PDHYBRID_DATA"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
STRATEGIES = ("kfold10", "loocv")
MIN_RECORDING_S = 2.0
SUMMARY_NAME = "summary.json"


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# configuration


MODEL_KEYS = {f.name for f in fields(HybridConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
RUN_KEYS = {"split_seed"}


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_flat_config(path) -> dict:
    """A JSON object, or ``key = value`` / ``key: value`` lines (``#`` comments)."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text()
    if text.lstrip().startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    else:
        doc = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            sep = "=" if "=" in line else ":"
            if sep not in line:
                raise UsageError(f"{path}:{n}: expected 'key = value'")
            k, v = line.split(sep, 1)
            doc[k.strip()] = _parse_value(v)
    if not isinstance(doc, dict) or any(isinstance(v, dict) for v in doc.values()):
        raise UsageError(f"{path}: config must be a flat key/value document")
    return doc


def resolve_config(path=None, overrides: list[str] | None = None) -> dict:
    """Merge config file and ``--set key=value`` overrides into validated configs."""
    flat = read_flat_config(path) if path else {}
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        flat[k.strip()] = _parse_value(v)
    unknown = set(flat) - MODEL_KEYS - TRAIN_KEYS - RUN_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    try:
        model = HybridConfig(**{k: v for k, v in flat.items() if k in MODEL_KEYS})
        train = TrainConfig(**{k: v for k, v in flat.items() if k in TRAIN_KEYS})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    split_seed = int(flat.get("split_seed", train.seed))
    return {"model": model, "train": train, "split_seed": split_seed}


def config_record(cfg: dict) -> dict:
    return {"model": cfg["model"].to_dict(), "train": cfg["train"].to_dict(),
            "split_seed": cfg["split_seed"]}


# ----------------------------------------------------------------------------
# preprocessed corpora on disk


def load_corpus(data_dir) -> tuple[SegmentBatch, dict]:
    """Concatenate the segment files listed in ``summary.json``; return batch and provenance."""
    data_dir = Path(data_dir)
    summary_path = data_dir / SUMMARY_NAME
    if not summary_path.exists():
        raise FileNotFoundError(f"no {SUMMARY_NAME} in {data_dir} (run the preprocess command first)")
    summary = json.loads(summary_path.read_text())
    batches, digest = [], hashlib.sha256()
    for entry in summary["subjects"]:
        p = data_dir / entry["file"]
        if not p.exists():
            raise FileNotFoundError(f"segment file listed in summary is missing: {p}")
        digest.update(p.read_bytes())
        batches.append(read_segments(p))
    if not batches:
        raise FormatError(f"{data_dir}: corpus has no segments")
    return SegmentBatch.concat(batches), {"n_subjects": len(batches), "segments_sha256": digest.hexdigest()}


def _data_dir(args) -> Path:
    d = args.data or os.environ.get(DATA_ENV)
    if not d:
        raise UsageError(f"--data not given and ${DATA_ENV} is unset")
    return Path(d)


# ----------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    doc = read_flat_config(args.spec) if args.spec else {}
    names = {f.name for f in fields(SynthSpec)}
    unknown = set(doc) - names
    if unknown:
        raise UsageError(f"unknown synth spec keys: {sorted(unknown)}")
    try:
        spec = SynthSpec(**doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth spec: {exc}") from exc
    manifest = synth_generate(spec, args.out)
    write_json({"command": "synth", "spec": spec.to_dict(), "content_hash": manifest.content_hash,
                "n_recordings": len(manifest.entries)}, Path(args.out) / "synth.json")
    print(f"wrote {len(manifest.entries)} recordings to {args.out} (hash {manifest.content_hash[:16]})")
    return EXIT_OK


def _ica_reject(text: str | None):
    if not text:
        return None
    try:
        return tuple(sorted({int(t) for t in text.split(",") if t.strip()}))
    except ValueError as exc:
        raise UsageError(f"--ica-reject expects comma-separated integers, got {text!r}") from exc


def cmd_preprocess(args) -> int:
    manifest = read_manifest(args.input, verify=True)
    montage_name = args.montage or manifest.montage
    montage = get_montage(montage_name)
    cfg = PreprocessConfig(montage=montage_name, ica_reject=_ica_reject(args.ica_reject),
                           standardize=not args.no_standardize)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    subjects, skipped = [], []
    for path in manifest.paths:
        rec = read_recording(path)
        if rec.duration_s < MIN_RECORDING_S:
            log.warning("skipping %s: %.3f s is shorter than %.1f s", rec.subject_id, rec.duration_s,
                        MIN_RECORDING_S)
            skipped.append({"subject_id": rec.subject_id, "reason": f"shorter than {MIN_RECORDING_S} s"})
            continue
        zero_filled = select_channels(rec, montage).missing
        batch = preprocess_recording(rec, cfg)
        name = f"{rec.subject_id}.seg"
        write_segments(batch, out / name)
        subjects.append({"subject_id": rec.subject_id, "label": rec.label, "medication": rec.medication,
                         "source_fs_hz": float(rec.fs_hz), "n_segments": len(batch),
                         "zero_filled": list(zero_filled), "file": name})
    summary = {"command": "preprocess", "source_manifest_hash": manifest.content_hash,
               "config": {**asdict(cfg), "ica_reject": list(cfg.ica_reject or [])},
               "fs_hz": TARGET_FS, "n_segments": sum(s["n_segments"] for s in subjects),
               "subjects": subjects, "skipped": skipped}
    write_json(summary, out / SUMMARY_NAME)
    filled = sorted({c for s in subjects for c in s["zero_filled"]})
    print(f"{len(subjects)} subjects, {summary['n_segments']} segments at {TARGET_FS} Hz; "
          f"zero-filled: {', '.join(filled) if filled else 'none'}; skipped: {len(skipped)}")
    return EXIT_OK


def _plan(strategy: str, batch: SegmentBatch, seed: int):
    if strategy == "kfold10":
        plan = make_kfold(batch, 10, seed)
    elif strategy == "loocv":
        plan = make_loocv(batch, seed)
    else:
        raise UsageError(f"unknown strategy {strategy!r}")
    check_plan(plan, batch)
    return plan


def _confusion_csv(cm, path) -> None:
    write_csv(cm.rows(), ["true\\pred", "PD", "HC"], path)


def write_crossval_outputs(res, plan, batch, cfg: dict, provenance: dict, out: Path) -> dict:
    """Aggregate report, per-fold reports, curve and confusion CSVs, best checkpoint."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "folds").mkdir(exist_ok=True)
    (out / "curves").mkdir(exist_ok=True)
    best = select_best_fold_model(res.folds)
    record = config_record(cfg)
    per_fold = []
    for r, pf in zip(res.folds, res.segment.per_fold):
        te = r.test_index
        entry = {**pf, "test_subjects": sorted(set(batch.subject_ids[te].tolist()))}
        per_fold.append(entry)
        write_json({"config": record, "strategy": plan.strategy, **entry},
                   out / "folds" / f"fold_{r.fold:03d}.json")
        write_csv([[c["epoch"], c["train_loss"], c["val_loss"]] for c in r.curves],
                  ["epoch", "train_loss", "val_loss"], out / "curves" / f"fold_{r.fold:03d}.csv")
    report = {
        "command": "crossval", "strategy": plan.strategy, "config": record, "data": provenance,
        "segment": {k: v for k, v in res.segment.to_dict().items() if k not in ("per_fold", "curves")},
        "subject": {k: v for k, v in res.subject.to_dict().items() if k not in ("per_fold", "curves")},
        "per_fold": per_fold, "best_fold": best.fold, "plan": plan.to_dict(),
    }
    write_json(report, out / "report.json")
    _confusion_csv(res.segment.confusion, out / "confusion_segment.csv")
    _confusion_csv(res.subject.confusion, out / "confusion_subject.csv")
    write_csv([[i, batch.subject_ids[i], int(batch.labels[i]), float(res.test_probs[i])]
               for i in range(len(batch)) if np.isfinite(res.test_probs[i])],
              ["segment", "subject_id", "label", "prob_pd"], out / "predictions.csv")
    save_checkpoint(best.model, out / "best.ckpt",
                    extra={"fold": best.fold, "strategy": plan.strategy, "config": record})
    return report


def cmd_crossval(args) -> int:
    cfg = resolve_config(args.config, args.set)
    batch, prov = load_corpus(_data_dir(args))
    plan = _plan(args.strategy, batch, cfg["split_seed"])
    log.info("%s: %d folds over %d segments", plan.strategy, len(plan.folds), len(batch))
    res = run_crossval(cfg["model"], cfg["train"], plan, batch, jobs=args.jobs, keep_models=False,
                       on_fold=lambda r: log.info("fold %d done, val acc %.3f", r.fold, r.val_accuracy))
    report = write_crossval_outputs(res, plan, batch, cfg, prov, Path(args.out))
    seg, subj = report["segment"]["metrics"], report["subject"]["metrics"]
    print(f"{plan.strategy}: segment accuracy {seg['accuracy']:.2f}%, subject accuracy {subj['accuracy']:.2f}%")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    if args.config:
        want = resolve_config(args.config, args.set)["model"].to_dict()
        have = model.config.to_dict()
        diff = sorted(k for k in want if want[k] != have[k])
        if diff:
            raise FormatError(f"checkpoint config differs from --config in {diff}")
    batch, prov = load_corpus(_data_dir(args))
    probs = model.predict_proba(batch.data.astype(model.dtype, copy=False))
    levels = ("segment", "subject") if args.level == "both" else (args.level,)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": "evaluate", "config": {"model": model.config.to_dict()},
           "checkpoint": {"sha256": hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest(),
                          "extra": extra},
           "data": prov}
    for level in levels:
        rep = report_from_predictions(level, batch.labels, probs, batch.subject_ids, model.config.threshold)
        d = rep.to_dict()
        doc[level] = {k: v for k, v in d.items() if k not in ("per_fold", "curves")}
        _confusion_csv(rep.confusion, out / f"confusion_{level}.csv")
        shown = ", ".join(f"{k} {v:.2f}%" for k, v in rep.metrics.items() if v is not None)
        print(f"{level}: {shown}")
    write_json(doc, out / "report.json")
    return EXIT_OK


ABLATION_COLUMNS = ["architecture", "accuracy", "sensitivity", "specificity", "precision", "recall", "f1",
                    "subject_accuracy", "tp", "fn", "fp", "tn"]


def write_ablation_outputs(rows: list[dict], plan, cfg: dict, provenance: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_csv([[r[c] if r[c] is not None else "" for c in ABLATION_COLUMNS] for r in rows], ABLATION_COLUMNS,
              out / "ablation.csv")
    write_json({"command": "ablation", "strategy": plan.strategy, "config": config_record(cfg),
                "data": provenance, "rows": rows}, out / "ablation.json")


def cmd_ablation(args) -> int:
    cfg = resolve_config(args.config, args.set)
    batch, prov = load_corpus(_data_dir(args))
    plan = _plan(args.strategy, batch, cfg["split_seed"])
    rows = run_ablation(batch, plan, cfg["train"], cfg["model"], jobs=args.jobs,
                        on_row=lambda r: log.info("%s: accuracy %.2f", r["architecture"], r["accuracy"]))
    write_ablation_outputs(rows, plan, cfg, prov, Path(args.out))
    for r in rows:
        print(f"{r['architecture']:<20} {r['accuracy']:.2f}%")
    return EXIT_OK


def cmd_search(args) -> int:
    cfg = resolve_config(args.config, args.set)
    batch, prov = load_corpus(_data_dir(args))
    plan = _plan(args.strategy, batch, cfg["split_seed"])

    def on_trial(t):
        log.info("trial %d: mean validation accuracy %.4f", t.index, t.score)

    best_m, best_t, trials = random_search(HyperparamSpace(), args.budget,
                                           crossval_validation_objective(plan, batch),
                                           seed=args.seed, base_model=cfg["model"],
                                           base_train=cfg["train"], on_trial=on_trial)
    doc = {"command": "search", "strategy": plan.strategy, "budget": args.budget, "seed": args.seed,
           "config": config_record(cfg), "data": prov, "trials": [asdict(t) for t in trials],
           "best": {"model": best_m.to_dict(), "train": best_t.to_dict()}}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(doc, out / "search.json")
        write_csv([[t.index, t.score, json.dumps(t.model_config, sort_keys=True),
                    json.dumps(t.train_config, sort_keys=True)] for t in trials],
                  ["trial", "mean_val_accuracy", "model_config", "train_config"], out / "trials.csv")
    for t in trials:
        print(f"trial {t.index}: mean validation accuracy {t.score:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all(seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pdhybrid", description=__doc__.splitlines()[0],
                                allow_abbrev=False)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_, allow_abbrev=False)
        sp.set_defaults(func=fn)
        return sp

    def config_flags(sp):
        sp.add_argument("--config", help="flat key/value file (JSON or 'key = value' lines) with "
                                         "model and training fields")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config field; repeatable")

    def data_flag(sp):
        sp.add_argument("--data", help=f"preprocessed corpus directory (default: ${DATA_ENV})")

    sp = add("synth", cmd_synth, "generate a synthetic EEG corpus")
    sp.add_argument("--spec", help="flat key/value file with synthetic-corpus fields")
    sp.add_argument("--out", required=True, help="output directory (created if missing)")

    sp = add("preprocess", cmd_preprocess, "filter, segment and standardize a raw corpus")
    sp.add_argument("--in", dest="input", required=True, help="corpus manifest.json")
    sp.add_argument("--montage", choices=sorted(MONTAGES), help="montage (default: the manifest's)")
    sp.add_argument("--out", required=True, help="output directory for segment files")
    sp.add_argument("--no-standardize", action="store_true", help="skip per-segment z-scoring")
    sp.add_argument("--ica-reject", help="comma-separated ICA component indices to remove")

    sp = add("crossval", cmd_crossval, "cross-validate the model on a preprocessed corpus")
    data_flag(sp)
    sp.add_argument("--strategy", choices=STRATEGIES, default="kfold10", help="fold scheme")
    config_flags(sp)
    sp.add_argument("--out", required=True, help="report directory")
    sp.add_argument("--jobs", type=int, default=1, help="parallel folds (results do not depend on it)")

    sp = add("evaluate", cmd_evaluate, "score a frozen checkpoint on a preprocessed corpus")
    sp.add_argument("--checkpoint", required=True, help="checkpoint file")
    data_flag(sp)
    sp.add_argument("--level", choices=("segment", "subject", "both"), default="segment",
                    help="aggregation level")
    config_flags(sp)
    sp.add_argument("--out", required=True, help="report directory")

    sp = add("ablation", cmd_ablation, "cross-validate the five-architecture ladder")
    data_flag(sp)
    sp.add_argument("--strategy", choices=STRATEGIES, default="kfold10", help="fold scheme")
    config_flags(sp)
    sp.add_argument("--out", required=True, help="report directory")
    sp.add_argument("--jobs", type=int, default=1, help="parallel folds")

    sp = add("search", cmd_search, "random hyperparameter search on validation accuracy")
    sp.add_argument("--budget", type=int, required=True, help="number of sampled configurations")
    data_flag(sp)
    sp.add_argument("--strategy", choices=STRATEGIES, default="kfold10", help="fold scheme")
    sp.add_argument("--seed", type=int, default=0, help="sampler seed")
    config_flags(sp)
    sp.add_argument("--out", help="optional report directory")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of every op and the full model")
    sp.add_argument("--seed", type=int, default=0, help="seed for inputs and sampled entries")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        if getattr(args, "budget", 1) < 1:
            raise UsageError("--budget must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, MontageError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
