"""Command-line workflow around the library.

One executable, one subcommand per stage: preprocess, split, train,
encode, predict, evaluate, subgroup, study (plan/export/analyze), serve,
selftest. Options resolve in three layers: built-in defaults, then a
JSON config file (--config), then explicit flags. Stochastic commands
refuse to run without a seed. Every output-writing command drops a
run-manifest JSON next to its outputs recording versions, the resolved
options, and input hashes; --deterministic omits the wall-clock stamp so
reruns are byte-identical.

Exit codes: 0 success, 1 bad usage or bad input schema, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class CliError(Exception):
    """Bad flags, bad config, or bad input files; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _require_file(opts, key) -> Path:
    if key not in opts or opts[key] is None:
        raise CliError(f"--{key.replace('_', '-')} is required")
    path = Path(opts[key])
    if not path.is_file():
        raise CliError(f"--{key.replace('_', '-')}: no such file: {path}")
    return path


def _out_dir(opts) -> Path:
    if "output_dir" not in opts:
        raise CliError("--output-dir is required")
    out = Path(opts["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_seed(opts) -> int:
    if "seed" not in opts:
        raise CliError("--seed is required for this command")
    return int(opts["seed"])


def _versions() -> dict:
    import numpy
    from importlib.metadata import PackageNotFoundError, version

    try:
        pkg = version("mammochrome")
    except PackageNotFoundError:
        pkg = "unknown"
    return {"mammochrome": pkg, "numpy": numpy.__version__,
            "python": sys.version.split()[0]}


def _run_manifest(out_dir, command, opts, inputs, outputs) -> None:
    manifest = {
        "command": command,
        "options": {k: v for k, v in sorted(opts.items())},
        "versions": _versions(),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": sorted(str(Path(p).relative_to(out_dir)) for p in outputs),
    }
    if not opts.get("deterministic"):
        from datetime import datetime, timezone
        manifest["timestamp"] = datetime.now(timezone.utc).isoformat()
    _write_json(Path(out_dir) / "run-manifest.json", manifest)


# -- option plumbing ------------------------------------------------------

def _common_flags(parser) -> None:
    parser.add_argument("--config", default=argparse.SUPPRESS,
                        help="JSON file with option values; flags override")
    parser.add_argument("--output-dir", default=argparse.SUPPRESS)
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    parser.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    parser.add_argument("--deterministic", action="store_true",
                        default=argparse.SUPPRESS,
                        help="omit timestamps so reruns are byte-identical")


def _merge_options(args: argparse.Namespace, known: set) -> dict:
    """defaults < config file < flags; unknown config fields are errors."""
    flags = vars(args).copy()
    flags.pop("_func", None)
    merged = {}
    if "config" in flags:
        cfg_path = Path(flags.pop("config"))
        if not cfg_path.is_file():
            raise CliError(f"--config: no such file: {cfg_path}")
        try:
            loaded = json.loads(cfg_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise CliError(f"config {cfg_path}: invalid JSON at line "
                           f"{e.lineno} column {e.colno}: {e.msg}") from None
        if not isinstance(loaded, dict):
            raise CliError(f"config {cfg_path}: expected a JSON object")
        for field in loaded:
            if field not in known:
                raise CliError(
                    f"config {cfg_path}: unknown field {field!r}")
        merged.update(loaded)
    merged.update(flags)
    return merged


def _tuple2(value) -> tuple:
    if isinstance(value, (list, tuple)):
        vals = [int(v) for v in value]
    else:
        vals = [int(v) for v in str(value).split(",")]
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2:
        raise CliError(f"expected 'H,W' pair, got {value!r}")
    return tuple(vals)


def _ratio_triple(value) -> tuple:
    vals = ([float(v) for v in value] if isinstance(value, (list, tuple))
            else [float(v) for v in str(value).split(",")])
    if len(vals) != 3:
        raise CliError(f"expected three ratios, got {value!r}")
    return tuple(vals)


# -- commands -------------------------------------------------------------

def cmd_preprocess(opts) -> int:
    from .imaging import ImagingError, RawImage, load_png16, preprocess, \
        quantize, write_gray_png
    from .pipeline import read_manifest, write_manifest

    manifest = _require_file(opts, "manifest")
    out = _out_dir(opts)
    h, w = _tuple2(opts.get("size", (64, 64)))
    root = Path(opts["image_root"]) if opts.get("image_root") else \
        manifest.parent
    records = read_manifest(manifest)
    kept, failures = [], []
    for rec in records:
        src = Path(rec.image_path)
        if not src.is_absolute():
            src = root / src
        try:
            cooked = preprocess(load_png16(src), h, w)
        except (ImagingError, OSError, ValueError) as e:
            failures.append({"key": list(rec.key), "image_path": str(src),
                             "error": f"{type(e).__name__}: {e}"})
            continue
        dest = out / rec.image_path
        dest.parent.mkdir(parents=True, exist_ok=True)
        write_gray_png(RawImage(width=w, height=h, bit_depth=16,
                                pixels=quantize(cooked.values, 16)), dest)
        kept.append(rec)
    write_manifest(kept, out / "manifest.jsonl")
    _write_json(out / "preprocess-report.json", {
        "target_size": [h, w], "n_input": len(records),
        "n_preprocessed": len(kept), "failures": failures})
    _run_manifest(out, "preprocess", opts, [manifest],
                  [out / "manifest.jsonl", out / "preprocess-report.json"])
    print(f"preprocessed {len(kept)}/{len(records)} images -> {out}")
    return EXIT_OK


def cmd_split(opts) -> int:
    from .pipeline import read_manifest, split_patients, write_manifest

    manifest = _require_file(opts, "manifest")
    seed = _require_seed(opts)
    out = _out_dir(opts)
    ratios = _ratio_triple(opts.get("ratios", (0.8, 0.1, 0.1)))
    records = read_manifest(manifest)
    parts = split_patients(records, ratios=ratios, seed=seed,
                           birads6_partition=opts.get("birads6", "test"))
    outputs = []
    for name in ("train", "val", "test"):
        path = out / f"{name}.jsonl"
        write_manifest(parts[name], path)
        outputs.append(path)
    counts = {name: len(parts[name]) for name in ("train", "val", "test")}
    _run_manifest(out, "split", opts, [manifest], outputs)
    print("split " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def _train_config(opts, seed):
    from .models import BackboneConfig, ChromaConfig, HeadConfig
    from .pipeline import TrainConfig

    widths = opts.get("backbone_widths", (16, 32, 64, 128))
    if isinstance(widths, str):
        widths = tuple(int(v) for v in widths.split(","))
    backbone = BackboneConfig(widths=tuple(widths))
    return TrainConfig(
        seed=seed,
        regime=opts["regime"],
        epochs=int(opts.get("epochs", 15)),
        batch_size=int(opts.get("batch_size", 16)),
        lr=float(opts.get("lr", 2e-3)),
        weight_decay=float(opts.get("weight_decay", 0.0)),
        input_size=_tuple2(opts.get("size", (64, 64))),
        chroma=ChromaConfig(depth=int(opts.get("chroma_depth", 2)),
                            base_channels=int(opts.get("chroma_base", 8))),
        backbone=backbone,
        head=HeadConfig(hidden=int(opts.get("head_hidden", 16)),
                        in_features=backbone.feature_dim))


def cmd_train(opts) -> int:
    from .pipeline import read_manifest, save_checkpoint, train_gray_baseline, \
        train_tdce

    train_manifest = _require_file(opts, "train_manifest")
    val_manifest = _require_file(opts, "val_manifest")
    seed = _require_seed(opts)
    out = _out_dir(opts)
    if "regime" not in opts:
        raise CliError("--regime is required")
    cfg = _train_config(opts, seed)
    trainer = {"tdce": train_tdce, "gray-baseline": train_gray_baseline}
    train_records = read_manifest(train_manifest)
    val_records = read_manifest(val_manifest)
    root = opts.get("image_root")
    result = trainer[cfg.regime](cfg, train_records, val_records,
                                 image_root=root,
                                 log=lambda e: print(
                                     f"epoch {e['epoch']}: loss "
                                     f"{e['train_loss']:.4f} val_auc "
                                     f"{e.get('val_auc', float('nan')):.4f}"))
    ckpt_path = out / "model.ckpt"
    save_checkpoint(result.checkpoint, ckpt_path)
    _write_json(out / "history.json", {
        "best_epoch": result.best_epoch, "history": result.history})
    _run_manifest(out, "train", opts, [train_manifest, val_manifest],
                  [ckpt_path, out / "history.json"])
    best = result.history[result.best_epoch]
    print(f"trained {cfg.regime}: best epoch {result.best_epoch} "
          f"val_auc {best.get('val_auc')}")
    return EXIT_OK


def cmd_encode(opts) -> int:
    from .imaging import load_png16, write_rgb_png
    from .models import HEAT_TABLE, apply_colormap, chroma_encode, \
        replicate_channels
    from .pipeline import TrainConfig, load_checkpoint, read_manifest

    manifest = _require_file(opts, "manifest")
    out = _out_dir(opts)
    mode = opts.get("mode", "tdce")
    if mode not in ("tdce", "colormap", "replicate"):
        raise CliError(f"--mode must be tdce, colormap, or replicate; "
                       f"got {mode!r}")
    encode = None
    checkpoint_paths = []
    if mode == "tdce":
        ckpt_file = _require_file(opts, "checkpoint")
        checkpoint_paths.append(ckpt_file)
        ck = load_checkpoint(ckpt_file)
        if ck.metadata.get("regime") != "tdce":
            raise CliError(
                f"checkpoint was trained as {ck.metadata.get('regime')!r}; "
                "chromatic encoding needs a tdce checkpoint")
        cfg = TrainConfig.from_dict(ck.metadata["train_config"])

        def encode(values):
            return chroma_encode(ck.params, cfg.chroma, values)
    elif mode == "colormap":
        def encode(values):
            return apply_colormap(values, HEAT_TABLE)
    else:
        encode = replicate_channels

    root = Path(opts["image_root"]) if opts.get("image_root") else \
        manifest.parent
    records = read_manifest(manifest)
    outputs = []
    for rec in records:
        src = Path(rec.image_path)
        if not src.is_absolute():
            src = root / src
        raw = load_png16(src)
        values = raw.pixels.astype(float) / float(2 ** raw.bit_depth - 1)
        rgb = encode(values)
        dest = out / rec.image_path
        dest.parent.mkdir(parents=True, exist_ok=True)
        write_rgb_png(rgb, dest)
        outputs.append(dest)
    _run_manifest(out, "encode", opts, [manifest] + checkpoint_paths, outputs)
    print(f"encoded {len(outputs)} images as {mode} -> {out}")
    return EXIT_OK


def cmd_predict(opts) -> int:
    from .pipeline import aggregate_breast, load_checkpoint, predict_views, \
        read_manifest, write_predictions_csv

    ckpt_file = _require_file(opts, "checkpoint")
    manifest = _require_file(opts, "manifest")
    out = _out_dir(opts)
    records = read_manifest(manifest)
    preds, failures = predict_views(load_checkpoint(ckpt_file), records,
                                    image_root=opts.get("image_root"))
    outputs = [out / "predictions.csv"]
    write_predictions_csv(preds, outputs[0])
    if opts.get("aggregate_breast"):
        outputs.append(out / "predictions-breast.csv")
        write_predictions_csv(aggregate_breast(preds), outputs[1])
    if failures:
        outputs.append(out / "predict-failures.json")
        _write_json(outputs[-1], {"failures": failures})
    _run_manifest(out, "predict", opts, [ckpt_file, manifest], outputs)
    print(f"scored {len(preds)} views "
          f"({len(failures)} unreadable) -> {out}")
    return EXIT_OK


def _score_arrays(rows):
    import numpy as np

    scores = np.array([r["score"] for r in rows], dtype=float)
    labels = np.array([r["label"] for r in rows], dtype=int)
    return scores, labels


def _eval_one(rows, threshold, n_resamples, seed):
    from .metrics import auc_value, bootstrap_ci, operating_metrics, \
        roc_auc, youden_threshold

    scores, labels = _score_arrays(rows)
    roc = roc_auc(scores, labels)
    ci = bootstrap_ci(rows, lambda rs: auc_value(*_score_arrays(rs)),
                      n_resamples=n_resamples, seed=seed)
    thr = youden_threshold(scores, labels) if threshold is None \
        else float(threshold)
    op = operating_metrics(scores, labels, thr)
    summary = {
        "n": len(rows),
        "n_pos": int(labels.sum()),
        "auc": roc.auc,
        "auc_ci": [ci.lower, ci.upper],
        "threshold": op.threshold,
        "sensitivity": op.sensitivity,
        "specificity": op.specificity,
        "accuracy": op.accuracy,
        "f1": op.f1,
    }
    return summary, roc, thr


def _write_roc_csv(roc, path) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, thr in roc.curve:
            writer.writerow([repr(float(fpr)), repr(float(tpr)),
                             repr(float(thr))])


def _paired_rows(rows_a, rows_b, what) -> None:
    key_a = [(r["patient_id"], i) for i, r in enumerate(rows_a)]
    if len(rows_a) != len(rows_b):
        raise CliError(f"{what}: prediction files differ in length "
                       f"({len(rows_a)} vs {len(rows_b)})")
    for ra, rb in zip(rows_a, rows_b):
        if ra["patient_id"] != rb["patient_id"] or ra["label"] != rb["label"]:
            raise CliError(f"{what}: prediction files are not aligned "
                           f"(row for {ra['patient_id']} vs "
                           f"{rb['patient_id']})")
    del key_a


def cmd_evaluate(opts) -> int:
    from .metrics import delong_paired, mcnemar
    from .pipeline import read_predictions_csv, to_metric_dicts

    pred_file = _require_file(opts, "predictions")
    seed = _require_seed(opts)
    out = _out_dir(opts)
    n_resamples = int(opts.get("n_resamples", 2000))
    threshold = opts.get("threshold")
    rows = to_metric_dicts(read_predictions_csv(pred_file))
    report = {}
    inputs = [pred_file]
    report["model"], roc, thr = _eval_one(rows, threshold, n_resamples, seed)
    _write_roc_csv(roc, out / "roc.csv")
    outputs = [out / "roc.csv", out / "evaluation.json"]

    if opts.get("baseline"):
        base_file = _require_file(opts, "baseline")
        inputs.append(base_file)
        rows_b = to_metric_dicts(read_predictions_csv(base_file))
        _paired_rows(rows, rows_b, "evaluate")
        report["baseline"], roc_b, thr_b = _eval_one(
            rows_b, threshold, n_resamples, seed)
        _write_roc_csv(roc_b, out / "roc-baseline.csv")
        outputs.append(out / "roc-baseline.csv")
        scores, labels = _score_arrays(rows)
        scores_b, _ = _score_arrays(rows_b)
        dl = delong_paired(scores, scores_b, labels)
        mc = mcnemar((scores >= thr).astype(int),
                     (scores_b >= thr_b).astype(int), labels)
        report["comparison"] = {
            "delong": {"auc_model": dl.auc_a, "auc_baseline": dl.auc_b,
                       "delta": dl.delta, "z": dl.z, "p": dl.p},
            "mcnemar_correctness": {"b": mc.b, "c": mc.c, "p": mc.p},
        }
    _write_json(out / "evaluation.json", report)
    _run_manifest(out, "evaluate", opts, inputs, outputs)
    print(f"model AUC {report['model']['auc']:.4f} "
          f"[{report['model']['auc_ci'][0]:.4f}, "
          f"{report['model']['auc_ci'][1]:.4f}]")
    if "comparison" in report:
        cmp = report["comparison"]["delong"]
        print(f"vs baseline: delta {cmp['delta']:+.4f}, "
              f"DeLong p={cmp['p']:.4g}")
    return EXIT_OK


def cmd_subgroup(opts) -> int:
    from .metrics import subgroup_eval
    from .pipeline import read_predictions_csv, to_metric_dicts

    pred_file = _require_file(opts, "predictions")
    base_file = _require_file(opts, "baseline")
    seed = _require_seed(opts)
    out = _out_dir(opts)
    selector = opts.get("by", "density-group")
    if selector not in ("density-group", "finding"):
        raise CliError(f"--by must be density-group or finding; "
                       f"got {selector!r}")
    rows = to_metric_dicts(read_predictions_csv(pred_file))
    rows_b = to_metric_dicts(read_predictions_csv(base_file))
    _paired_rows(rows, rows_b, "subgroup")
    results = subgroup_eval(
        rows, rows_b, selector,
        threshold=float(opts.get("threshold", 0.5)),
        n_resamples=int(opts.get("n_resamples", 2000)), seed=seed)
    def stats_dict(stats):
        return {"auc": stats.auc.point,
                "auc_ci": [stats.auc.lower, stats.auc.upper],
                "sensitivity": stats.sensitivity,
                "specificity": stats.specificity}

    payload = []
    for res in results:
        entry = {"name": res.name, "n_pos": res.n_pos, "n_neg": res.n_neg,
                 "evaluable": res.evaluable, "reason": res.reason}
        if res.evaluable:
            entry.update({
                "model": stats_dict(res.model_a),
                "baseline": stats_dict(res.model_b),
                "delta_auc": res.delta_auc, "delong_p": res.delong_p})
        payload.append(entry)
    _write_json(out / "subgroups.json", {"by": selector, "groups": payload})
    _run_manifest(out, "subgroup", opts, [pred_file, base_file],
                  [out / "subgroups.json"])
    for entry in payload:
        if entry["evaluable"]:
            print(f"{entry['name']}: model {entry['model']['auc']:.4f} "
                  f"baseline {entry['baseline']['auc']:.4f} "
                  f"delta {entry['delta_auc']:+.4f} p={entry['delong_p']:.4g}")
        else:
            print(f"{entry['name']}: not evaluable ({entry['reason']})")
    return EXIT_OK


def cmd_study_plan(opts) -> int:
    from .mrmc import build_plan, save_plan

    readers_file = _require_file(opts, "readers")
    cases_file = _require_file(opts, "cases")
    seed = _require_seed(opts)
    out = _out_dir(opts)
    readers = json.loads(readers_file.read_text(encoding="utf-8"))
    cases = json.loads(cases_file.read_text(encoding="utf-8"))
    if not isinstance(cases, list):
        raise CliError(f"{cases_file}: expected a JSON array of case ids")
    try:
        plan = build_plan(readers, cases, seed=seed,
                          washout_days=int(opts.get("washout_days", 28)))
    except (KeyError, TypeError, ValueError) as e:
        raise CliError(f"cannot build plan: {e}") from None
    save_plan(plan, out / "plan.json")
    _run_manifest(out, "study plan", opts, [readers_file, cases_file],
                  [out / "plan.json"])
    for slot in plan.readers:
        print(f"{slot.reader_id} ({slot.tier}): "
              + " -> ".join(slot.condition_order))
    return EXIT_OK


def cmd_study_export(opts) -> int:
    from .study_service import StudyStore

    if "store" not in opts:
        raise CliError("--store is required")
    store_dir = Path(opts["store"])
    if not store_dir.is_dir():
        raise CliError(f"--store: no such directory: {store_dir}")
    out = _out_dir(opts)
    store = StudyStore(store_dir)
    try:
        studies = sorted(store.state_dict()["studies"])
        study_id = opts.get("study_id")
        if study_id is None:
            if len(studies) != 1:
                raise CliError(
                    f"--study-id needed; store holds {studies or 'none'}")
            study_id = studies[0]
        csv_text = store.export_csv(study_id)
    finally:
        store.close()
    path = out / "ratings.csv"
    path.write_text(csv_text, encoding="utf-8")
    _run_manifest(out, "study export", opts,
                  [store_dir / "events.jsonl"], [path])
    print(f"exported {max(0, len(csv_text.strip().splitlines()) - 1)} "
          f"ratings -> {path}")
    return EXIT_OK


def _reference_from_csv(path) -> dict:
    import csv

    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["case_id", "label"]:
            raise CliError(f"{path}: expected header case_id,label")
        ref = {}
        for row in reader:
            if len(row) != 2 or row[1] not in ("0", "1"):
                raise CliError(f"{path}: bad row {row!r}")
            ref[row[0]] = int(row[1])
    return ref


def cmd_study_analyze(opts) -> int:
    from .glmm import SUBSETS
    from .mrmc import KappaUndefinedError, kappa_from_ratings, load_plan, \
        read_ratings_csv, reader_table, reading_time, trials_from_ratings
    from .mrmc import glmm_fit

    ratings_file = _require_file(opts, "ratings")
    ref_file = _require_file(opts, "reference")
    out = _out_dir(opts)
    ratings = read_ratings_csv(ratings_file)
    reference = _reference_from_csv(ref_file)
    inputs = [ratings_file, ref_file]
    tiers = None
    if opts.get("plan"):
        plan_file = _require_file(opts, "plan")
        inputs.append(plan_file)
        plan = load_plan(plan_file)
        tiers = {slot.reader_id: slot.tier for slot in plan.readers}
    try:
        table = reader_table(ratings, reference, tiers=tiers)
    except (KeyError, ValueError) as e:
        raise CliError(f"cannot tabulate ratings: {e}") from None

    conditions = sorted({r["condition"] for r in ratings})
    kappa = {}
    for cond in conditions:
        kappa[cond] = {}
        for scale in ("binary", "birads"):
            try:
                kappa[cond][scale] = kappa_from_ratings(
                    ratings, cond, scale=scale)
            except (KappaUndefinedError, ValueError) as e:
                kappa[cond][scale] = None
                kappa[cond][f"{scale}_unavailable"] = str(e)

    trials = trials_from_ratings(ratings, reference)
    glmm = {}
    for subset in SUBSETS:
        try:
            glmm[subset] = glmm_fit(trials, subset=subset).to_dict()
        except (ValueError, ArithmeticError) as e:
            glmm[subset] = {"error": str(e)}

    report = {
        "reader_rows": [vars(r).copy() for r in table.rows],
        "by_condition": table.by_condition,
        "by_tier": table.by_tier,
        "kappa": kappa,
        "glmm": glmm,
        "reading_time": reading_time(ratings),
    }
    _write_json(out / "study-report.json", report)
    _run_manifest(out, "study analyze", opts, inputs,
                  [out / "study-report.json"])
    for cond, stats in sorted(table.by_condition.items()):
        print(f"{cond}: sens {stats['sensitivity']:.3f} "
              f"spec {stats['specificity']:.3f}")
    for subset, fit in glmm.items():
        if "error" in fit:
            print(f"glmm[{subset}]: {fit['error']}")
            continue
        for name, coef in fit["coefficients"].items():
            if name.startswith("condition["):
                print(f"glmm[{subset}] {name}: beta "
                      f"{coef['estimate']:+.3f} p={coef['p']:.4g}")
    return EXIT_OK


def cmd_serve(opts) -> int:
    from .study_service import StudyStore, create_app

    if "store" not in opts:
        raise CliError("--store is required")
    store_dir = Path(opts["store"])
    tokens = None
    tokens_file = opts.get("tokens_file") or os.environ.get(
        "MAMMOCHROME_TOKENS")
    if tokens_file:
        tokens_path = Path(tokens_file)
        if not tokens_path.is_file():
            raise CliError(f"tokens file not found: {tokens_path}")
        tokens = json.loads(tokens_path.read_text(encoding="utf-8"))
        if not isinstance(tokens, dict):
            raise CliError(f"{tokens_path}: expected a JSON object "
                           "of reader_id -> token")
    override = opts.get("washout_override_days")
    store = StudyStore(store_dir,
                       washout_override_days=None if override is None
                       else int(override))
    app = create_app(store, tokens=tokens)
    host = opts.get("host", "127.0.0.1")
    port = int(opts.get("port", 8000))
    if opts.get("check"):
        n = len(store.state_dict()["studies"])
        print(f"store {store_dir} holds {n} studies; would listen on "
              f"{host}:{port}")
        store.close()
        return EXIT_OK
    import uvicorn

    uvicorn.run(app, host=host, port=port, log_level="info")
    return EXIT_OK


def cmd_selftest(opts) -> int:
    import numpy as np

    failures = []

    def check(name, fn):
        try:
            fn()
        except Exception as e:  # report every failed probe, then exit 2
            failures.append(name)
            print(f"FAIL - {name}: {type(e).__name__}: {e}")
        else:
            print(f"ok - {name}")

    def gradients():
        from . import diffcore as dc
        from . import models
        from .diffcore import ModelLoss, grad_check
        from .models import BackboneConfig, ChromaConfig, HeadConfig
        from .pipeline import TrainConfig, build_params

        backbone = BackboneConfig(widths=(4, 4, 8, 8))
        cfg = TrainConfig(
            seed=11, regime="tdce", epochs=1, batch_size=2, lr=1e-3,
            input_size=(16, 16),
            chroma=ChromaConfig(depth=1, base_channels=4),
            backbone=backbone,
            head=HeadConfig(hidden=4, in_features=backbone.feature_dim))
        params = build_params(cfg)
        rng = np.random.default_rng(3)
        x = rng.uniform(0.2, 0.8, size=(2, 1, 16, 16))
        y = np.array([0.0, 1.0])

        def forward(tape):
            pv = models.bind(params, tape)
            rgb = models.chroma_forward(cfg.chroma, pv, tape.var(x))
            feats = models.backbone_forward(cfg.backbone, pv, rgb)
            logits = models.head_forward(cfg.head, pv, feats)
            return dc.bce_with_logits(logits, y), pv

        report = grad_check(ModelLoss(forward), params, tolerance=1e-4,
                            h=1e-6)
        assert report.passed, f"max rel err {report.max_rel_err:.3e}"

    def auc_oracle():
        from .metrics import auc_value

        rng = np.random.default_rng(5)
        scores = rng.normal(size=60)
        labels = rng.integers(0, 2, size=60)
        labels[:2] = [0, 1]
        pos = scores[labels == 1]
        neg = scores[labels == 0]
        wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
        brute = wins / (len(pos) * len(neg))
        assert abs(auc_value(scores, labels) - brute) < 1e-12

    def youden_oracle():
        from .metrics import operating_metrics, youden_threshold

        rng = np.random.default_rng(6)
        scores = rng.normal(size=50)
        labels = rng.integers(0, 2, size=50)
        labels[:2] = [0, 1]
        best = max(
            (operating_metrics(scores, labels, t).sensitivity
             + operating_metrics(scores, labels, t).specificity - 1.0)
            for t in np.concatenate([scores, [scores.max() + 1.0]]))
        got = youden_threshold(scores, labels)
        op = operating_metrics(scores, labels, got)
        assert abs((op.sensitivity + op.specificity - 1.0) - best) < 1e-12

    def mcnemar_exact():
        from .metrics import mcnemar

        a = np.array([1] * 10 + [1] * 5)
        b = np.array([0] * 10 + [1] * 5)
        res = mcnemar(a, b, np.ones(15, dtype=int))
        assert res.p == 0.001953125, res.p

    def fleiss_perfect():
        from .mrmc import fleiss_kappa

        matrix = [["yes"] * 4, ["no"] * 4, ["yes"] * 4]
        assert fleiss_kappa(matrix) == 1.0

    def delong_identical():
        from .metrics import delong_paired

        rng = np.random.default_rng(7)
        scores = rng.normal(size=40)
        labels = rng.integers(0, 2, size=40)
        labels[:2] = [0, 1]
        res = delong_paired(scores, scores, labels)
        assert res.p == 1.0 and res.delta == 0.0

    check("gradient-check", gradients)
    check("auc-pairwise-oracle", auc_oracle)
    check("youden-exhaustive", youden_oracle)
    check("mcnemar-exact", mcnemar_exact)
    check("fleiss-perfect", fleiss_perfect)
    check("delong-identical", delong_identical)
    if failures:
        print(f"{len(failures)} selftest probes failed")
        return EXIT_RUNTIME
    print("selftest passed")
    return EXIT_OK


# -- parser ---------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="mammochrome",
                     description="chromatic-encoding screening workflow")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def command(name, func, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(_func=func)
        _common_flags(p)
        return p

    p = command("preprocess", cmd_preprocess,
                help="segment, crop, and resize raw screening PNGs")
    p.add_argument("--manifest", default=argparse.SUPPRESS)
    p.add_argument("--image-root", default=argparse.SUPPRESS)
    p.add_argument("--size", default=argparse.SUPPRESS,
                   help="target H,W (default 64,64)")

    p = command("split", cmd_split,
                help="patient-grouped train/val/test manifests")
    p.add_argument("--manifest", default=argparse.SUPPRESS)
    p.add_argument("--ratios", default=argparse.SUPPRESS,
                   help="train,val,test fractions (default 0.8,0.1,0.1)")
    p.add_argument("--birads6", choices=["train", "val", "test", "drop"],
                   default=argparse.SUPPRESS)

    p = command("train", cmd_train, help="fit a model on preprocessed views")
    p.add_argument("--regime", choices=["tdce", "gray-baseline"],
                   default=argparse.SUPPRESS)
    p.add_argument("--train-manifest", default=argparse.SUPPRESS)
    p.add_argument("--val-manifest", default=argparse.SUPPRESS)
    p.add_argument("--image-root", default=argparse.SUPPRESS)
    p.add_argument("--epochs", type=int, default=argparse.SUPPRESS)
    p.add_argument("--batch-size", type=int, default=argparse.SUPPRESS)
    p.add_argument("--lr", type=float, default=argparse.SUPPRESS)
    p.add_argument("--weight-decay", type=float, default=argparse.SUPPRESS)
    p.add_argument("--size", default=argparse.SUPPRESS)
    p.add_argument("--chroma-depth", type=int, default=argparse.SUPPRESS)
    p.add_argument("--chroma-base", type=int, default=argparse.SUPPRESS)
    p.add_argument("--backbone-widths", default=argparse.SUPPRESS)
    p.add_argument("--head-hidden", type=int, default=argparse.SUPPRESS)

    p = command("encode", cmd_encode,
                help="emit chromatic, colormap, or replicated RGB PNGs")
    p.add_argument("--manifest", default=argparse.SUPPRESS)
    p.add_argument("--image-root", default=argparse.SUPPRESS)
    p.add_argument("--checkpoint", default=argparse.SUPPRESS)
    p.add_argument("--mode", choices=["tdce", "colormap", "replicate"],
                   default=argparse.SUPPRESS)

    p = command("predict", cmd_predict, help="score views with a checkpoint")
    p.add_argument("--checkpoint", default=argparse.SUPPRESS)
    p.add_argument("--manifest", default=argparse.SUPPRESS)
    p.add_argument("--image-root", default=argparse.SUPPRESS)
    p.add_argument("--aggregate-breast", action="store_true",
                   default=argparse.SUPPRESS)

    p = command("evaluate", cmd_evaluate,
                help="AUC, operating point, ROC CSV, model comparison")
    p.add_argument("--predictions", default=argparse.SUPPRESS)
    p.add_argument("--baseline", default=argparse.SUPPRESS)
    p.add_argument("--n-resamples", type=int, default=argparse.SUPPRESS)
    p.add_argument("--threshold", type=float, default=argparse.SUPPRESS)

    p = command("subgroup", cmd_subgroup,
                help="per-subgroup comparison of two prediction files")
    p.add_argument("--predictions", default=argparse.SUPPRESS)
    p.add_argument("--baseline", default=argparse.SUPPRESS)
    p.add_argument("--by", choices=["density-group", "finding"],
                   default=argparse.SUPPRESS)
    p.add_argument("--threshold", type=float, default=argparse.SUPPRESS)
    p.add_argument("--n-resamples", type=int, default=argparse.SUPPRESS)

    study = sub.add_parser("study", help="observer-study tooling")
    study_sub = study.add_subparsers(dest="study_command",
                                     metavar="subcommand")

    def study_command(name, func, **kwargs):
        p = study_sub.add_parser(name, **kwargs)
        p.set_defaults(_func=func)
        _common_flags(p)
        return p

    p = study_command("plan", cmd_study_plan,
                      help="assign condition and case orders to readers")
    p.add_argument("--readers", default=argparse.SUPPRESS,
                   help="JSON array of {reader_id, tier}")
    p.add_argument("--cases", default=argparse.SUPPRESS,
                   help="JSON array of case ids")
    p.add_argument("--washout-days", type=int, default=argparse.SUPPRESS)

    p = study_command("export", cmd_study_export,
                      help="ratings CSV from a service store")
    p.add_argument("--store", default=argparse.SUPPRESS)
    p.add_argument("--study-id", default=argparse.SUPPRESS)

    p = study_command("analyze", cmd_study_analyze,
                      help="reader table, agreement, and GLMM report")
    p.add_argument("--ratings", default=argparse.SUPPRESS)
    p.add_argument("--reference", default=argparse.SUPPRESS,
                   help="CSV with header case_id,label")
    p.add_argument("--plan", default=argparse.SUPPRESS)

    p = command("serve", cmd_serve, help="run the observer-study service")
    p.add_argument("--store", default=argparse.SUPPRESS)
    p.add_argument("--host", default=argparse.SUPPRESS)
    p.add_argument("--port", type=int, default=argparse.SUPPRESS)
    p.add_argument("--washout-override-days", type=int,
                   default=argparse.SUPPRESS)
    p.add_argument("--tokens-file", default=argparse.SUPPRESS)
    p.add_argument("--check", action="store_true", default=argparse.SUPPRESS,
                   help="validate the store and exit without serving")

    command("selftest", cmd_selftest,
            help="gradient checks and statistics oracles")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "_func"):
            parser.print_help()
            return EXIT_USAGE
        known = {a for a in vars(args) if a != "_func"} | {
            "seed", "threads", "output_dir", "deterministic", "manifest",
            "image_root", "size", "ratios", "birads6", "regime",
            "train_manifest", "val_manifest", "epochs", "batch_size", "lr",
            "weight_decay", "chroma_depth", "chroma_base", "backbone_widths",
            "head_hidden", "checkpoint", "mode", "aggregate_breast",
            "predictions", "baseline", "n_resamples", "threshold", "by",
            "readers", "cases", "washout_days", "store", "study_id",
            "ratings", "reference", "plan", "host", "port",
            "washout_override_days", "tokens_file", "check"}
        opts = _merge_options(args, known)
        opts.pop("command", None)
        opts.pop("study_command", None)
        if "threads" in opts:
            n = str(int(opts["threads"]))
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                        "MKL_NUM_THREADS"):
                os.environ[var] = n
        return args._func(opts)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as e:
        from .pipeline import ManifestError

        if isinstance(e, ManifestError):
            print(f"error: {e}", file=sys.stderr)
            return EXIT_USAGE
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
