"""Command-line entry point: synth | train | eval | sweep | viz.

Every run is driven by a JSON config (with --set key=value overrides),
writes a config.echo.json into its output directory, and is deterministic
given the config and seeds. Exit codes: 0 success, 1 runtime failure,
2 usage/config failure. QUMAB_THREADS bounds sweep parallelism.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .data import (
    FeatureSet,
    WorldSpec,
    gen_synthetic_world,
    load_annotations,
    load_features,
    load_masks,
    split,
    world_to_files,
)
from .errors import ConfigError, ParseError, QraterError
from .evalsuite import (
    evaluate,
    run_training_cell,
    strip_cell,
    summarize_sweep,
)
from .focus import export_heatmap, extract_focus, focus_recovery_score, mean_focus_map
from .model import (
    ModelConfig,
    forward_image,
    forward_sequence,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import Tensor
from .trainer import TrainConfig, train

_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_DATA_FIELDS = {"features", "annotations", "masks", "train_frac", "val_frac"}
_TOP_FIELDS = {"model", "train", "data", "out_dir", "seed"}


def _reject_unknown(doc: dict, allowed: set, where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_overrides(doc: dict, sets: list[str]) -> None:
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(value)


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})")


def _echo_config(doc: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.echo.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_run_config(path, sets) -> dict:
    doc = _load_json(path)
    _apply_overrides(doc, sets or [])
    _reject_unknown(doc, _TOP_FIELDS, "top-level")
    for section, allowed in (("model", _MODEL_FIELDS), ("train", _TRAIN_FIELDS),
                             ("data", _DATA_FIELDS)):
        _reject_unknown(doc.get(section, {}), allowed, section)
    if "out_dir" not in doc:
        raise ConfigError("config requires out_dir")
    return doc


def _open_data(doc: dict):
    data = doc.get("data", {})
    for key in ("features", "annotations"):
        if key not in data:
            raise ConfigError(f"data.{key} is required")
        if not os.path.exists(data[key]):
            raise ConfigError(f"data.{key} file not found: {data[key]}")
    features = load_features(data["features"])
    annotations = load_annotations(data["annotations"])
    return features, annotations, data


def _build_model_config(doc: dict, features: FeatureSet, annotations) -> ModelConfig:
    model = dict(doc.get("model", {}))
    model.setdefault("n_annotators", annotations.n_annotators)
    model.setdefault("n_classes", annotations.n_classes)
    model.setdefault("feature_dim", features.feature_dim)
    cfg = ModelConfig(**model)
    cfg.validate()
    if cfg.n_annotators != annotations.n_annotators:
        raise ConfigError(
            f"model.n_annotators={cfg.n_annotators} but annotations have "
            f"{annotations.n_annotators}")
    if cfg.n_classes != annotations.n_classes:
        raise ConfigError(
            f"model.n_classes={cfg.n_classes} but annotations have "
            f"{annotations.n_classes} labels")
    if cfg.feature_dim != features.feature_dim:
        raise ConfigError(
            f"model.feature_dim={cfg.feature_dim} but features carry "
            f"{features.feature_dim}")
    return cfg


def _build_train_config(doc: dict) -> TrainConfig:
    train_doc = dict(doc.get("train", {}))
    if "seed" not in train_doc and "seed" in doc:
        train_doc["seed"] = doc["seed"]
    cfg = TrainConfig(**train_doc)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    doc = _load_json(args.spec)
    _apply_overrides(doc, args.set or [])
    allowed = {f.name for f in dataclasses.fields(WorldSpec)} | {"seed"}
    _reject_unknown(doc, allowed, "world spec")
    seed = doc.pop("seed", 0)
    spec = WorldSpec(**{k: tuple(v) if isinstance(v, list) else v
                        for k, v in doc.items()})
    world = gen_synthetic_world(spec, seed)
    paths = world_to_files(world, args.out_dir)
    _echo_config({**dataclasses.asdict(spec), "seed": seed}, args.out_dir)
    print(json.dumps(paths, indent=2))
    return 0


def cmd_train(args) -> int:
    doc = _load_run_config(args.config, args.set)
    features, annotations, data = _open_data(doc)
    model_cfg = _build_model_config(doc, features, annotations)
    train_cfg = _build_train_config(doc)
    seed = int(doc.get("seed", train_cfg.seed))
    out_dir = doc["out_dir"]
    _echo_config(doc, out_dir)

    train_m, val_m, _test_m = split(annotations,
                                    data.get("train_frac", 0.8),
                                    data.get("val_frac", 0.1), seed)
    params = init_model(model_cfg, seed)
    best, history = train(params, model_cfg, features, train_m, val_m,
                          dataclasses.replace(train_cfg, seed=seed))
    save_checkpoint(best, os.path.join(out_dir, "checkpoint"))
    with open(os.path.join(out_dir, "history.json"), "w", encoding="utf-8") as fh:
        fh.write(history.to_json())
    print(f"stopped at epoch {history.stopped_epoch}, "
          f"best epoch {history.best_epoch} "
          f"(val metric {history.best_val_metric:.4f})")
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    cfg = params.config
    features = load_features(args.features)
    annotations = load_annotations(args.annotations)
    if cfg.n_annotators != annotations.n_annotators:
        raise ConfigError(
            f"checkpoint n_annotators={cfg.n_annotators} vs annotations "
            f"{annotations.n_annotators}")
    if cfg.feature_dim != features.feature_dim:
        raise ConfigError(
            f"checkpoint feature_dim={cfg.feature_dim} vs features "
            f"{features.feature_dim}")
    report = evaluate(params, cfg, features, annotations)
    os.makedirs(args.out_dir, exist_ok=True)
    _echo_config({"checkpoint": args.checkpoint, "features": args.features,
                  "annotations": args.annotations}, args.out_dir)
    with open(os.path.join(args.out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    table = report.table_text()
    with open(os.path.join(args.out_dir, "table.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    return 0


def _parse_list(text: str, cast):
    return [cast(x) for x in text.split(",") if x != ""]


def cmd_sweep(args) -> int:
    doc = _load_run_config(args.config, args.set)
    features, annotations, _data = _open_data(doc)
    model_cfg = _build_model_config(doc, features, annotations)
    train_cfg = _build_train_config(doc)
    out_dir = doc["out_dir"]
    _echo_config(doc, out_dir)

    rates = _parse_list(args.rates, float) if args.rates else [0.0]
    seeds = _parse_list(args.seeds, int)
    if args.ablation:
        variants = ["base", "unified_classifier", "no_self_attn",
                    "pre_mv_pool", "full"]
    else:
        variants = (_parse_list(args.variants, str)
                    if args.variants else ["full"])
    for rate in rates:
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"removal rate {rate} outside [0, 1)")

    dataset = dataclasses.make_dataclass(
        "Bundle", ["features", "annotations"])(features, annotations)
    cell_dir = os.path.join(out_dir, "cells")
    os.makedirs(cell_dir, exist_ok=True)

    def cell_path(v, r, s):
        return os.path.join(cell_dir, f"{v}_r{r:g}_s{s}.json")

    def run_one(job):
        v, r, s = job
        path = cell_path(v, r, s)
        if os.path.exists(path):  # resume: completed cells are never redone
            with open(path, encoding="utf-8") as fh:
                return json.load(fh)
        cell = strip_cell(run_training_cell(dataset, v, r, s,
                                            model_cfg, train_cfg))
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(cell, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return cell

    jobs = [(v, r, s) for v in variants for r in rates for s in seeds]
    workers = max(1, int(os.environ.get("QUMAB_THREADS", "1")))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(run_one, jobs))
    else:
        cells = [run_one(j) for j in jobs]

    sweep = {"rates": rates, "seeds": seeds, "variants": variants,
             "cells": cells, "summary": summarize_sweep(cells, rates, variants)}
    with open(os.path.join(out_dir, "sweep.json"), "w", encoding="utf-8") as fh:
        json.dump(sweep, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for variant, per_rate in sweep["summary"].items():
        for rate, cell in per_rate.items():
            drop = cell.get("relative_drop_pct")
            msg = f"  {variant} rate={rate}: mean={cell['mean']:.4f} +/- {cell['std']:.4f}"
            if drop is not None:
                msg += f" (drop {drop:.1f}%)"
            print(msg)
    return 0


def cmd_viz(args) -> int:
    params = load_checkpoint(args.checkpoint)
    cfg = params.config
    features = load_features(args.features)
    if cfg.feature_dim != features.feature_dim:
        raise ConfigError(
            f"checkpoint feature_dim={cfg.feature_dim} vs features "
            f"{features.feature_dim}")
    if cfg.variant in ("base",):
        raise ConfigError("base variant records no attention to visualize")
    annotators = (_parse_list(args.annotators, int) if args.annotators
                  else list(range(cfg.n_annotators)))
    sample_ids = features.sample_ids[:args.max_samples]
    per_ann: dict[int, list] = {k: [] for k in annotators}
    n_cells = None
    for sid in sample_ids:
        if cfg.mode == "sequence":
            _, rec = forward_sequence(Tensor(features[sid]), params, cfg)
        else:
            _, rec = forward_image(Tensor(features[sid]), params, cfg)
        for k in annotators:
            fmap = extract_focus(rec, k, mode=cfg.mode)
            per_ann[k].append(fmap)
            n_cells = fmap.weights.shape[0]

    if args.layout:
        rows, cols = (int(x) for x in args.layout.split("x"))
    else:
        side = int(math.isqrt(n_cells))
        rows, cols = (side, side) if side * side == n_cells else (1, n_cells)

    os.makedirs(args.out_dir, exist_ok=True)
    _echo_config({"checkpoint": args.checkpoint, "features": args.features,
                  "annotators": annotators, "layout": f"{rows}x{cols}",
                  "max_samples": args.max_samples}, args.out_dir)
    masks = load_masks(args.masks) if args.masks else None
    summary = {"maps": {}, "recovery_scores": {}}
    for k in annotators:
        fmap = mean_focus_map(per_ann[k])
        path = os.path.join(args.out_dir, f"focus_a{k}.pgm")
        export_heatmap(fmap, (rows, cols), path)
        summary["maps"][str(k)] = path
        if masks is not None:
            aid = sorted(masks)[k]
            summary["recovery_scores"][str(k)] = focus_recovery_score(
                fmap, masks[aid])
    with open(os.path.join(args.out_dir, "viz_summary.json"), "w",
              encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if summary["recovery_scores"]:
        mean_score = float(np.mean(list(summary["recovery_scores"].values())))
        print(f"mean focus recovery score: {mean_score:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qrater",
        description="query-token annotator behavior modeling")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic annotator world")
    p.add_argument("spec", help="world spec JSON")
    p.add_argument("out_dir")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint path prefix")
    p.add_argument("--features", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="sparse-rate / variant sweep")
    p.add_argument("config")
    p.add_argument("--rates", help="comma-separated removal rates")
    p.add_argument("--seeds", required=True, help="comma-separated seeds")
    p.add_argument("--variants", help="comma-separated variant names")
    p.add_argument("--ablation", action="store_true",
                   help="run the full variant battery at rate 0")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("viz", help="export per-annotator focus heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--annotators", help="comma-separated annotator indices")
    p.add_argument("--masks", help="masks.json for recovery scoring")
    p.add_argument("--max-samples", type=int, default=64)
    p.add_argument("--layout", help="ROWSxCOLS grid, e.g. 8x8")
    p.set_defaults(fn=cmd_viz)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 2
    except QraterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
