"""Metrics and experiment harnesses.

Per-annotator accuracy / macro-F1, their average (Avg), consensus prediction
(CoPr) via majority vote, plus the sweep harnesses: sparse-annotation
robustness, the variant ablation battery, and the focus-recovery experiment
against a synthetic world's planted masks.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .data import SyntheticWorld, split, sparsify
from .errors import ConfigError, ContractError
from .model import ModelConfig, ModelParams, forward_image, init_model
from .tensor import Tensor
from .trainer import TrainConfig, predict_rows, train
from . import focus as fv


def accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    """Fraction of exactly matching predictions."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.size == 0 or preds.shape != labels.shape:
        raise ContractError("accuracy needs equal, non-empty inputs")
    return float(np.mean(preds == labels))


def macro_f1(preds: Sequence[int], labels: Sequence[int], n_classes: int,
             average: str = "macro") -> float:
    """Unweighted mean of per-class F1.

    Per-class F1 is 2PR/(P+R), defined as 0 when P+R is 0. Classes absent
    from both predictions and labels are excluded from the mean. `average`
    may be 'micro' for globally pooled counts instead.
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.size == 0 or preds.shape != labels.shape:
        raise ContractError("macro_f1 needs equal, non-empty inputs")
    if average == "micro":
        return float(np.mean(preds == labels))
    scores = []
    for c in range(n_classes):
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        if tp + fp + fn == 0:
            continue  # class absent from both sides
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores)) if scores else 0.0


def majority_vote(labels: Iterable[int]) -> int:
    """Most frequent label; ties break to the lowest class index."""
    arr = np.asarray(list(labels), dtype=np.int64)
    if arr.size == 0:
        raise ContractError("majority_vote of an empty multiset")
    return int(np.bincount(arr).argmax())


@dataclass
class MetricsReport:
    """Per-annotator metrics, their average, and consensus prediction."""

    annotator_ids: list[str]
    per_annotator: dict[str, dict] = field(default_factory=dict)
    avg_accuracy: Optional[float] = None
    avg_macro_f1: Optional[float] = None
    copr_accuracy: Optional[float] = None
    copr_macro_f1: Optional[float] = None
    n_copr_samples: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "annotator_ids": self.annotator_ids,
            "per_annotator": self.per_annotator,
            "avg_accuracy": self.avg_accuracy,
            "avg_macro_f1": self.avg_macro_f1,
            "copr_accuracy": self.copr_accuracy,
            "copr_macro_f1": self.copr_macro_f1,
            "n_copr_samples": self.n_copr_samples,
            "config": self.config,
        }

    def table_text(self) -> str:
        """Aligned columns A_1..A_n, Avg, CoPr; rows ACC and F1."""
        headers = [f"A_{k + 1}" for k in range(len(self.annotator_ids))]
        headers += ["Avg", "CoPr"]

        def fmt(v):
            return f"{v:.4f}" if v is not None else "-"

        acc_row, f1_row = [], []
        for aid in self.annotator_ids:
            cell = self.per_annotator.get(aid)
            acc_row.append(fmt(cell["accuracy"] if cell else None))
            f1_row.append(fmt(cell["macro_f1"] if cell else None))
        acc_row += [fmt(self.avg_accuracy), fmt(self.copr_accuracy)]
        f1_row += [fmt(self.avg_macro_f1), fmt(self.copr_macro_f1)]
        width = max(8, max(len(h) for h in headers) + 2)
        lines = ["Metric".ljust(8) + "".join(h.rjust(width) for h in headers)]
        lines.append("ACC".ljust(8) + "".join(c.rjust(width) for c in acc_row))
        lines.append("F1".ljust(8) + "".join(c.rjust(width) for c in f1_row))
        return "\n".join(lines) + "\n"


def compute_report(predictions: dict[str, np.ndarray], annotations,
                   single_row: bool = False, copr_min_votes: int = 2,
                   config: Optional[dict] = None) -> MetricsReport:
    """Score per-sample prediction rows against an annotation matrix.

    `predictions` maps sample_id to an int row (one class per annotator, or
    a single class for pooled single-prediction models). Per-annotator
    metrics use only that annotator's labeled samples. CoPr compares the
    majority vote over the predicted rows against the majority vote over
    raw annotations; samples with fewer than `copr_min_votes` raw
    annotations are excluded.
    """
    sids = [s for s in annotations.samples if s in predictions]
    if not sids:
        raise ContractError("no overlap between predictions and annotations")
    n_classes = annotations.n_classes
    report = MetricsReport(annotator_ids=list(annotations.annotators),
                           config=config or {})

    if not single_row:
        accs, f1s = [], []
        for k, aid in enumerate(annotations.annotators):
            p, y = [], []
            for s in sids:
                label = annotations.entries.get((s, aid))
                if label is None:
                    continue
                p.append(int(predictions[s][k]))
                y.append(label)
            if not y:
                continue
            a = accuracy(p, y)
            f = macro_f1(p, y, n_classes)
            report.per_annotator[aid] = {"accuracy": a, "macro_f1": f,
                                         "n_pairs": len(y)}
            accs.append(a)
            f1s.append(f)
        if accs:
            report.avg_accuracy = float(np.mean(accs))
            report.avg_macro_f1 = float(np.mean(f1s))

    cons_pred, cons_ref = [], []
    for s in sids:
        row = annotations.labels_row(s)
        raw = row[row >= 0]
        if raw.size < copr_min_votes:
            continue
        cons_ref.append(majority_vote(raw))
        if single_row:
            cons_pred.append(int(predictions[s][0]))
        else:
            cons_pred.append(majority_vote(predictions[s]))
    if cons_ref:
        report.copr_accuracy = accuracy(cons_pred, cons_ref)
        report.copr_macro_f1 = macro_f1(cons_pred, cons_ref, n_classes)
        report.n_copr_samples = len(cons_ref)
    return report


def evaluate(params: ModelParams, cfg: ModelConfig, features, annotations,
             copr_min_votes: int = 2) -> MetricsReport:
    """Predict every labeled, feature-backed sample and score it."""
    sids = [s for s in annotations.samples
            if s in features and annotations.has_any(s)]
    if not sids:
        raise ContractError("no overlap between features and annotations")
    preds = predict_rows(params, cfg, features, sids)
    return compute_report(preds, annotations,
                          single_row=(cfg.variant == "pre_mv_pool"),
                          copr_min_votes=copr_min_votes,
                          config=asdict(cfg))


# ---------------------------------------------------------------------------
# experiment harnesses


def run_training_cell(world: SyntheticWorld, variant: str, rate: float,
                      seed: int, model_cfg: ModelConfig,
                      train_cfg: TrainConfig,
                      train_frac: float = 0.8, val_frac: float = 0.1) -> dict:
    """Train one (variant, removal rate, seed) cell and evaluate on the
    held-out test split. The split and the removal are both seeded by
    `seed`, so variants sharing a seed see identical data."""
    cfg = replace(model_cfg, variant=variant)
    train_m, val_m, test_m = split(world.annotations, train_frac, val_frac, seed)
    if rate > 0:
        train_m = sparsify(train_m, rate, seed)
    params = init_model(cfg, seed)
    tcfg = replace(train_cfg, seed=seed)
    t0 = time.perf_counter()
    best, history = train(params, cfg, world.features, train_m, val_m, tcfg)
    report = evaluate(best, cfg, world.features, test_m)
    return {
        "variant": variant,
        "rate": rate,
        "seed": seed,
        "avg_accuracy": report.avg_accuracy,
        "copr_accuracy": report.copr_accuracy,
        "report": report.to_dict(),
        "stopped_epoch": history.stopped_epoch,
        "best_epoch": history.best_epoch,
        "train_seconds": time.perf_counter() - t0,
        "_params": best,
        "_test_matrix": test_m,
    }


def strip_cell(cell: dict) -> dict:
    """Drop non-serializable fields from a cell result."""
    return {k: v for k, v in cell.items() if not k.startswith("_")}


def summarize_sweep(cells: list[dict], rates: Sequence[float],
                    variants: Sequence[str]) -> dict:
    """Mean/std per (variant, rate) plus the relative drop vs rate 0."""
    summary: dict = {}
    for variant in variants:
        per_rate = {}
        for rate in rates:
            vals = [c["avg_accuracy"] if c["avg_accuracy"] is not None
                    else c["copr_accuracy"]
                    for c in cells
                    if c["variant"] == variant and c["rate"] == rate]
            if not vals:
                continue
            per_rate[rate] = {"mean": float(np.mean(vals)),
                              "std": float(np.std(vals)),
                              "n": len(vals)}
        full = per_rate.get(0.0, {}).get("mean")
        for rate, cell in per_rate.items():
            if full and rate != 0.0:
                cell["relative_drop_pct"] = 100.0 * (full - cell["mean"]) / full
        summary[variant] = {str(r): v for r, v in per_rate.items()}
    return summary


def run_sparse_sweep(world: SyntheticWorld, rates: Sequence[float],
                     seeds: Sequence[int], variants: Sequence[str],
                     model_cfg: ModelConfig, train_cfg: TrainConfig,
                     max_workers: int = 1,
                     cell_fn: Optional[Callable] = None) -> dict:
    """Train/evaluate every (variant, rate, seed) cell; emit mean +/- std and
    the relative-drop column (full minus sparse, over full)."""
    for rate in rates:
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"removal rate {rate} outside [0, 1)")
    fn = cell_fn or run_training_cell
    jobs = [(v, r, s) for v in variants for r in rates for s in seeds]

    def one(job):
        v, r, s = job
        return strip_cell(fn(world, v, r, s, model_cfg, train_cfg))

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            cells = list(pool.map(one, jobs))
    else:
        cells = [one(j) for j in jobs]
    return {"cells": cells, "summary": summarize_sweep(cells, rates, variants)}


ABLATION_VARIANTS = ("base", "unified_classifier", "no_self_attn",
                     "pre_mv_pool", "full")


def run_ablation(world: SyntheticWorld, seeds: Sequence[int],
                 model_cfg: ModelConfig, train_cfg: TrainConfig,
                 max_workers: int = 1) -> dict:
    """Train every variant with identical seeds/data at full coverage.

    Reports Avg and CoPr per variant; the post-vote consensus row is the
    full model's CoPr (model each annotator, then aggregate)."""
    result = run_sparse_sweep(world, [0.0], seeds, ABLATION_VARIANTS,
                              model_cfg, train_cfg, max_workers=max_workers)
    table: dict = {}
    for variant in ABLATION_VARIANTS:
        cells = [c for c in result["cells"] if c["variant"] == variant]
        avgs = [c["avg_accuracy"] for c in cells if c["avg_accuracy"] is not None]
        coprs = [c["copr_accuracy"] for c in cells if c["copr_accuracy"] is not None]
        table[variant] = {
            "avg_accuracy": float(np.mean(avgs)) if avgs else None,
            "avg_accuracy_std": float(np.std(avgs)) if avgs else None,
            "copr_accuracy": float(np.mean(coprs)) if coprs else None,
        }
    table["post_mv"] = {"copr_accuracy": table["full"]["copr_accuracy"]}
    return {"cells": result["cells"], "table": table}


def clean_annotator_accuracy(params: ModelParams, cfg: ModelConfig,
                             world: SyntheticWorld, sample_ids) -> float:
    """Mean per-annotator accuracy against the world's noise-free labeling
    rule (the annotator behavior functions themselves)."""
    preds = predict_rows(params, cfg, world.features, sample_ids)
    accs = []
    for k, aid in enumerate(world.annotations.annotators):
        hits = total = 0
        for s in sample_ids:
            y = world.clean_labels.get((s, aid))
            if y is None:
                continue
            total += 1
            hits += int(preds[s][k] == y)
        if total:
            accs.append(hits / total)
    return float(np.mean(accs)) if accs else 0.0


def mean_recovery_score(params: ModelParams, cfg: ModelConfig,
                        world: SyntheticWorld, sample_ids,
                        sample_cap: int = 64) -> tuple[float, dict[str, float]]:
    """Average each annotator's focus map over test samples and score the
    mass it places inside that annotator's planted mask."""
    chosen = list(sample_ids)[:sample_cap]
    maps: dict[int, list] = {k: [] for k in range(cfg.n_annotators)}
    for sid in chosen:
        _, rec = forward_image(Tensor(world.features[sid]), params, cfg)
        for k in range(cfg.n_annotators):
            maps[k].append(fv.extract_focus(rec, k))
    scores = {}
    for k, aid in enumerate(world.annotations.annotators):
        mean_map = fv.mean_focus_map(maps[k])
        scores[aid] = fv.focus_recovery_score(mean_map, world.masks[aid])
    return float(np.mean(list(scores.values()))), scores


def run_focus_experiment(world: SyntheticWorld, seeds: Sequence[int],
                         model_cfg: ModelConfig, train_cfg: TrainConfig,
                         sample_cap: int = 64,
                         cell_fn: Optional[Callable] = None) -> dict:
    """Train the full variant per seed; report test accuracy against the
    noise-free labeling rule, observed-label accuracy, and the mean
    focus-recovery score against the planted masks."""
    fn = cell_fn or run_training_cell
    runs = []
    for seed in seeds:
        cell = fn(world, "full", 0.0, seed, model_cfg, train_cfg)
        params = cell["_params"]
        cfg = replace(model_cfg, variant="full")
        test_ids = list(cell["_test_matrix"].samples)
        clean_acc = clean_annotator_accuracy(params, cfg, world, test_ids)
        recovery, per_ann = mean_recovery_score(params, cfg, world, test_ids,
                                                sample_cap=sample_cap)
        runs.append({"seed": seed,
                     "clean_accuracy": clean_acc,
                     "observed_accuracy": cell["avg_accuracy"],
                     "recovery_score": recovery,
                     "per_annotator_recovery": per_ann,
                     "train_seconds": cell["train_seconds"],
                     "stopped_epoch": cell["stopped_epoch"]})
    return {
        "runs": runs,
        "mean_clean_accuracy": float(np.mean([r["clean_accuracy"] for r in runs])),
        "mean_observed_accuracy": float(np.mean([r["observed_accuracy"] for r in runs])),
        "mean_recovery_score": float(np.mean([r["recovery_score"] for r in runs])),
    }


def sign_test_p(wins: int, n: int) -> float:
    """One-sided sign test: P(at least `wins` successes in n fair flips)."""
    if not 0 <= wins <= n:
        raise ContractError(f"wins {wins} outside [0, {n}]")
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0 ** n
