"""Per-annotator focus maps from captured cross-attention weights.

A focus map is the normalized attention mass an annotator's query assigns
over patches (image mode) or frames (sequence mode). Maps export as binary
PGM heatmaps with a JSON sidecar carrying the exact weights, and can be
scored against a planted ground-truth mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .model import AttentionRecord


@dataclass
class FocusMap:
    annotator: int
    weights: np.ndarray  # non-negative, sums to 1
    provenance: dict = field(default_factory=dict)


def extract_focus(record: AttentionRecord, annotator: int,
                  mode: str = "image") -> FocusMap:
    """Mean over blocks and heads of one annotator's cross-attention row.

    Sequence mode first sums each frame's compressed-key mass, giving a
    per-frame map. The result is renormalized to sum to 1.
    """
    if not record.cross_attn:
        raise ContractError("record holds no cross-attention weights")
    n_q = record.cross_attn[0].shape[1]
    if not 0 <= annotator < n_q:
        raise IndexError(f"annotator {annotator} out of range [0, {n_q})")
    rows = []
    for b, block in enumerate(record.cross_attn):
        for h in range(block.shape[0]):
            if mode == "sequence":
                rows.append(record.frame_mass(b, h)[annotator])
            else:
                rows.append(block[h, annotator])
    mean = np.mean(rows, axis=0)
    mean = mean / mean.sum()
    return FocusMap(annotator, mean.astype(np.float64),
                    {"blocks": len(record.cross_attn),
                     "heads": int(record.cross_attn[0].shape[0]),
                     "mode": mode})


def per_head_maps(record: AttentionRecord, annotator: int,
                  mode: str = "image") -> dict[tuple[int, int], np.ndarray]:
    """Un-aggregated inspection view: one row per (block, head)."""
    out = {}
    for b, block in enumerate(record.cross_attn):
        for h in range(block.shape[0]):
            row = (record.frame_mass(b, h)[annotator] if mode == "sequence"
                   else block[h, annotator])
            out[(b, h)] = row / row.sum()
    return out


def mean_focus_map(maps: list[FocusMap]) -> FocusMap:
    """Average already-normalized maps and renormalize."""
    if not maps:
        raise ContractError("mean of zero focus maps")
    w = np.mean([m.weights for m in maps], axis=0)
    w = w / w.sum()
    prov = dict(maps[0].provenance)
    prov["averaged_over"] = len(maps)
    return FocusMap(maps[0].annotator, w, prov)


def focus_recovery_score(fmap: FocusMap, mask) -> float:
    """Attention mass inside the mask relative to the uniform baseline.

    1.0 means no better than uniform attention; |map| / |mask| is the
    maximum (all mass inside the mask).
    """
    mask = sorted(set(int(i) for i in mask))
    if not mask:
        raise ContractError("empty mask")
    n = fmap.weights.shape[0]
    if mask[0] < 0 or mask[-1] >= n:
        raise IndexError(f"mask indices outside [0, {n})")
    inside = float(fmap.weights[mask].sum())
    return inside / (len(mask) / n)


def export_heatmap(fmap: FocusMap, layout: tuple[int, int], path) -> None:
    """Write a binary PGM (P5, maxval 255) plus a JSON sidecar.

    Cell intensity is weight / max(weight), scaled to 255. The sidecar at
    `path + '.json'` carries the exact weights and round-trips losslessly.
    """
    rows, cols = layout
    if rows * cols != fmap.weights.shape[0]:
        raise ConfigError(
            f"layout {rows}x{cols} does not match {fmap.weights.shape[0]} cells")
    peak = float(fmap.weights.max())
    scaled = np.floor(fmap.weights / peak * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(scaled.reshape(rows, cols).tobytes())
    sidecar = {
        "annotator_id": fmap.annotator,
        "weights": [float(w) for w in fmap.weights],
        "provenance": fmap.provenance,
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_sidecar(path) -> FocusMap:
    with open(str(path) + ".json", encoding="utf-8") as fh:
        doc = json.load(fh)
    return FocusMap(doc["annotator_id"],
                    np.asarray(doc["weights"], dtype=np.float64),
                    doc.get("provenance", {}))
