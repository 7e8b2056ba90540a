"""Annotation matrices, feature containers, and the synthetic annotator world.

The synthetic world plants a per-annotator focus mask over the patch grid:
each patch carries a class-direction signal, and an annotator's label is the
class whose mean cosine score inside that annotator's mask is largest,
flipped to a random other class with probability `noise_level`. The planted
masks are the ground truth against which attention maps can be scored.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigError, FormatError, IntegrityError, ParseError

_QMFS_MAGIC = b"QMFS"


@dataclass
class AnnotationMatrix:
    """Sparse sample x annotator label store.

    At most one label per (sample, annotator) pair; every stored class index
    is below the vocabulary size. `samples` and `annotators` fix the row and
    column universe even for pairs without entries.
    """

    samples: list[str]
    annotators: list[str]
    vocabulary: list[str]
    entries: dict[tuple[str, str], int]

    def __post_init__(self):
        self._ann_index = {a: i for i, a in enumerate(self.annotators)}
        self._sample_index = {s: i for i, s in enumerate(self.samples)}
        for (s, a), y in self.entries.items():
            if s not in self._sample_index or a not in self._ann_index:
                raise IntegrityError(f"entry ({s}, {a}) outside the declared universe")
            if not 0 <= y < len(self.vocabulary):
                raise IntegrityError(f"class index {y} outside vocabulary")

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def n_annotators(self) -> int:
        return len(self.annotators)

    @property
    def n_classes(self) -> int:
        return len(self.vocabulary)

    def has_any(self, sample_id: str) -> bool:
        return any((sample_id, a) in self.entries for a in self.annotators)

    def labels_row(self, sample_id: str) -> np.ndarray:
        """Per-annotator class indices for one sample; -1 where unlabeled."""
        row = np.full(len(self.annotators), -1, dtype=np.int64)
        for a, k in self._ann_index.items():
            y = self.entries.get((sample_id, a))
            if y is not None:
                row[k] = y
        return row

    def annotator_labels(self, annotator_id: str) -> dict[str, int]:
        return {s: y for (s, a), y in self.entries.items() if a == annotator_id}

    def filter_label(self, label: str) -> "AnnotationMatrix":
        """Drop one vocabulary label and all entries carrying it."""
        if label not in self.vocabulary:
            raise ConfigError(f"label {label!r} not in vocabulary")
        vocab = [v for v in self.vocabulary if v != label]
        remap = {self.vocabulary.index(v): i for i, v in enumerate(vocab)}
        drop = self.vocabulary.index(label)
        entries = {k: remap[y] for k, y in self.entries.items() if y != drop}
        return AnnotationMatrix(list(self.samples), list(self.annotators),
                                vocab, entries)


def load_annotations(path) -> AnnotationMatrix:
    """Read a `sample_id,annotator_id,label` CSV into an AnnotationMatrix.

    The vocabulary is the sorted set of distinct labels; duplicate
    (sample, annotator) rows are an integrity error.
    """
    rows: list[tuple[str, str, str]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["sample_id", "annotator_id", "label"]:
            raise ParseError(f"line 1: expected header sample_id,annotator_id,label, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 or any(not c.strip() for c in row):
                raise ParseError(f"line {lineno}: malformed row {row}")
            rows.append((row[0].strip(), row[1].strip(), row[2].strip()))
    vocab = sorted({label for _, _, label in rows})
    label_index = {v: i for i, v in enumerate(vocab)}
    entries: dict[tuple[str, str], int] = {}
    for s, a, label in rows:
        if (s, a) in entries:
            raise IntegrityError(f"duplicate annotation for ({s}, {a})")
        entries[(s, a)] = label_index[label]
    samples = sorted({s for s, _, _ in rows})
    annotators = sorted({a for _, a, _ in rows})
    return AnnotationMatrix(samples, annotators, vocab, entries)


def save_annotations(matrix: AnnotationMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "annotator_id", "label"])
        for (s, a) in sorted(matrix.entries):
            writer.writerow([s, a, matrix.vocabulary[matrix.entries[(s, a)]]])


def sparsify(matrix: AnnotationMatrix, removal_rate: float, seed: int,
             per_annotator: bool = False) -> AnnotationMatrix:
    """Remove exactly floor(rate * n) entries chosen by a seeded shuffle.

    Default removal is global over all entries; `per_annotator` stratifies
    the removal count within each annotator's entries instead.
    """
    if not 0.0 <= removal_rate < 1.0:
        raise ConfigError(f"removal_rate {removal_rate} outside [0, 1)")
    rng = np.random.default_rng(seed)
    keys = sorted(matrix.entries)

    def survivors(pool: list) -> set:
        k = int(np.floor(removal_rate * len(pool)))
        order = rng.permutation(len(pool))
        return {pool[i] for i in order[k:]}

    if per_annotator:
        kept: set = set()
        for a in matrix.annotators:
            kept |= survivors([key for key in keys if key[1] == a])
    else:
        kept = survivors(keys)
    entries = {k: matrix.entries[k] for k in keys if k in kept}
    return AnnotationMatrix(list(matrix.samples), list(matrix.annotators),
                            list(matrix.vocabulary), entries)


def split(matrix: AnnotationMatrix, train_frac: float, val_frac: float,
          seed: int) -> tuple[AnnotationMatrix, AnnotationMatrix, AnnotationMatrix]:
    """Sample-level partition; all of a sample's annotations stay together."""
    if train_frac <= 0 or val_frac <= 0 or train_frac + val_frac > 1:
        raise ConfigError("fractions must be positive and sum to at most 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(matrix.samples))
    ids = [matrix.samples[i] for i in order]
    n_train = int(np.floor(train_frac * len(ids)))
    n_val = int(np.floor(val_frac * len(ids)))
    parts = (ids[:n_train], ids[n_train:n_train + n_val], ids[n_train + n_val:])
    out = []
    for part in parts:
        if not part:
            raise ConfigError("split produced an empty sample set")
        chosen = set(part)
        entries = {k: y for k, y in matrix.entries.items() if k[0] in chosen}
        out.append(AnnotationMatrix(sorted(part), list(matrix.annotators),
                                    list(matrix.vocabulary), entries))
    return tuple(out)


# ---------------------------------------------------------------------------
# feature container


@dataclass
class FeatureSet:
    """Per-sample float32 feature arrays with a uniform trailing dim.

    Image mode: [n_patches, feature_dim]; sequence mode adds a leading
    frame axis.
    """

    features: dict[str, np.ndarray]

    def __post_init__(self):
        dims = {arr.shape[-1] for arr in self.features.values()}
        if len(dims) > 1:
            raise IntegrityError(f"mixed feature_dim across samples: {sorted(dims)}")

    def __getitem__(self, sample_id: str) -> np.ndarray:
        return self.features[sample_id]

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self.features

    @property
    def feature_dim(self) -> int:
        return next(iter(self.features.values())).shape[-1]

    @property
    def sample_ids(self) -> list[str]:
        return list(self.features)


def save_features(fs: FeatureSet, path) -> None:
    """QMFS container: magic, u32 sample count, then per sample the id
    (u32 length + bytes), u8 rank, u32 extents and an f32 payload."""
    dims = {arr.shape[-1] for arr in fs.features.values()}
    if len(dims) > 1:
        raise IntegrityError(f"mixed feature_dim across samples: {sorted(dims)}")
    with open(path, "wb") as fh:
        fh.write(_QMFS_MAGIC)
        fh.write(struct.pack("<I", len(fs.features)))
        for sid, arr in fs.features.items():
            raw = sid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_features(path) -> FeatureSet:
    def take(fh, n, what):
        buf = fh.read(n)
        if len(buf) != n:
            raise FormatError(f"truncated feature container ({what})")
        return buf

    features: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _QMFS_MAGIC:
            raise FormatError(f"bad feature magic {magic!r}")
        (count,) = struct.unpack("<I", take(fh, 4, "count"))
        for _ in range(count):
            (id_len,) = struct.unpack("<I", take(fh, 4, "id length"))
            sid = take(fh, id_len, "sample id").decode("utf-8")
            (rank,) = struct.unpack("<B", take(fh, 1, "rank"))
            shape = struct.unpack(f"<{rank}I", take(fh, 4 * rank, "extents"))
            n = int(np.prod(shape)) if rank else 1
            payload = take(fh, 4 * n, "payload")
            features[sid] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return FeatureSet(features)


# ---------------------------------------------------------------------------
# synthetic world


@dataclass(frozen=True)
class WorldSpec:
    n_samples: int
    n_patches: int
    feature_dim: int
    n_annotators: int
    n_classes: int
    mask_size: int | tuple[int, ...] = 8
    noise_level: float = 0.1
    signal_strength: float = 4.0
    position_strength: float = 16.0
    mask_mode: str = "shared_core"  # or "random" / "disjoint"
    core_fraction: float = 0.5

    def mask_sizes(self) -> list[int]:
        if isinstance(self.mask_size, int):
            return [self.mask_size] * self.n_annotators
        sizes = list(self.mask_size)
        if len(sizes) != self.n_annotators:
            raise ConfigError("one mask size per annotator required")
        return sizes

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.n_classes > self.feature_dim:
            raise ConfigError("orthogonal class signals need n_classes <= feature_dim")
        if not 0.0 <= self.noise_level < 1.0:
            raise ConfigError("noise_level must lie in [0, 1)")
        if self.mask_mode not in ("random", "disjoint", "shared_core"):
            raise ConfigError(f"unknown mask_mode {self.mask_mode!r}")
        if not 0.0 <= self.core_fraction <= 1.0:
            raise ConfigError("core_fraction must lie in [0, 1]")
        sizes = self.mask_sizes()
        if any(m < 1 or m > self.n_patches for m in sizes):
            raise ConfigError("mask sizes must lie in [1, n_patches]")
        if self.mask_mode == "disjoint" and sum(sizes) > self.n_patches:
            raise ConfigError("disjoint masks do not fit in n_patches")


@dataclass
class SyntheticWorld:
    """Generated features, planted focus masks, and induced labels.

    `annotations` holds the observed (noise-flipped) labels; `clean_labels`
    is the noise-free labeling rule output kept for behavior-recovery
    scoring. Masks are recorded exactly as used by the labeling rule.
    """

    spec: WorldSpec
    seed: int
    features: FeatureSet
    masks: dict[str, list[int]]
    annotations: AnnotationMatrix
    clean_labels: dict[tuple[str, str], int] = field(default_factory=dict)

    def clean_matrix(self) -> AnnotationMatrix:
        return AnnotationMatrix(list(self.annotations.samples),
                                list(self.annotations.annotators),
                                list(self.annotations.vocabulary),
                                dict(self.clean_labels))


def _sample_ids(n: int) -> list[str]:
    width = max(4, len(str(n - 1)))
    return [f"s{i:0{width}d}" for i in range(n)]


def _annotator_ids(n: int) -> list[str]:
    width = max(2, len(str(n - 1)))
    return [f"a{i:0{width}d}" for i in range(n)]


def gen_synthetic_world(spec: WorldSpec, seed: int) -> SyntheticWorld:
    """Deterministically generate a world from (spec, seed).

    Patch features are isotropic noise plus a class-direction signal plus a
    fixed per-patch-index position marker (a frozen patch encoder would bake
    position in the same way; masks are index sets, so focus is unlearnable
    without it). Position markers live in the orthogonal complement of the
    class-direction span, which leaves the labeling rule untouched: each
    annotator's label is argmax over classes of the mean cosine score inside
    its mask, flipped to a uniformly random *other* class with probability
    noise_level.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    sizes = spec.mask_sizes()

    # orthonormal class directions keep the labeling rule class-symmetric
    raw = rng.normal(size=(spec.feature_dim, spec.n_classes))
    dirs = np.linalg.qr(raw)[0].T[:spec.n_classes]

    # per-patch markers, projected off the class span and renormalized
    markers = rng.normal(size=(spec.n_patches, spec.feature_dim))
    markers -= (markers @ dirs.T) @ dirs
    norms = np.linalg.norm(markers, axis=1, keepdims=True)
    markers = spec.position_strength * markers / np.maximum(norms, 1e-12)

    annotators = _annotator_ids(spec.n_annotators)
    masks: dict[str, list[int]] = {}
    if spec.mask_mode == "disjoint":
        perm = rng.permutation(spec.n_patches)
        pos = 0
        for a, m in zip(annotators, sizes):
            masks[a] = sorted(int(p) for p in perm[pos:pos + m])
            pos += m
    elif spec.mask_mode == "shared_core":
        # annotators share a focus core plus individual patches: shared
        # behavioral structure with per-annotator deviations
        core_n = int(np.floor(spec.core_fraction * min(sizes)))
        core = rng.choice(spec.n_patches, size=core_n, replace=False)
        rest = np.setdiff1d(np.arange(spec.n_patches), core)
        for a, m in zip(annotators, sizes):
            own = rng.choice(rest, size=m - core_n, replace=False)
            masks[a] = sorted(int(p) for p in np.concatenate([core, own]))
    else:
        for a, m in zip(annotators, sizes):
            masks[a] = sorted(int(p) for p in
                              rng.choice(spec.n_patches, size=m, replace=False))

    samples = _sample_ids(spec.n_samples)
    patch_classes = rng.integers(0, spec.n_classes,
                                 size=(spec.n_samples, spec.n_patches))
    noise = rng.normal(size=(spec.n_samples, spec.n_patches, spec.feature_dim))
    raw_feats = (noise + spec.signal_strength * dirs[patch_classes]
                 + markers[None, :, :])
    # constant per-patch norm, like layer-normalized encoder outputs; the
    # cosine labeling rule is scale-invariant per patch, so labels are
    # unaffected while downstream linear readouts become well conditioned
    scale = np.sqrt(spec.feature_dim + spec.signal_strength ** 2
                    + spec.position_strength ** 2)
    feats = (scale * raw_feats
             / np.linalg.norm(raw_feats, axis=2, keepdims=True)).astype(np.float32)

    # cosine score of every patch against every class direction
    norms = np.linalg.norm(feats.astype(np.float64), axis=2, keepdims=True)
    cos = feats.astype(np.float64) @ dirs.T / norms  # [n, p, C]

    flip_draw = rng.random(size=(spec.n_samples, spec.n_annotators))
    flip_to = rng.integers(0, spec.n_classes - 1,
                           size=(spec.n_samples, spec.n_annotators))

    vocab = [f"c{c}" for c in range(spec.n_classes)]
    entries: dict[tuple[str, str], int] = {}
    clean: dict[tuple[str, str], int] = {}
    for k, a in enumerate(annotators):
        mask = masks[a]
        score = cos[:, mask, :].mean(axis=1)  # [n, C]
        labels = score.argmax(axis=1)
        for i, sid in enumerate(samples):
            y = int(labels[i])
            clean[(sid, a)] = y
            if flip_draw[i, k] < spec.noise_level:
                other = int(flip_to[i, k])
                y = other + 1 if other >= y else other
            entries[(sid, a)] = y

    matrix = AnnotationMatrix(samples, annotators, vocab, entries)
    features = FeatureSet({sid: feats[i] for i, sid in enumerate(samples)})
    return SyntheticWorld(spec, seed, features, masks, matrix, clean)


def standard_world_spec() -> WorldSpec:
    """The reference world used by the experiment harnesses."""
    return WorldSpec(n_samples=2000, n_patches=64, feature_dim=32,
                     n_annotators=12, n_classes=4, mask_size=8,
                     noise_level=0.1)


def world_to_files(world: SyntheticWorld, out_dir) -> dict[str, str]:
    """Write features (QMFS), annotations (CSV), and masks (JSON)."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "features": os.path.join(out_dir, "features.qmfs"),
        "annotations": os.path.join(out_dir, "annotations.csv"),
        "masks": os.path.join(out_dir, "masks.json"),
    }
    save_features(world.features, paths["features"])
    save_annotations(world.annotations, paths["annotations"])
    with open(paths["masks"], "w", encoding="utf-8") as fh:
        json.dump({"spec": asdict(world.spec), "seed": world.seed,
                   "masks": world.masks}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def load_masks(path) -> dict[str, list[int]]:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)["masks"]
