"""Annotator-query transformer: each annotator is one learnable query token.

Per block the query tokens pass through shared self-attention (so annotator
representations regularize each other), cross-attend to the input features,
and run a feed-forward sublayer, all pre-layer-norm with residuals. A shared
FC then feeds per-annotator classifier MLPs. Variants switch pieces off:

  full                the architecture above
  no_self_attn        self-attention sublayer removed; annotators decouple
  unified_classifier  one classifier MLP shared by every annotator
  pre_mv_pool         query outputs mean-pooled into a single prediction
  base                no attention at all; pooled features -> classifiers

Sequence inputs are first compressed per frame by a bank of compression
queries, get a learned frame position embedding, and the compressed tokens
of all frames become the cross-attention keys.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as nk
from .errors import ConfigError, ShapeError
from .tensor import Tensor

VARIANTS = ("full", "base", "unified_classifier", "no_self_attn", "pre_mv_pool")


@dataclass(frozen=True)
class ModelConfig:
    n_annotators: int
    n_classes: int
    feature_dim: int
    hidden_dim: int = 64
    n_heads: int = 12
    n_blocks: int = 2
    n_compression_queries: int = 32
    classifier_hidden: int = 64
    variant: str = "full"
    mode: str = "image"
    max_frames: int = 16

    def validate(self) -> None:
        if self.n_annotators < 1:
            raise ConfigError("n_annotators must be >= 1")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        for name in ("feature_dim", "hidden_dim", "n_heads", "n_blocks",
                     "n_compression_queries", "classifier_hidden", "max_frames"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hidden_dim % self.n_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.mode not in ("image", "sequence"):
            raise ConfigError(f"unknown mode {self.mode!r}")

    @property
    def n_logit_rows(self) -> int:
        return 1 if self.variant == "pre_mv_pool" else self.n_annotators

    @property
    def ffn_dim(self) -> int:
        return 4 * self.hidden_dim


@dataclass
class AttentionRecord:
    """Attention weights captured during one forward pass.

    self_attn: per block, [n_heads, n_queries, n_queries] (empty when the
    self-attention sublayer is disabled). cross_attn: per block,
    [n_heads, n_queries, n_keys]. In sequence mode the keys are the
    compressed frame tokens and `keys_per_frame` allows reducing key mass
    to per-frame mass.
    """

    self_attn: list[np.ndarray] = field(default_factory=list)
    cross_attn: list[np.ndarray] = field(default_factory=list)
    compression_attn: Optional[np.ndarray] = None
    n_frames: Optional[int] = None
    keys_per_frame: Optional[int] = None

    def all_rows(self):
        """Yield every attention row (for normalization checks)."""
        for block in self.self_attn + self.cross_attn:
            for head in block:
                for row in head:
                    yield row
        if self.compression_attn is not None:
            for frame in self.compression_attn:
                for head in frame:
                    for row in head:
                        yield row

    def frame_mass(self, block: int, head: int) -> np.ndarray:
        """Sum per-frame key mass: [n_queries, n_frames]."""
        if self.n_frames is None:
            raise ShapeError("frame_mass on an image-mode record")
        w = self.cross_attn[block][head]
        nq = w.shape[0]
        return w.reshape(nq, self.n_frames, self.keys_per_frame).sum(axis=2)


# ---------------------------------------------------------------------------
# parameter registry


def _attn_specs(prefix: str, d: int, fin: int):
    # no bias on the key projection: a shared key offset cancels in softmax
    yield f"{prefix}.ln_g", (d,), "ones", False
    yield f"{prefix}.ln_b", (d,), "zeros", False
    yield f"{prefix}.wq", (d, d), "tn", True
    yield f"{prefix}.bq", (d,), "zeros", False
    yield f"{prefix}.wk", (fin, d), "tn", True
    yield f"{prefix}.wv", (fin, d), "tn", True
    yield f"{prefix}.bv", (d,), "zeros", False
    yield f"{prefix}.wo", (d, d), "tn", True
    yield f"{prefix}.bo", (d,), "zeros", False


def _param_specs(cfg: ModelConfig):
    """Yield (name, shape, init, decay) for every learnable tensor."""
    d, a, c = cfg.hidden_dim, cfg.n_annotators, cfg.n_classes
    ch = cfg.classifier_hidden
    if cfg.variant == "base":
        fin = cfg.feature_dim
        yield "cls.w1", (a, fin, ch), "tn", True
        yield "cls.b1", (a, ch), "zeros", False
        yield "cls.w2", (a, ch, c), "tn", True
        yield "cls.b2", (a, c), "zeros", False
        return
    key_dim = d if cfg.mode == "sequence" else cfg.feature_dim
    yield "queries", (a, d), "tn", True
    if cfg.mode == "sequence":
        yield "comp.queries", (cfg.n_compression_queries, d), "tn", True
        yield from _attn_specs("comp", d, cfg.feature_dim)
        yield "frame_pos", (cfg.max_frames, d), "zeros", False
    for i in range(cfg.n_blocks):
        if cfg.variant != "no_self_attn":
            yield from _attn_specs(f"block{i}.sa", d, d)
        yield from _attn_specs(f"block{i}.ca", d, key_dim)
        yield f"block{i}.ffn.ln_g", (d,), "ones", False
        yield f"block{i}.ffn.ln_b", (d,), "zeros", False
        yield f"block{i}.ffn.w1", (d, cfg.ffn_dim), "tn", True
        yield f"block{i}.ffn.b1", (cfg.ffn_dim,), "zeros", False
        yield f"block{i}.ffn.w2", (cfg.ffn_dim, d), "tn", True
        yield f"block{i}.ffn.b2", (d,), "zeros", False
    yield "final_ln_g", (d,), "ones", False
    yield "final_ln_b", (d,), "zeros", False
    yield "out_fc.w", (d, d), "tn", True
    yield "out_fc.b", (d,), "zeros", False
    if cfg.variant in ("unified_classifier", "pre_mv_pool"):
        yield "cls.w1", (d, ch), "tn", True
        yield "cls.b1", (ch,), "zeros", False
        yield "cls.w2", (ch, c), "tn", True
        yield "cls.b2", (c,), "zeros", False
    else:
        yield "cls.w1", (a, d, ch), "tn", True
        yield "cls.b1", (a, ch), "zeros", False
        yield "cls.w2", (a, ch, c), "tn", True
        yield "cls.b2", (a, c), "zeros", False


def param_count(cfg: ModelConfig) -> int:
    """Closed-form learnable-parameter count for a config."""
    d, a, c = cfg.hidden_dim, cfg.n_annotators, cfg.n_classes
    ch, f = cfg.classifier_hidden, cfg.feature_dim

    def attn(fin):
        # ln affine + wq/bq + wk (no bias) + wv/bv + wo/bo
        return 2 * d + 2 * (d * d + d) + fin * d + (fin * d + d)

    def cls(rows, din):
        return rows * (din * ch + ch + ch * c + c)

    if cfg.variant == "base":
        return cls(a, f)
    key_dim = d if cfg.mode == "sequence" else f
    ffn = 2 * d + d * cfg.ffn_dim + cfg.ffn_dim + cfg.ffn_dim * d + d
    block = attn(key_dim) + ffn
    if cfg.variant != "no_self_attn":
        block += attn(d)
    total = a * d + cfg.n_blocks * block + 2 * d + (d * d + d)
    if cfg.mode == "sequence":
        total += cfg.n_compression_queries * d + attn(f) + cfg.max_frames * d
    if cfg.variant in ("unified_classifier", "pre_mv_pool"):
        total += cls(1, d)
    else:
        total += cls(a, d)
    return total


class ModelParams:
    """Named learnable tensors for one model instance.

    Registration order is fixed by the spec generator, each tensor appears
    exactly once, and the total size must equal `param_count(config)`.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        config.validate()
        self.config = config
        self._items: dict[str, Tensor] = {}
        self._decay: dict[str, bool] = {}
        seen_ids = set()
        for name, shape, _init, decay in _param_specs(config):
            if name not in tensors:
                raise ConfigError(f"missing parameter {name!r}")
            t = tensors[name]
            if t.shape != shape:
                raise ShapeError(f"parameter {name}: {t.shape} != {shape}")
            if id(t) in seen_ids:
                raise ConfigError(f"parameter {name!r} registered twice")
            seen_ids.add(id(t))
            self._items[name] = t
            self._decay[name] = decay
        extra = set(tensors) - set(self._items)
        if extra:
            raise ConfigError(f"unexpected parameters: {sorted(extra)}")

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def named(self):
        return self._items.items()

    def tensors(self):
        return list(self._items.values())

    def decays(self, name: str) -> bool:
        return self._decay[name]

    @property
    def total_size(self) -> int:
        return sum(t.size for t in self._items.values())

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._items.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self._items.items():
            np.copyto(t.data, arrays[k])


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(out) > 2 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return out.astype(dtype)


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic init: trunc-normal(0, 0.02^2) weights clipped at 2 sigma,
    layer-norm gamma=1/beta=0, zero biases and frame position embedding."""
    config.validate()
    rng = np.random.default_rng(seed)
    dt = nk.default_dtype()
    tensors = {}
    for name, shape, init, _decay in _param_specs(config):
        if init == "tn":
            arr = _trunc_normal(rng, shape, 0.02, dt)
        elif init == "ones":
            arr = np.ones(shape, dtype=dt)
        else:
            arr = np.zeros(shape, dtype=dt)
        tensors[name] = Tensor(arr, requires_grad=True)
    params = ModelParams(config, tensors)
    assert params.total_size == param_count(config)
    return params


# ---------------------------------------------------------------------------
# forward passes


def _mha(q_src: Tensor, kv_src: Tensor, prefix: str, params: ModelParams,
         n_heads: int, rec_list: Optional[list]) -> Tensor:
    """Multi-head attention; q_src [B,nq,d], kv_src [B,nk,fin] -> [B,nq,d]."""
    b, n_q, d = q_src.shape
    n_k = kv_src.shape[1]
    dh = d // n_heads
    q = nk.linear(q_src, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = nk.linear(kv_src, params[f"{prefix}.wk"])
    v = nk.linear(kv_src, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    q4 = nk.transpose_axes(nk.reshape(q, (b, n_q, n_heads, dh)), (0, 2, 1, 3))
    k4 = nk.transpose_axes(nk.reshape(k, (b, n_k, n_heads, dh)), (0, 2, 1, 3))
    v4 = nk.transpose_axes(nk.reshape(v, (b, n_k, n_heads, dh)), (0, 2, 1, 3))
    scores = nk.scale(nk.bmatmul(q4, nk.swap_last2(k4)), 1.0 / math.sqrt(dh))
    attn = nk.softmax_lastdim(scores)  # [B, H, nq, nk]
    if rec_list is not None:
        rec_list.append(attn.data.copy())
    out = nk.bmatmul(attn, v4)
    out = nk.reshape(nk.transpose_axes(out, (0, 2, 1, 3)), (b, n_q, d))
    return nk.linear(out, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _ln(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return nk.layer_norm(x, params[f"{prefix}.ln_g"], params[f"{prefix}.ln_b"])


def _block(x: Tensor, keys: Tensor, i: int, params: ModelParams,
           cfg: ModelConfig, rec: Optional[AttentionRecord]) -> Tensor:
    if cfg.variant != "no_self_attn":
        xn = _ln(x, params, f"block{i}.sa")
        x = nk.add(x, _mha(xn, xn, f"block{i}.sa", params, cfg.n_heads,
                           rec.self_attn if rec is not None else None))
    xn = _ln(x, params, f"block{i}.ca")
    x = nk.add(x, _mha(xn, keys, f"block{i}.ca", params, cfg.n_heads,
                       rec.cross_attn if rec is not None else None))
    xn = _ln(x, params, f"block{i}.ffn")
    h = nk.gelu(nk.linear(xn, params[f"block{i}.ffn.w1"], params[f"block{i}.ffn.b1"]))
    h = nk.linear(h, params[f"block{i}.ffn.w2"], params[f"block{i}.ffn.b2"])
    return nk.add(x, h)


def _core(keys: Tensor, params: ModelParams, cfg: ModelConfig,
          rec: Optional[AttentionRecord]) -> Tensor:
    """Q-Former trunk over prepared keys [B, n_keys, fin] -> logits [B, rows, C]."""
    b = keys.shape[0]
    if cfg.variant == "base":
        pooled = nk.mean_axis(keys, 1)
        h = nk.expand1(pooled, cfg.n_annotators)
        h = nk.gelu(nk.rows_affine(h, params["cls.w1"], params["cls.b1"]))
        return nk.rows_affine(h, params["cls.w2"], params["cls.b2"])
    x = nk.expand0(params["queries"], b)
    for i in range(cfg.n_blocks):
        x = _block(x, keys, i, params, cfg, rec)
    x = nk.layer_norm(x, params["final_ln_g"], params["final_ln_b"])
    x = nk.linear(x, params["out_fc.w"], params["out_fc.b"])  # [B, A, d]
    if cfg.variant == "pre_mv_pool":
        pooled = nk.mean_axis(x, 1)
        h = nk.gelu(nk.linear(pooled, params["cls.w1"], params["cls.b1"]))
        out = nk.linear(h, params["cls.w2"], params["cls.b2"])
        return nk.reshape(out, (b, 1, cfg.n_classes))
    if cfg.variant == "unified_classifier":
        h = nk.gelu(nk.linear(x, params["cls.w1"], params["cls.b1"]))
        return nk.linear(h, params["cls.w2"], params["cls.b2"])
    h = nk.gelu(nk.rows_affine(x, params["cls.w1"], params["cls.b1"]))
    return nk.rows_affine(h, params["cls.w2"], params["cls.b2"])


def forward_image_batch(features: Tensor, params: ModelParams,
                        cfg: ModelConfig) -> Tensor:
    """Batched image forward: features [B, n_patches, feature_dim] -> logits."""
    if features.data.ndim != 3 or features.shape[-1] != cfg.feature_dim:
        raise ShapeError(
            f"expected [B, n_patches, {cfg.feature_dim}], got {features.shape}")
    return _core(features, params, cfg, None)


def forward_image(features: Tensor, params: ModelParams, cfg: ModelConfig,
                  capture_attention: bool = True):
    """Single-image forward: features [n_patches, feature_dim].

    Returns (logits [n_rows, n_classes], AttentionRecord).
    """
    if cfg.mode != "image":
        raise ConfigError("forward_image on a sequence-mode config")
    if features.data.ndim != 2 or features.shape[1] != cfg.feature_dim:
        raise ShapeError(
            f"expected [n_patches, {cfg.feature_dim}], got {features.shape}")
    rec = AttentionRecord() if capture_attention else None
    n_p = features.shape[0]
    batched = nk.reshape(features, (1, n_p, cfg.feature_dim))
    logits = _core(batched, params, cfg, rec)
    logits = nk.reshape(logits, (cfg.n_logit_rows, cfg.n_classes))
    if rec is not None:
        rec.self_attn = [a[0] for a in rec.self_attn]
        rec.cross_attn = [a[0] for a in rec.cross_attn]
    return logits, rec


def forward_sequence(frame_features: Tensor, params: ModelParams,
                     cfg: ModelConfig, capture_attention: bool = True):
    """Sequence forward: frame_features [T, n_patches, feature_dim].

    Each frame is compressed by the compression queries, the frame position
    embedding is added, and the concatenated compressed tokens become the
    cross-attention keys for the annotator queries.
    """
    if cfg.mode != "sequence":
        raise ConfigError("forward_sequence on an image-mode config")
    if frame_features.data.ndim != 3 or frame_features.shape[2] != cfg.feature_dim:
        raise ShapeError(
            f"expected [T, n_patches, {cfg.feature_dim}], got {frame_features.shape}")
    t = frame_features.shape[0]
    if t > cfg.max_frames:
        raise ConfigError(f"T={t} exceeds max_frames={cfg.max_frames}")
    rec = AttentionRecord() if capture_attention else None
    if cfg.variant == "base":
        n_p = frame_features.shape[1]
        flat = nk.reshape(frame_features, (1, t * n_p, cfg.feature_dim))
        logits = _core(flat, params, cfg, rec)
        return nk.reshape(logits, (cfg.n_logit_rows, cfg.n_classes)), rec
    comp_rec: Optional[list] = [] if capture_attention else None
    comp_q = nk.expand0(params["comp.queries"], t)  # frames as a batch
    compressed = _mha(comp_q, frame_features, "comp", params, cfg.n_heads, comp_rec)
    pe = nk.narrow(params["frame_pos"], 0, 0, t)
    compressed = nk.add_frame_bias(compressed, pe)
    keys = nk.reshape(
        compressed, (1, t * cfg.n_compression_queries, cfg.hidden_dim))
    logits = _core(keys, params, cfg, rec)
    logits = nk.reshape(logits, (cfg.n_logit_rows, cfg.n_classes))
    if rec is not None:
        rec.self_attn = [a[0] for a in rec.self_attn]
        rec.cross_attn = [a[0] for a in rec.cross_attn]
        rec.compression_attn = comp_rec[0] if comp_rec else None
        rec.n_frames = t
        rec.keys_per_frame = cfg.n_compression_queries
    return logits, rec


def total_loss(logits: Tensor, labels: Sequence[Optional[int]]) -> Tensor:
    """Sum of per-annotator cross-entropies over observed labels only."""
    if len(labels) != logits.shape[0]:
        raise ShapeError(
            f"{len(labels)} labels for {logits.shape[0]} logit rows")
    targets = np.asarray([-1 if y is None else int(y) for y in labels],
                         dtype=np.int64)
    return nk.masked_cross_entropy(logits, targets)


# ---------------------------------------------------------------------------
# checkpoints: one binary blob of tensor records + a JSON manifest


def save_checkpoint(params: ModelParams, prefix: str) -> None:
    prefix = str(prefix)
    manifest: dict = {"config": asdict(params.config), "params": {}}
    with open(prefix + ".bin", "wb") as fh:
        offset = 0
        for name, t in params.named():
            manifest["params"][name] = {
                "offset": offset,
                "shape": list(t.shape),
                "dtype": nk.dtype_name(t.dtype),
            }
            offset += nk.write_tensor(fh, t)
    with open(prefix + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(prefix: str) -> ModelParams:
    prefix = str(prefix)
    with open(prefix + ".json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    config = ModelConfig(**manifest["config"])
    tensors = {}
    with open(prefix + ".bin", "rb") as fh:
        for name, meta in manifest["params"].items():
            fh.seek(meta["offset"])
            t = nk.read_tensor(fh)
            if list(t.shape) != meta["shape"]:
                raise ConfigError(f"checkpoint shape mismatch for {name}")
            t.requires_grad = True
            tensors[name] = t
    return ModelParams(config, tensors)
