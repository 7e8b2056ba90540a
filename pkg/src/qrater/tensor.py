"""Dense tensors with reverse-mode differentiation.

Implements exactly the operations the annotator-query model needs: plain,
batched and per-row matrix products, layer norm, tanh-GELU, last-dim
softmax, cross-entropy, and a handful of structural ops. Every op checks
its output for NaN/Inf (an error path, never silent) and records a
backward rule on the active :class:`Tape`. A central finite-difference
oracle (`finite_diff_check`) verifies tape gradients independently.

Reductions are delegated to numpy, whose fixed pairwise scheme is
bit-identical across runs for a given shape.
"""

from __future__ import annotations

import math
import struct
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    EmptyLossError,
    FormatError,
    NumericError,
    ShapeError,
)

_DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}
_DTYPE_CODES = {"f32": 0, "f64": 1}
_CODE_TO_NAME = {0: "f32", 1: "f64"}

# tanh-approximation constants for GELU
_GELU_C0 = 0.7978845608
_GELU_C1 = 0.044715

_state = threading.local()


def _tls():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
        _state.dtype = _DTYPES["f32"]
    return _state


def set_default_dtype(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}; expected 'f32' or 'f64'")
    _tls().dtype = _DTYPES[name]


def default_dtype() -> np.dtype:
    return _tls().dtype


class precision:
    """Context manager switching the default dtype, e.g. precision('f64')."""

    def __init__(self, name: str):
        self._name = name
        self._prev = None

    def __enter__(self):
        self._prev = default_dtype()
        set_default_dtype(self._name)
        return self

    def __exit__(self, *exc):
        _tls().dtype = self._prev
        return False


def dtype_name(dt: np.dtype) -> str:
    for name, d in _DTYPES.items():
        if d == dt:
            return name
    raise ValueError(f"unsupported dtype {dt}")


class Tensor:
    """Dense row-major float array, optionally participating in a tape.

    Data is treated as immutable once created (the optimizer mutates leaf
    parameters in place, but only between tapes). `grad` is populated by
    `backward` and accumulates across calls until `reset_grads`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        # longdouble is accepted so the finite-difference oracle can probe
        # with extra headroom; training data stays f32/f64.
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (
                np.float32,
                np.float64,
                np.longdouble,
            ):
                arr = np.asarray(data)
            else:
                arr = np.asarray(data, dtype=default_dtype())
        else:
            arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64, np.longdouble):
            arr = arr.astype(default_dtype())
        # a NaN/Inf anywhere propagates into the sum; full scan only then
        if not np.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
            raise NumericError("tensor holds non-finite entries")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={dtype_name(self.dtype)}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of operations; inputs always precede their outputs.

    A tape is confined to the thread that opened it. Entering the context
    makes it the recording target for ops executed inside.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tls().tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tls().tapes.pop()
        return False

    def __len__(self):
        return len(self.records)


def active_tape() -> Tape | None:
    tapes = _tls().tapes
    return tapes[-1] if tapes else None


def _finish(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result; record it when a tape is active and grads flow."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out._tape = tape
        tape.records.append((out, inputs, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(node) through the tape's records, newest first.

    Every tensor with requires_grad reached from `loss` gets its `grad`
    accumulated (added to any existing value, stored in the tensor's own
    dtype). Each recorded node is visited exactly once.
    """
    if loss.shape != ():
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    if loss._tape is not tape:
        raise ContractError("loss was not produced on this tape")
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, fn in reversed(tape.records):
        g = adjoint.pop(id(out), None)
        if g is None:
            continue  # not on a path to the loss
        if out.requires_grad:
            gc = g.astype(out.dtype, copy=False)
            out.grad = gc if out.grad is None else out.grad + gc
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            holders[id(t)] = t
            prev = adjoint.get(id(t))
            adjoint[id(t)] = gi if prev is None else prev + gi
    for tid, g in adjoint.items():  # whatever remains are leaves
        t = holders[tid]
        gc = g.astype(t.dtype, copy=False)
        t.grad = gc if t.grad is None else t.grad + gc


def reset_grads(tensors) -> None:
    """Zero the grad buffers of the given tensors (allocating if absent)."""
    for t in tensors:
        t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# arithmetic ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return _finish(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _finish(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    sv = a.dtype.type(s)
    return _finish(a.data * sv, (a,), lambda g: (g * sv,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d]; the only broadcast this library permits."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: {x.shape} vs {b.shape}")
    lead = x.data.ndim - 1

    def back(g):
        return g, g.sum(axis=tuple(range(lead))) if lead else g

    return _finish(x.data + b.data, (x, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain 2-D matrix product; dA = dC.Bt, dB = At.dC."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _finish(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def bmatmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match."""
    if a.data.ndim < 3 or a.data.ndim != b.data.ndim:
        raise ShapeError(f"bmatmul: {a.shape} x {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmatmul: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _finish(ad @ bd, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., in] @ w[in, out] (+ b[out]); leading axes flattened internally."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: {x.shape} x {w.shape}")
    xd, wd = x.data, w.data
    flat = xd.reshape(-1, xd.shape[-1])
    out = flat @ wd
    out_shape = xd.shape[:-1] + (wd.shape[1],)
    if b is None:

        def back(g):
            gf = g.reshape(-1, wd.shape[1])
            return (gf @ wd.T).reshape(xd.shape), flat.T @ gf

        return _finish(out.reshape(out_shape), (x, w), back)
    if b.data.ndim != 1 or b.shape[0] != wd.shape[1]:
        raise ShapeError(f"linear bias: {b.shape}")

    def back_b(g):
        gf = g.reshape(-1, wd.shape[1])
        return (gf @ wd.T).reshape(xd.shape), flat.T @ gf, gf.sum(axis=0)

    return _finish((out + b.data).reshape(out_shape), (x, w, b), back_b)


def rows_affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-row affine map: x[B,n,d] with row-specific w[n,d,h] (+ b[n,h])."""
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"rows_affine: {x.shape} x {w.shape}")
    if x.shape[1:] != w.shape[:2]:
        raise ShapeError(f"rows_affine: {x.shape} x {w.shape}")
    xd, wd = x.data, w.data
    out = np.einsum("bnd,ndh->bnh", xd, wd)
    if b is None:

        def back(g):
            return (
                np.einsum("bnh,ndh->bnd", g, wd),
                np.einsum("bnd,bnh->ndh", xd, g),
            )

        return _finish(out, (x, w), back)
    if b.shape != (wd.shape[0], wd.shape[2]):
        raise ShapeError(f"rows_affine bias: {b.shape}")

    def back_b(g):
        return (
            np.einsum("bnh,ndh->bnd", g, wd),
            np.einsum("bnd,bnh->ndh", xd, g),
            g.sum(axis=0),
        )

    return _finish(out + b.data, (x, w, b), back_b)


# ---------------------------------------------------------------------------
# structural ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    return _finish(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose_axes(x: Tensor, perm: Sequence[int]) -> Tensor:
    perm = tuple(perm)
    inv = tuple(np.argsort(perm))
    return _finish(x.data.transpose(perm), (x,), lambda g: (g.transpose(inv),))


def swap_last2(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeError(f"swap_last2 on rank-{x.data.ndim} tensor")
    perm = tuple(range(x.data.ndim - 2)) + (x.data.ndim - 1, x.data.ndim - 2)
    return transpose_axes(x, perm)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    sizes = [p.shape[axis] for p in parts]
    offs = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, range(offs[i], offs[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _finish(
        np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back
    )


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if start < 0 or start + length > x.shape[axis]:
        raise IndexError(f"narrow [{start}:{start + length}) out of {x.shape[axis]}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def back(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _finish(x.data[idx].copy(), (x,), back)


def flat_pick(x: Tensor, index: int) -> Tensor:
    """Scalar view of one element of the flattened tensor."""
    if not 0 <= index < x.size:
        raise IndexError(f"flat_pick index {index} out of {x.size}")

    def back(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full.reshape(-1)[index] = g
        return (full,)

    return _finish(x.data.reshape(-1)[index:index + 1].copy().reshape(()), (x,), back)


def expand0(x: Tensor, n: int) -> Tensor:
    """Tile a tensor along a new leading axis; backward sums it away."""
    out = np.broadcast_to(x.data, (n,) + x.shape)
    return _finish(out, (x,), lambda g: (g.sum(axis=0),))


def expand1(x: Tensor, n: int) -> Tensor:
    """x[B, d] -> x[B, n, d] with each middle row identical."""
    if x.data.ndim != 2:
        raise ShapeError(f"expand1 expects rank 2, got {x.shape}")
    out = np.broadcast_to(x.data[:, None, :], (x.shape[0], n, x.shape[1]))
    return _finish(out, (x,), lambda g: (g.sum(axis=1),))


def add_frame_bias(x: Tensor, pe: Tensor) -> Tensor:
    """x[T, n, d] + pe[T, d], one bias vector per frame."""
    if x.data.ndim != 3 or pe.data.ndim != 2 or x.shape[::2] != pe.shape:
        raise ShapeError(f"add_frame_bias: {x.shape} vs {pe.shape}")
    return _finish(x.data + pe.data[:, None, :], (x, pe), lambda g: (g, g.sum(axis=1)))


def mean_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    inv = x.dtype.type(1.0 / n)

    def back(g):
        return (np.repeat(np.expand_dims(g * inv, axis), n, axis=axis),)

    return _finish(x.data.mean(axis=axis), (x,), back)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def back(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _finish(np.asarray(x.data.sum(), dtype=x.dtype).reshape(()), (x,), back)


# ---------------------------------------------------------------------------
# nonlinearities and losses


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    c0 = xd.dtype.type(_GELU_C0)
    c1 = xd.dtype.type(_GELU_C1)
    half = xd.dtype.type(0.5)
    sq = xd * xd
    t = np.tanh(c0 * (xd + c1 * sq * xd))

    def back(g):
        d_inner = c0 * (1 + 3 * c1 * sq)
        return (g * (half * (1 + t) + half * xd * (1 - t * t) * d_inner),)

    return _finish(half * xd * (1 + t), (x,), back)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Stable softmax over the last axis; each slice sums to 1."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax over empty last dimension")
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _finish(y, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-slice standardization over the last axis, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affines must be ({d},)")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xn = (xd - mu) * inv
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def back(g):
        dxn = g * gd
        dx = inv * (
            dxn
            - dxn.mean(axis=-1, keepdims=True)
            - xn * (dxn * xn).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xn).sum(axis=lead), g.sum(axis=lead)

    return _finish(xn * gd + beta.data, (x, gamma, beta), back)


def masked_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Sum of per-row cross-entropies; rows with target -1 contribute nothing.

    `logits` has shape [..., C]; `targets` is an integer array of the
    leading shape, -1 marking a missing label. Missing rows get exactly
    zero loss and zero gradient.
    """
    tg = np.asarray(targets, dtype=np.int64)
    ld = logits.data
    if tg.shape != ld.shape[:-1]:
        raise ShapeError(f"targets {tg.shape} vs logits {ld.shape}")
    c = ld.shape[-1]
    if np.any(tg >= c) or np.any(tg < -1):
        raise IndexError(f"class index out of range [0, {c})")
    observed = tg >= 0
    if not observed.any():
        raise EmptyLossError("no observed labels in loss")
    m = ld.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(ld - m).sum(axis=-1))
    picked = np.take_along_axis(ld, np.maximum(tg, 0)[..., None], axis=-1)[..., 0]
    loss = np.asarray(((lse - picked) * observed).sum(), dtype=ld.dtype).reshape(())

    def back(g):
        soft = np.exp(ld - m)
        soft /= soft.sum(axis=-1, keepdims=True)
        flat = soft.reshape(-1, c)
        tflat = tg.reshape(-1)
        rows = np.arange(flat.shape[0])
        flat[rows[tflat >= 0], tflat[tflat >= 0]] -= 1
        flat[tflat < 0] = 0
        return (g * flat.reshape(ld.shape),)

    return _finish(loss, (logits,), back)


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a single 1-D logit vector."""
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy expects a 1-D vector, got {logits.shape}")
    if not 0 <= target < logits.shape[0]:
        raise IndexError(f"target {target} out of range [0, {logits.shape[0]})")
    return masked_cross_entropy(reshape(logits, (1, logits.shape[0])), [target])


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_check(f, x: Tensor, h: float = 1e-4) -> float:
    """Max relative error between tape gradients of f and central differences.

    The finite-difference side evaluates f at extended precision (the oracle
    needs headroom); the tape side runs in x's own dtype, so the returned
    error measures the tape's accuracy. Vector-valued f is checked Jacobian
    entry by Jacobian entry. Denominator is max(|a|, |b|, 1e-8).
    """
    if not 1e-6 <= h <= 1e-2:
        raise ContractError(f"h={h} outside [1e-6, 1e-2]")
    y1 = f(Tensor(x.data.copy()))
    y2 = f(Tensor(x.data.copy()))
    if not np.array_equal(y1.data, y2.data):
        raise ContractError("f is not deterministic under double evaluation")
    n_out = 1 if y1.shape == () else y1.size

    rows = []
    for j in range(n_out):
        leaf = Tensor(x.data.copy(), requires_grad=True)
        with Tape() as tape:
            y = f(leaf)
            s = y if y.shape == () else flat_pick(y, j)
        backward(tape, s)
        rows.append(leaf.grad.astype(np.float64).reshape(-1))
    jac = np.stack(rows)

    wide = x.data.astype(np.longdouble)
    step = np.longdouble(h)
    flat = wide.reshape(-1)
    fd = np.empty(jac.shape, dtype=np.float64)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += step
        xm = flat.copy()
        xm[i] -= step
        yp = f(Tensor(xp.reshape(wide.shape))).data.astype(np.longdouble)
        ym = f(Tensor(xm.reshape(wide.shape))).data.astype(np.longdouble)
        fd[:, i] = ((yp - ym) / (2 * step)).astype(np.float64).reshape(-1)

    denom = np.maximum(np.maximum(np.abs(jac), np.abs(fd)), 1e-8)
    return float(np.max(np.abs(jac - fd) / denom))


# ---------------------------------------------------------------------------
# serialization: "QMTN" | u8 dtype code | u8 rank | u32 extents | payload

_MAGIC = b"QMTN"


def write_tensor(fh, t: Tensor) -> int:
    """Append one tensor record to a binary stream; returns bytes written."""
    name = dtype_name(t.dtype)
    header = _MAGIC + struct.pack(
        "<BB", _DTYPE_CODES[name], t.data.ndim
    ) + struct.pack(f"<{t.data.ndim}I", *t.shape)
    payload = np.ascontiguousarray(t.data, dtype=t.dtype.newbyteorder("<")).tobytes()
    fh.write(header)
    fh.write(payload)
    return len(header) + len(payload)


def read_tensor(fh) -> Tensor:
    magic = fh.read(4)
    if magic != _MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    head = fh.read(2)
    if len(head) != 2:
        raise FormatError("truncated tensor header")
    code, rank = struct.unpack("<BB", head)
    if code not in _CODE_TO_NAME:
        raise FormatError(f"unknown dtype code {code}")
    ext = fh.read(4 * rank)
    if len(ext) != 4 * rank:
        raise FormatError("truncated tensor extents")
    shape = struct.unpack(f"<{rank}I", ext)
    dt = _DTYPES[_CODE_TO_NAME[code]].newbyteorder("<")
    n = int(np.prod(shape)) if rank else 1
    payload = fh.read(n * dt.itemsize)
    if len(payload) != n * dt.itemsize:
        raise FormatError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype=dt).reshape(shape)
    return Tensor(arr.astype(_DTYPES[_CODE_TO_NAME[code]]))


def save_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)
