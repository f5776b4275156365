"""Minimal dense-tensor engine with tape-based reverse-mode differentiation.

Just enough machinery to train the small embedding network and to
backpropagate feature-distance losses down to input pixels: dense float
tensors, an explicit per-computation tape, and the handful of primitives
the network needs. Storage is float32; reductions accumulate in float64
so that results are reproducible and finite-difference checks stay tight.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op."""


class ZeroGradientError(ValueError):
    """Raised by l1_normalize on an all-zero input; callers skip the update."""


class Tensor:
    """Dense N-d float array with an optional gradient slot.

    `data` is stored row-major (C order). `grad` is populated by
    `backward` for every tensor that `requires_grad` and is reachable
    from the seed; contributions from multiple uses accumulate.
    """

    __slots__ = ("data", "requires_grad", "grad", "produced")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.produced = False  # set when emitted by a recorded op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, contribution):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += contribution.astype(self.data.dtype, copy=False)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    op: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable  # upstream grad ndarray -> tuple of input grads (or None)


@dataclass
class Tape:
    """Ordered record of differentiable ops for one computation.

    Explicit and per-computation: independent computations get
    independent tapes and share no state.
    """

    records: list = field(default_factory=list)

    def record(self, op, inputs, output, backward_fn):
        self.records.append(_Record(op, tuple(inputs), output, backward_fn))

    @property
    def output(self):
        if not self.records:
            return None
        return self.records[-1].output


def backward(tape: Tape, seed) -> None:
    """Replay the tape in reverse, accumulating grads into requires_grad tensors.

    `seed` (Tensor or array) must match the shape of the tape's final output.
    """
    out = tape.output
    if out is None:
        return
    seed_arr = seed.data if isinstance(seed, Tensor) else np.asarray(seed)
    if tuple(seed_arr.shape) != tuple(out.shape):
        raise ShapeError(
            f"backward: seed shape {tuple(seed_arr.shape)} does not match "
            f"tape output shape {tuple(out.shape)}"
        )

    pending = {id(out): seed_arr.astype(out.dtype, copy=True)}
    for rec in reversed(tape.records):
        g = pending.pop(id(rec.output), None)
        if g is None:
            continue
        if rec.output.requires_grad:
            rec.output.accumulate_grad(g)
        for inp, contrib in zip(rec.inputs, rec.backward_fn(g)):
            if contrib is None or not isinstance(inp, Tensor):
                continue
            if id(inp) in pending:
                pending[id(inp)] += contrib
            else:
                pending[id(inp)] = np.array(contrib, dtype=inp.dtype)
    # whatever is left belongs to leaves (tensors never produced by a recorded op)
    for rec in reversed(tape.records):
        for inp in rec.inputs:
            if isinstance(inp, Tensor) and id(inp) in pending and inp.requires_grad:
                inp.accumulate_grad(pending.pop(id(inp)))


def _result_dtype(*tensors):
    for t in tensors:
        if isinstance(t, Tensor) and t.dtype == np.float64:
            return np.float64
    return DEFAULT_DTYPE


def _needs_grad(*tensors):
    return any(isinstance(t, Tensor) and t.requires_grad for t in tensors)


def _emit(tape, op, inputs, out_data, backward_fn, dtype):
    out = Tensor(out_data, requires_grad=_needs_grad(*inputs), dtype=dtype)
    if tape is not None and out.requires_grad:
        out.produced = True
        tape.record(op, inputs, out, backward_fn)
    return out


def _wants_grad(t):
    # leaf tensors without requires_grad never need an input gradient;
    # skipping them saves the most expensive conv backward path
    return isinstance(t, Tensor) and (t.requires_grad or t.produced)


def _require_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


# ---------------------------------------------------------------------------
# primitives
#
# Elementwise and conv ops compute at the operands' storage dtype
# (float32 unless a float64 tensor flows in, as gradient checks do);
# gemm-backed dense layers and every scalar reduction accumulate in
# float64 so features, losses and distances are reproducible and
# batch-composition independent.


def add(tape, a, b):
    _require_same_shape("add", a, b)
    return _emit(tape, "add", (a, b), a.data + b.data, lambda g: (g, g), _result_dtype(a, b))


def multiply(tape, a, b):
    _require_same_shape("multiply", a, b)
    ad, bd = a.data, b.data
    return _emit(tape, "multiply", (a, b), ad * bd,
                 lambda g: (g * bd, g * ad), _result_dtype(a, b))


def matmul(tape, a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {tuple(a.shape)} @ {tuple(b.shape)} do not conform")
    ad, bd = a.data.astype(np.float64, copy=False), b.data.astype(np.float64, copy=False)

    def bwd(g):
        return (g @ bd.T if _wants_grad(a) else None,
                ad.T @ g if _wants_grad(b) else None)

    return _emit(tape, "matmul", (a, b), ad @ bd, bwd, _result_dtype(a, b))


def relu(tape, a):
    mask = a.data > 0
    return _emit(tape, "relu", (a,), np.maximum(a.data, 0),
                 lambda g: (g * mask,), _result_dtype(a))


def flatten(tape, a):
    if a.data.ndim < 2:
        raise ShapeError(f"flatten: need at least 2 dims, got shape {tuple(a.shape)}")
    shape = a.shape
    return _emit(tape, "flatten", (a,), a.data.reshape(shape[0], -1),
                 lambda g: (g.reshape(shape),), _result_dtype(a))


def linear(tape, x, w, b=None):
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {tuple(x.shape)} incompatible with weight {tuple(w.shape)}")
    xd = x.data.astype(np.float64, copy=False)
    wd = w.data.astype(np.float64, copy=False)
    out = xd @ wd
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {tuple(b.shape)} != ({w.shape[1]},)")
        out = out + b.data

    def bwd(g):
        gx = g @ wd.T if _wants_grad(x) else None
        gw = xd.T @ g if _wants_grad(w) else None
        gb = g.sum(axis=0, dtype=np.float64) if b is not None and _wants_grad(b) else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _emit(tape, "linear", inputs, out, bwd, _result_dtype(x, w, b))


def conv2d(tape, x, w, b=None, pad=0):
    """Cross-correlation with square kernels, stride 1.

    Computed as a sum of kernel-offset gemms, which avoids the big
    gather copies of an im2col layout at these image sizes.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(
            f"conv2d: need 4-d input/kernel, got {tuple(x.shape)} and {tuple(w.shape)}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if c != cw:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {cw}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    if b is not None and b.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {tuple(b.shape)} != ({f},)")

    dtype = _result_dtype(x, w, b)
    ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    hp, wp = h + 2 * pad, wd + 2 * pad
    # kernel as a (kh*kw*c, f) matrix matching the column layout below
    wmat = w.data.astype(dtype, copy=False).transpose(2, 3, 1, 0).reshape(kh * kw * c, f)

    # channels-last padded input; columns gathered by whole-slice copies
    xq = np.zeros((n, hp, wp, c), dtype=dtype)
    xq[:, pad:pad + h, pad:pad + wd, :] = x.data.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, kh * kw, c), dtype=dtype)
    for dy in range(kh):
        for dx in range(kw):
            cols[:, :, :, dy * kw + dx, :] = xq[:, dy:dy + ho, dx:dx + wo, :]
    cols2d = cols.reshape(n * ho * wo, kh * kw * c)

    out = cols2d @ wmat
    if b is not None:
        out = out + b.data.astype(dtype, copy=False)
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def bwd(g):
        gq = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        gw = None
        if _wants_grad(w):
            gw = (cols2d.T @ gq).reshape(kh, kw, c, f).transpose(3, 2, 0, 1)
        gx = None
        if _wants_grad(x):
            gcols = (gq @ wmat.T).reshape(n, ho, wo, kh * kw, c)
            gxq = np.zeros((n, hp, wp, c), dtype=gq.dtype)
            for dy in range(kh):
                for dx in range(kw):
                    gxq[:, dy:dy + ho, dx:dx + wo, :] += gcols[:, :, :, dy * kw + dx, :]
            gx = gxq[:, pad:pad + h, pad:pad + wd, :].transpose(0, 3, 1, 2)
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64) if b is not None and _wants_grad(b) else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _emit(tape, "conv2d", inputs, out, bwd, dtype)


def maxpool2x2(tape, x):
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2x2: need 4-d input with even H,W, got {tuple(x.shape)}")
    n, c, h, w = x.shape
    quads = (x.data[:, :, 0::2, 0::2], x.data[:, :, 0::2, 1::2],
             x.data[:, :, 1::2, 0::2], x.data[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def bwd(g):
        # first-max-wins routing keeps ties deterministic and single-routed
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for k, (sy, sx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = (quads[k] == out) & ~taken
            taken |= hit
            gx[:, :, sy::2, sx::2] = np.where(hit, g, 0)
        return (gx,)

    return _emit(tape, "maxpool2x2", (x,), out, bwd, _result_dtype(x))


def batch_mean(tape, x):
    """Mean over all elements, as a scalar tensor."""
    n = x.size
    out = np.asarray(x.data.sum(dtype=np.float64) / n)
    return _emit(tape, "batch_mean", (x,), out,
                 lambda g: (np.broadcast_to(g / n, x.shape),), _result_dtype(x))


def softmax_cross_entropy(tape, logits, targets):
    """Per-sample cross-entropy of softmax(logits) against integer targets."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-d, got {tuple(logits.shape)}")
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: targets shape {tuple(t.shape)} != ({logits.shape[0]},)")
    z = logits.data.astype(np.float64, copy=False)
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    log_probs = (z - zmax) - np.log(ez.sum(axis=1, keepdims=True))
    losses = -log_probs[np.arange(t.size), t]
    probs = ez / ez.sum(axis=1, keepdims=True)

    def bwd(g):
        gz = probs.copy()
        gz[np.arange(t.size), t] -= 1.0
        return (gz * g[:, None],)

    return _emit(tape, "softmax_cross_entropy", (logits,), losses, bwd, _result_dtype(logits))


def squared_l2_distance(tape, f_a, f_b):
    """Sum of squared elementwise differences, as a scalar tensor."""
    _require_same_shape("squared_l2_distance", f_a, f_b)
    diff = f_a.data.astype(np.float64, copy=False) - f_b.data.astype(np.float64, copy=False)
    out = np.asarray((diff * diff).sum())

    def bwd(g):
        core = 2.0 * diff * g
        return (core if _wants_grad(f_a) else None,
                -core if _wants_grad(f_b) else None)

    return _emit(tape, "squared_l2_distance", (f_a, f_b), out, bwd, _result_dtype(f_a, f_b))


_PRIMITIVES = {
    "add": add,
    "multiply": multiply,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "maxpool2x2": maxpool2x2,
    "flatten": flatten,
    "linear": linear,
    "batch_mean": batch_mean,
    "softmax_cross_entropy": softmax_cross_entropy,
    "squared_l2_distance": squared_l2_distance,
}


def forward_primitive(tape, kind, inputs, params=None):
    """Dispatch a primitive by name; `params` carries op keyword arguments."""
    if kind not in _PRIMITIVES:
        raise KeyError(f"unknown primitive {kind!r}")
    return _PRIMITIVES[kind](tape, *inputs, **(params or {}))


# ---------------------------------------------------------------------------
# non-taped helpers used by the attack update rules


def sign_elementwise(t):
    """Elementwise sign with sign(0) = 0."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    return np.sign(arr)


def l1_norm(arr):
    return float(np.abs(arr).sum(dtype=np.float64))


def l1_normalize(t):
    """Scale so the L1 norm is 1; raises ZeroGradientError on zero input."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    norm = l1_norm(arr)
    if norm == 0.0:
        raise ZeroGradientError("l1_normalize: input has zero L1 norm")
    return (arr.astype(np.float64) / norm).astype(arr.dtype)


def sgd_momentum_step(params, grads, lr, momentum, buffers):
    """In-place update: buffer <- momentum*buffer + grad; param <- param - lr*buffer."""
    if not (len(params) == len(grads) == len(buffers)):
        raise ShapeError("sgd_momentum_step: params, grads and buffers must align")
    for p, g, buf in zip(params, grads, buffers):
        garr = g.data if isinstance(g, Tensor) else np.asarray(g)
        if garr.shape != p.data.shape or buf.shape != p.data.shape:
            raise ShapeError(
                f"sgd_momentum_step: mismatched shapes {tuple(p.data.shape)} / "
                f"{tuple(garr.shape)} / {tuple(buf.shape)}")
        buf *= momentum
        buf += garr
        p.data -= (lr * buf).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float

    @property
    def passed(self):
        return self.max_rel_err < self.tol


def check_gradient(f, x, h=1e-5, tol=1e-3):
    """Compare the taped gradient of scalar-valued `f` against central differences.

    `f(tape, x)` must return a scalar tensor. The check runs on float64
    clones of `x` so the finite-difference oracle is not drowned by
    storage rounding; the backward rules under test are dtype-independent.
    """
    if h <= 0:
        raise ValueError("check_gradient: h must be positive")
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True, dtype=np.float64)
    tape = Tape()
    out = f(tape, x64)
    if out.data.ndim != 0:
        raise ShapeError(f"check_gradient: f must be scalar-valued, got shape {tuple(out.shape)}")
    backward(tape, np.asarray(1.0))
    analytic = x64.grad.copy() if x64.grad is not None else np.zeros_like(x64.data)

    numeric = np.zeros_like(x64.data)
    flat = x64.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(None, x64).data)
        flat[i] = orig - h
        lo = float(f(None, x64).data)
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
    return GradCheckReport(max_rel_err=max_rel, tol=tol)
