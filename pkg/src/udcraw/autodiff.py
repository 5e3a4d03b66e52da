"""Reverse-mode automatic differentiation over dense numpy tensors.

The engine records every operation on an explicit :class:`Tape` and replays
it in reverse to obtain gradients. Backward rules are themselves written in
terms of the public ops, so running :func:`grad` with ``create_graph=True``
records the adjoint computation on the same tape; a second backward pass
through that extended tape yields second-order derivatives. This is what the
critic's gradient penalty needs: the norm of a first-order gradient is a
graph node that gets differentiated again during the critic update.

Deliberate restrictions keep the backward rules auditable:

* binary ops require identical shapes (use :func:`broadcast_to` explicitly),
* dtypes are float32 or float64 and must match across operands,
* tensor data is immutable (arrays are copied on construction and marked
  read-only), so values saved for backward can never be stale,
* a tape and its tensors belong to one thread for the duration of a pass.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for engine errors."""


class DimensionError(AutodiffError):
    """Operand shapes or ranks violate an op's contract."""


class ContractError(AutodiffError):
    """An op was used outside its documented preconditions."""


class NumericsError(AutodiffError):
    """An op would have produced NaN/Inf on finite inputs."""


_FLOAT_DTYPES = (np.float32, np.float64)
_tid_counter = itertools.count(1)
_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Temporarily disable recording (fast path for plain backward passes)."""
    stack = _tape_stack()
    saved, _state.stack = stack, []
    try:
        yield
    finally:
        _state.stack = saved


class Tensor:
    """Dense n-d array with an immutable payload.

    ``requires_grad`` marks leaves the caller wants derivatives for; it is
    propagated to op outputs only while a tape is active.
    """

    __slots__ = ("data", "requires_grad", "tid")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.tid = next(_tid_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars go through scale/add_scalar, tensors through
    # the strict same-shape binary ops.
    def __add__(self, other):
        return add_scalar(self, float(other)) if _is_number(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if _is_number(other):
            return add_scalar(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        return scale(self, float(other)) if _is_number(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if _is_number(other):
            return scale(self, 1.0 / float(other))
        return mul(self, reciprocal(other))

    def __neg__(self):
        return scale(self, -1.0)


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating))


def _wrap(arr: np.ndarray) -> Tensor:
    """Wrap a freshly computed array without the construction copy."""
    t = Tensor.__new__(Tensor)
    if not arr.flags.c_contiguous or arr.base is not None:
        arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    t.data = arr
    t.requires_grad = False
    t.tid = next(_tid_counter)
    return t


def zeros(shape, dtype=np.float64) -> Tensor:
    return _wrap(np.zeros(shape, dtype=dtype))


def zeros_like(t: Tensor) -> Tensor:
    return _wrap(np.zeros(t.shape, dtype=t.dtype))


def ones_like(t: Tensor) -> Tensor:
    return _wrap(np.ones(t.shape, dtype=t.dtype))


class OpRecord:
    """One recorded operation: who produced what from which inputs."""

    __slots__ = ("op", "input_ids", "output_id", "backward")

    def __init__(self, op: str, input_ids: tuple, output_id: int,
                 backward: Callable[[Tensor], tuple]):
        self.op = op
        self.input_ids = input_ids
        self.output_id = output_id
        self.backward = backward


class Tape:
    """Ordered record of operations, topological by construction.

    Use as a context manager; ops executed inside record themselves here.
    Tapes nest (innermost wins), which keeps independent passes isolated.
    """

    def __init__(self):
        self.records: list[OpRecord] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)


class Parameter:
    """Named, trainable tensor slot.

    The slot is mutable (optimizers rebind ``tensor``); the tensors inside
    are immutable as everywhere else.
    """

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, tensor: Tensor):
        if not tensor.requires_grad:
            raise ContractError(f"parameter {name!r} must require gradients")
        self.name = name
        self.tensor = tensor

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def _record(op: str, inputs: Sequence[Tensor], out: Tensor,
            backward: Callable[[Tensor], tuple]) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(OpRecord(op, tuple(t.tid for t in inputs), out.tid, backward))
    return out


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")
    if a.dtype != b.dtype:
        raise DimensionError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")
    out = _wrap(a.data + b.data)

    def bw(g: Tensor):
        return (g if a.requires_grad else None,
                g if b.requires_grad else None)

    return _record("add", (a, b), out, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")
    out = _wrap(a.data - b.data)

    def bw(g: Tensor):
        return (g if a.requires_grad else None,
                scale(g, -1.0) if b.requires_grad else None)

    return _record("sub", (a, b), out, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    out = _wrap(a.data * b.data)

    def bw(g: Tensor):
        return (mul(g, b) if a.requires_grad else None,
                mul(g, a) if b.requires_grad else None)

    return _record("mul", (a, b), out, bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _wrap(a.data * c)

    def bw(g: Tensor):
        return (scale(g, c),)

    return _record("scale", (a,), out, bw)


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = _wrap(a.data + float(c))

    def bw(g: Tensor):
        return (g,)

    return _record("add_scalar", (a,), out, bw)


def square(a: Tensor) -> Tensor:
    out = _wrap(a.data * a.data)

    def bw(g: Tensor):
        return (mul(g, scale(a, 2.0)),)

    return _record("square", (a,), out, bw)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericsError("sqrt of negative input")
    out = _wrap(np.sqrt(a.data))

    def bw(g: Tensor):
        # d sqrt(x) = 1 / (2 sqrt(x)); errors at exactly zero via reciprocal.
        return (mul(g, reciprocal(scale(out, 2.0))),)

    return _record("sqrt", (a,), out, bw)


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0):
        raise NumericsError("reciprocal of zero")
    res = np.reciprocal(a.data)
    if not np.all(np.isfinite(res)):
        raise NumericsError("reciprocal overflow")
    out = _wrap(res)

    def bw(g: Tensor):
        return (scale(mul(g, square(out)), -1.0),)

    return _record("reciprocal", (a,), out, bw)


def tanh(a: Tensor) -> Tensor:
    out = _wrap(np.tanh(a.data))

    def bw(g: Tensor):
        return (mul(g, add_scalar(scale(square(out), -1.0), 1.0)),)

    return _record("tanh", (a,), out, bw)


def relu(a: Tensor) -> Tensor:
    out = _wrap(np.maximum(a.data, 0))
    mask = _wrap((a.data > 0).astype(a.dtype))

    def bw(g: Tensor):
        return (mul(g, mask),)

    return _record("relu", (a,), out, bw)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    slope = float(slope)
    out = _wrap(np.where(a.data >= 0, a.data, a.data * slope))
    mask = _wrap(np.where(a.data >= 0, 1.0, slope).astype(a.dtype))

    def bw(g: Tensor):
        return (mul(g, mask),)

    return _record("leaky_relu", (a,), out, bw)


def absolute(a: Tensor) -> Tensor:
    out = _wrap(np.abs(a.data))
    sign = _wrap(np.sign(a.data).astype(a.dtype))

    def bw(g: Tensor):
        return (mul(g, sign),)

    return _record("abs", (a,), out, bw)


# ---------------------------------------------------------------------------
# Shape / layout ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = _wrap(a.data.reshape(shape))
    orig = a.shape

    def bw(g: Tensor):
        return (reshape(g, orig),)

    return _record("reshape", (a,), out, bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    out = _wrap(np.transpose(a.data, axes))
    inv = tuple(int(i) for i in np.argsort(axes))

    def bw(g: Tensor):
        return (transpose(g, inv),)

    return _record("transpose", (a,), out, bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast (each source dim must equal the target or be 1)."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != a.ndim or any(s != d and d != 1 for s, d in zip(shape, a.shape)):
        raise DimensionError(f"broadcast_to: {a.shape} -> {shape} not a pure expansion")
    out = _wrap(np.broadcast_to(a.data, shape))
    orig = a.shape

    def bw(g: Tensor):
        return (sum_to(g, orig),)

    return _record("broadcast_to", (a,), out, bw)


def sum_to(a: Tensor, shape) -> Tensor:
    """Sum down to ``shape`` (adjoint of broadcast_to; () sums everything)."""
    shape = tuple(int(s) for s in shape)
    if shape == ():
        out = _wrap(np.sum(a.data))
    else:
        if len(shape) != a.ndim or any(s != d and s != 1 for d, s in zip(a.shape, shape)):
            raise DimensionError(f"sum_to: {a.shape} -> {shape} not a pure reduction")
        axes = tuple(i for i in range(a.ndim) if shape[i] == 1 and a.shape[i] != 1)
        out = _wrap(np.sum(a.data, axis=axes, keepdims=True)) if axes else _wrap(a.data.copy())
    orig = a.shape

    def bw(g: Tensor):
        if g.shape == orig:
            return (g,)
        if g.shape == ():
            return (broadcast_to(reshape(g, (1,) * len(orig)), orig),)
        return (broadcast_to(g, orig),)

    return _record("sum_to", (a,), out, bw)


def sum_all(a: Tensor) -> Tensor:
    return sum_to(a, ())


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of nothing")
    out = _wrap(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]

    def bw(g: Tensor):
        grads, start = [], 0
        for t, sz in zip(tensors, sizes):
            grads.append(narrow(g, axis, start, sz) if t.requires_grad else None)
            start += sz
        return tuple(grads)

    return _record("concat", tuple(tensors), out, bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    out = _wrap(a.data[tuple(idx)])
    total = a.shape[axis]

    def bw(g: Tensor):
        return (embed(g, axis, start, total),)

    return _record("narrow", (a,), out, bw)


def embed(a: Tensor, axis: int, start: int, total: int) -> Tensor:
    """Place ``a`` into a zero tensor whose ``axis`` has size ``total``."""
    shape = list(a.shape)
    shape[axis] = total
    buf = np.zeros(shape, dtype=a.dtype)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + a.shape[axis])
    buf[tuple(idx)] = a.data
    out = _wrap(buf)
    length = a.shape[axis]

    def bw(g: Tensor):
        return (narrow(g, axis, start, length),)

    return _record("embed", (a,), out, bw)


def pad2d(a: Tensor, pads) -> Tensor:
    """Zero-pad the last two axes of an NCHW tensor by (top, bottom, left, right)."""
    t, b, l, r = (int(x) for x in pads)
    out = _wrap(np.pad(a.data, ((0, 0), (0, 0), (t, b), (l, r))))

    def bw(g: Tensor):
        return (crop2d(g, (t, b, l, r)),)

    return _record("pad2d", (a,), out, bw)


def crop2d(a: Tensor, crops) -> Tensor:
    """Drop (top, bottom, left, right) rows/cols from the last two axes."""
    t, b, l, r = (int(x) for x in crops)
    H, W = a.shape[-2], a.shape[-1]
    out = _wrap(a.data[..., t:H - b, l:W - r])

    def bw(g: Tensor):
        return (pad2d(g, (t, b, l, r)),)

    return _record("crop2d", (a,), out, bw)


def dilate2d(a: Tensor, step: int) -> Tensor:
    """Insert step-1 zeros between spatial samples (transpose of strided read)."""
    step = int(step)
    if step == 1:
        return a
    N, C, H, W = a.shape
    buf = np.zeros((N, C, (H - 1) * step + 1, (W - 1) * step + 1), dtype=a.dtype)
    buf[:, :, ::step, ::step] = a.data
    out = _wrap(buf)

    def bw(g: Tensor):
        return (undilate2d(g, step),)

    return _record("dilate2d", (a,), out, bw)


def undilate2d(a: Tensor, step: int) -> Tensor:
    step = int(step)
    if step == 1:
        return a
    out = _wrap(a.data[:, :, ::step, ::step])

    def bw(g: Tensor):
        return (dilate2d(g, step),)

    return _record("undilate2d", (a,), out, bw)


def flip2d(a: Tensor) -> Tensor:
    """Reverse both spatial axes (its own adjoint)."""
    out = _wrap(a.data[..., ::-1, ::-1])

    def bw(g: Tensor):
        return (flip2d(g),)

    return _record("flip2d", (a,), out, bw)


def upsample_nearest2x(a: Tensor) -> Tensor:
    """Replicate every pixel of an NCHW tensor into a 2x2 block."""
    if a.ndim != 4:
        raise DimensionError("upsample_nearest2x expects NCHW")
    N, C, H, W = a.shape
    r = reshape(a, (N, C, H, 1, W, 1))
    r = broadcast_to(r, (N, C, H, 2, W, 2))
    return reshape(r, (N, C, 2 * H, 2 * W))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul is 2-d only")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise DimensionError("matmul: dtype mismatch")
    out = _wrap(a.data @ b.data)

    def bw(g: Tensor):
        ga = matmul(g, transpose(b, (1, 0))) if a.requires_grad else None
        gb = matmul(transpose(a, (1, 0)), g) if b.requires_grad else None
        return (ga, gb)

    return _record("matmul", (a, b), out, bw)


# ---------------------------------------------------------------------------
# Convolution and normalization
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    N, C, H, W = x.shape
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x, (N, C, kh, kw, Ho, Wo), (s0, s1, s2, s3, s2 * stride, s3 * stride))
    return cols.reshape(N, C * kh * kw, Ho * Wo), Ho, Wo


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of NCHW input with a KCkhkw kernel stack."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects NCHW input and KCkk kernel")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input channels {x.shape[1]} != kernel channels {w.shape[1]}")
    if x.dtype != w.dtype:
        raise DimensionError("conv2d: dtype mismatch")
    stride, padding = int(stride), int(padding)
    if stride < 1:
        raise ContractError("conv2d: stride must be >= 1")
    N, C, H, W = x.shape
    K, _, kh, kw = w.shape
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError("conv2d: kernel larger than padded input")

    xa = x.data
    if padding:
        xa = np.pad(xa, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, Ho, Wo = _im2col(xa, kh, kw, stride)
    out = _wrap(np.matmul(w.data.reshape(K, C * kh * kw), cols).reshape(N, K, Ho, Wo))

    rh = (H + 2 * padding - kh) % stride
    rw = (W + 2 * padding - kw) % stride

    def bw(g: Tensor):
        gd = dilate2d(g, stride)
        gx = gw = None
        if x.requires_grad:
            gp = pad2d(gd, (kh - 1, kh - 1 + rh, kw - 1, kw - 1 + rw))
            wf = transpose(flip2d(w), (1, 0, 2, 3))
            full = conv2d(gp, wf, 1, 0)
            gx = crop2d(full, (padding, padding, padding, padding)) if padding else full
        if w.requires_grad:
            xp = pad2d(x, (padding, padding, padding, padding)) if padding else x
            xt = transpose(xp, (1, 0, 2, 3))
            gt = transpose(gd, (1, 0, 2, 3))
            gwf = conv2d(xt, gt, 1, 0)
            if rh or rw:
                gwf = crop2d(gwf, (0, rh, 0, rw))
            gw = transpose(gwf, (1, 0, 2, 3))
        return (gx, gw)

    return _record("conv2d", (x, w), out, bw)


def instance_norm(x: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Standardize each (n, c) slice over its spatial extent (biased variance)."""
    if x.ndim != 4:
        raise DimensionError("instance_norm expects NCHW")
    N, C, H, W = x.shape
    if H * W < 2:
        raise ContractError("instance_norm needs at least 2 spatial samples")
    n = H * W
    mu = scale(sum_to(x, (N, C, 1, 1)), 1.0 / n)
    xc = sub(x, broadcast_to(mu, x.shape))
    var = scale(sum_to(square(xc), (N, C, 1, 1)), 1.0 / n)
    inv = reciprocal(sqrt(add_scalar(var, float(epsilon))))
    return mul(xc, broadcast_to(inv, x.shape))


# ---------------------------------------------------------------------------
# Backward driver
# ---------------------------------------------------------------------------

def grad(output: Tensor, inputs: Sequence[Tensor], tape: Tape,
         create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to ``inputs``.

    With ``create_graph=True`` the adjoint computation is recorded on the
    same tape, making the returned gradients differentiable in turn.
    """
    if output.shape != ():
        raise ContractError(f"grad: output must be scalar, got shape {output.shape}")
    if create_graph and _active_tape() is not tape:
        raise ContractError("create_graph requires the tape to still be active")

    wanted = {t.tid for t in inputs}
    gmap: dict[int, Tensor] = {output.tid: _wrap(np.ones((), dtype=output.dtype))}
    snapshot = tape.records[:len(tape.records)]

    def run():
        for rec in reversed(snapshot):
            g = gmap.get(rec.output_id)
            if g is None:
                continue
            for tid, gi in zip(rec.input_ids, rec.backward(g)):
                if gi is None:
                    continue
                acc = gmap.get(tid)
                gmap[tid] = gi if acc is None else add(acc, gi)
            if rec.output_id not in wanted:
                del gmap[rec.output_id]

    if create_graph:
        run()
    else:
        with no_grad():
            run()
    return [gmap[t.tid] if t.tid in gmap else zeros_like(t) for t in inputs]


def backward(loss: Tensor, tape: Tape,
             parameters: Iterable[Parameter]) -> dict[str, Tensor]:
    """Gradient map for named parameters; unreachable ones get zeros."""
    params = list(parameters)
    gs = grad(loss, [p.tensor for p in params], tape)
    return {p.name: g for p, g in zip(params, gs)}


def grad_norm_penalty(d_apply: Callable[[Tensor], Tensor], interpolates: Tensor,
                      tape: Tape, squared: bool = True) -> Tensor:
    """Mean over the batch of (||grad_x D(x)||_2 - 1)^2 at the mixed samples.

    ``squared=False`` selects the literal unsquared form for ablation. The
    result participates in a second backward pass, so the critic must be
    differentiable twice along this path.
    """
    if not interpolates.requires_grad:
        raise ContractError("interpolates must require gradients")
    y = d_apply(interpolates)
    if y.ndim > 1:
        raise ContractError("critic output must be per-sample scores or a scalar")
    total = sum_all(y) if y.ndim else y
    (g,) = grad(total, [interpolates], tape, create_graph=True)
    n = interpolates.shape[0]
    sq = reshape(sum_to(square(g), (n,) + (1,) * (interpolates.ndim - 1)), (n,))
    norms = sqrt(sq)
    terms = add_scalar(norms, -1.0)
    if squared:
        terms = square(terms)
    return mean_all(terms)
