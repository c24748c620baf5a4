"""Dense NCHW tensors with a reverse-mode differentiation tape.

Only the layer set the segmentation networks need is provided: 2-D
convolution, max pooling, batch normalization, ReLU/sigmoid, bilinear
upsampling, elementwise addition/scaling, summation and a summed binary
cross-entropy. Every operation checks its output for non-finite values and
raises :class:`NumericError` instead of propagating NaN/Inf.

Usage::

    x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
    loss = sum_all(relu(x))
    backward(loss)
    x.grad  # all ones
"""
from __future__ import annotations

import contextlib
import contextvars
import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
BCE_CLAMP = 1e-7


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested operation."""


class NumericError(FloatingPointError):
    """An operation produced (or was fed) a non-finite value."""


_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "vinseg_active_tape", default=None
)
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "vinseg_grad_enabled", default=True
)


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops still compute forward values."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_op_counter = itertools.count()


@dataclass
class _Op:
    name: str
    inputs: tuple
    output: Tensor
    backward: BackwardFn
    seq: int = field(default_factory=lambda: next(_op_counter))


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Operations are appended in execution order, so the list is topological by
    construction; :func:`backward` walks it once in reverse.
    """

    ops: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, name: str, inputs: tuple, output: Tensor, fn: BackwardFn) -> None:
        output._tape = self
        self.ops.append(_Op(name, inputs, output, fn))


def _record(name: str, inputs: tuple, out_data: np.ndarray, fn: BackwardFn) -> Tensor:
    if not np.isfinite(out_data).all():
        raise NumericError(f"{name} produced a non-finite value")
    needs = _grad_enabled.get() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if not needs:
        return out
    tape = _active_tape.get()
    if tape is None:
        tapes = {id(t._tape): t._tape for t in inputs if t._tape is not None}
        tape = _merge(list(tapes.values())) if tapes else Tape()
    tape.record(name, inputs, out, fn)
    return out


def _merge(tapes: list) -> Tape:
    # independent branches off a leaf start separate tapes; join them in creation order
    if len(tapes) == 1:
        return tapes[0]
    head = tapes[0]
    for other in tapes[1:]:
        head.ops.extend(other.ops)
        for op in other.ops:
            op.output._tape = head
        other.ops = []
    head.ops.sort(key=lambda op: op.seq)
    return head


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_rank4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected an (n, c, h, w) tensor, got shape {x.shape}")


def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad tensor that feeds ``loss``.

    Gradients accumulate into existing ``.grad`` buffers of leaves, so callers
    zero them between optimisation steps. The tape is emptied afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss was not recorded on a tape (does anything require grad?)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for op in reversed(tape.ops):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        op.output.grad = g
        for inp, gi in zip(op.inputs, op.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is tape:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
    tape.ops.clear()


# --------------------------------------------------------------------------
# operations


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    _check_rank4(x, "conv2d")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be (c_out, c_in, k, k), got {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, k, _ = weight.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias must have shape ({c_out},), got {bias.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded input {h + 2 * pad}x{w + 2 * pad}")

    oh, ow = _out_extent(h, k, stride, pad), _out_extent(w, k, stride, pad)
    xd = x.data
    if k == 1 and pad == 0:
        cols = np.ascontiguousarray(xd[:, :, ::stride, ::stride].transpose(0, 2, 3, 1)).reshape(-1, c)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    wmat = weight.data.reshape(c_out, -1)
    out = (cols @ wmat.T).reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def _backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        dw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = g2 @ wmat
            if k == 1 and pad == 0:
                dx = np.zeros_like(xd)
                dx[:, :, ::stride, ::stride] = dcols.reshape(n, oh, ow, c).transpose(0, 3, 1, 2)
            else:
                dcols = dcols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
                dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=xd.dtype)
                hi, wi = stride * (oh - 1) + 1, stride * (ow - 1) + 1
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i:i + hi:stride, j:j + wi:stride] += dcols[:, :, i, j]
                dx = dxp[:, :, pad:pad + h, pad:pad + w]
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv2d", inputs, out, _backward)


def maxpool2d(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    """Max pooling with -inf padding; gradient goes to the first maximal cell."""
    _check_rank4(x, "maxpool2d")
    n, c, h, w = x.shape
    if k < 1 or stride < 1 or pad < 0:
        raise ValueError(f"maxpool2d: invalid k={k} stride={stride} pad={pad}")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(f"maxpool2d: window {k} exceeds padded input {h + 2 * pad}x{w + 2 * pad}")
    if pad >= k:
        raise ShapeError(f"maxpool2d: pad {pad} would create all-padding windows for k={k}")
    oh, ow = _out_extent(h, k, stride, pad), _out_extent(w, k, stride, pad)
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride].reshape(n, c, oh, ow, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def _backward(g):
        dxp = np.zeros(xp.shape, dtype=xd.dtype)
        hi, wi = stride * (oh - 1) + 1, stride * (ow - 1) + 1
        for q in range(k * k):
            i, j = divmod(q, k)
            dxp[:, :, i:i + hi:stride, j:j + wi:stride] += np.where(idx == q, g, 0)
        return (dxp[:, :, pad:pad + h, pad:pad + w],)

    return _record("maxpool2d", (x,), np.ascontiguousarray(out), _backward)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE))


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and ``state`` is updated in
    place (``running = momentum * running + (1 - momentum) * batch``, unbiased
    variance); in eval mode the running statistics are used.
    """
    _check_rank4(x, "batchnorm2d")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must be ({c},), got {gamma.shape}/{beta.shape}")
    count = n * h * w
    if count == 0:
        raise ShapeError("batchnorm2d: empty batch/spatial extent")
    xd = x.data
    if training:
        if count < 2:
            raise ShapeError("batchnorm2d: training mode needs batch*h*w >= 2 per channel")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        state.running_mean *= momentum
        state.running_mean += (1 - momentum) * mean.astype(state.running_mean.dtype)
        state.running_var *= momentum
        state.running_var += (1 - momentum) * (var * (count / (count - 1))).astype(state.running_var.dtype)
    else:
        mean = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = xhat * gamma.data.reshape(1, -1, 1, 1) + beta.data.reshape(1, -1, 1, 1)

    def _backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(1, -1, 1, 1)
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
                dx = (dxhat - s1 / count - xhat * (s2 / count)) * inv_std.reshape(1, -1, 1, 1)
            else:
                dx = dxhat * inv_std.reshape(1, -1, 1, 1)
        return dx, dgamma, dbeta

    return _record("batchnorm2d", (x, gamma, beta), out, _backward)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    # np.maximum keeps NaN so the finiteness check sees it
    return _record("relu", (x,), np.maximum(xd, xd.dtype.type(0)), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype)
    # derivative from exp(-|x|) stays non-zero after the output saturates to 1.0
    deriv = (e / ((1 + e) * (1 + e))).astype(xd.dtype)
    return _record("sigmoid", (x,), out, lambda g: (g * deriv,))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) interpolation weights, half-pixel centres, edge-clamped."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, target_h: int, target_w: int) -> Tensor:
    _check_rank4(x, "upsample_bilinear")
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"upsample_bilinear: target extent must be >= 1, got {target_h}x{target_w}")
    _, _, h, w = x.shape
    if h == 0 or w == 0:
        raise ShapeError("upsample_bilinear: empty input")
    my = bilinear_matrix(h, target_h, x.dtype)
    mx = bilinear_matrix(w, target_w, x.dtype)
    out = my @ x.data @ mx.T
    return _record("upsample_bilinear", (x,), out, lambda g: (my.T @ g @ mx,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.dtype.type(factor)
    return _record("scale", (a,), a.data * f, lambda g: (g * f,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", (a,), np.asarray(a.data.sum(), dtype=a.dtype), lambda g: (np.broadcast_to(g, shape).copy(),))


def bce_sum(prob: Tensor, target, reduction: str = "sum") -> Tensor:
    """Binary cross-entropy, summed over every element.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` before the logarithm;
    the clamp is treated as identity in the backward pass. ``reduction="mean"``
    divides by the element count and exists for logging only.
    """
    y = target.data if isinstance(target, Tensor) else np.asarray(target)
    if y.shape != prob.shape:
        raise ShapeError(f"bce_sum: prob {prob.shape} vs target {y.shape}")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    dt = prob.dtype
    y = y.astype(dt)
    p = np.clip(prob.data, BCE_CLAMP, 1 - BCE_CLAMP)
    terms = y * np.log(p) + (1 - y) * np.log1p(-p)
    denom = terms.size if reduction == "mean" else 1
    loss = np.asarray(-terms.sum() / denom, dtype=dt)

    def _backward(g):
        return (g * (p - y) / (p * (1 - p)) / dt.type(denom),)

    return _record("bce_sum", (prob,), loss, _backward)


# --------------------------------------------------------------------------
# finite-difference verification


def grad_check(
    builder: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    ``builder`` must rebuild the scalar loss from ``params`` on every call.
    The check runs in float64 (parameters are promoted and restored after)
    because float32 round-off in the loss swamps a 1e-3 step. With
    ``max_coords`` set, at most that many entries per parameter are probed,
    chosen by a seeded RNG.
    """
    originals = [p.data for p in params]
    saved_grads = [p.grad for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
        loss = builder()
        if loss.data.size != 1:
            raise ShapeError("grad_check builder must return a scalar")
        backward(loss)
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
        with no_grad():
            for p, a in zip(params, analytic):
                flat = p.data.reshape(-1)
                coords = np.arange(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
                for i in coords:
                    orig = flat[i]
                    flat[i] = orig + eps
                    up = builder().item()
                    flat[i] = orig - eps
                    down = builder().item()
                    flat[i] = orig
                    num = (up - down) / (2 * eps)
                    ana = float(a.reshape(-1)[i])
                    if not (np.isfinite(num) and np.isfinite(ana)):
                        raise NumericError("grad_check hit a non-finite gradient")
                    err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                    worst = max(worst, err)
    finally:
        for p, d, g in zip(params, originals, saved_grads):
            p.data = d
            p.grad = g
    return worst
