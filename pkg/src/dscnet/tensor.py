"""Dense tensor algebra with hand-derived reverse-mode gradients.

Feature maps are 4-D arrays (batch, channels, height, width); parameters may
be any shape.  Each operator computes its forward result eagerly and, when
given a :class:`Tape`, records one backward closure.  Replaying the tape in
reverse execution order accumulates gradients additively into ``Tensor.grad``.
There is no expression-graph engine; the computation order itself is the
record, which suffices because the network topology is fixed.

Conventions baked in here and relied on by the rest of the package:
  * ReLU and max-pool subgradients at exact ties/zeros are 0 (gradient
    flows only where the forward value is strictly positive / the argmax).
  * Bilinear upsampling samples with aligned corners, so upsampling to the
    input size is exactly the identity.
  * All arithmetic is plain numpy on float32 (training) or float64
    (gradient-check mode); forward passes are bit-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes violate an operator's contract."""


class NumericalFault(ArithmeticError):
    """Raised when a non-finite value appears where finiteness is required."""


def check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalFault(f"non-finite values detected in {where}")


class Tensor:
    """An n-d value with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def add_grad(self, g: np.ndarray) -> None:
        """Accumulate into the gradient buffer, allocating it on first use."""
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Tape:
    """Explicit record of backward closures in forward execution order."""

    def __init__(self):
        self._steps = []

    def record(self, fn) -> None:
        self._steps.append(fn)

    def backward(self) -> None:
        """Replay recorded closures in reverse, accumulating gradients.

        Callers seed the gradients of whatever outputs they differentiate
        (loss closures seed themselves).  Replaying twice accumulates twice.
        """
        for fn in reversed(self._steps):
            fn()

    def __len__(self):
        return len(self._steps)


@dataclass
class ConvParams:
    """2-D convolution parameters: weights (out, in, kh, kw) and bias (out,)."""

    weights: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.data.ndim != 4:
            raise ShapeError(f"conv weights must be 4-D, got {self.weights.shape}")
        out_c, _, kh, kw = self.weights.shape
        if self.bias.data.shape != (out_c,):
            raise ShapeError(
                f"conv bias shape {self.bias.shape} does not match {out_c} output channels")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"invalid stride/padding ({self.stride}, {self.padding})")
        if self.padding > 0 and (kh % 2 == 0 or kw % 2 == 0):
            raise ShapeError(f"padded conv requires odd kernel dims, got {kh}x{kw}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]


def _require_4d(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects a (batch, channels, h, w) tensor, got {x.shape}")


def conv2d(x: Tensor, p: ConvParams, tape: Tape | None = None) -> Tensor:
    """Cross-correlate x with p.weights and add bias.

    Forward uses an im2col reshape so the inner product is a single matmul.
    Backward: bias gets the spatial/batch-summed output gradient, weights get
    grad.T @ columns, and the input gradient scatters column gradients back
    through the patch extraction (transpose of im2col).
    """
    _require_4d(x, "conv2d")
    b, c, h, w = x.data.shape
    o, ci, kh, kw = p.weights.data.shape
    if c != ci:
        raise ShapeError(
            f"conv2d: input has {c} channels, weights expect {ci} "
            f"(input {x.data.shape}, weights {p.weights.data.shape})")
    s, pad = p.stride, p.padding
    oh, rh = divmod(h + 2 * pad - kh, s)
    ow, rw = divmod(w + 2 * pad - kw, s)
    oh += 1
    ow += 1
    if rh != 0 or rw != 0 or oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d: input {x.data.shape} with kernel {kh}x{kw}, stride {s}, "
            f"padding {pad} does not tile to integer output dims")

    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * oh * ow, c * kh * kw)
    wmat = p.weights.data.reshape(o, c * kh * kw)
    out = cols @ wmat.T + p.bias.data
    y = Tensor(np.ascontiguousarray(out.reshape(b, oh, ow, o).transpose(0, 3, 1, 2)))

    if tape is not None:
        pad_shape = xp.shape

        def backward():
            if y.grad is None:
                return
            g = np.ascontiguousarray(y.grad.transpose(0, 2, 3, 1)).reshape(b * oh * ow, o)
            p.bias.add_grad(g.sum(axis=0))
            p.weights.add_grad((g.T @ cols).reshape(o, c, kh, kw))
            gcols = (g @ wmat).reshape(b, oh, ow, c, kh, kw)
            gxp = np.zeros(pad_shape, dtype=x.data.dtype)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u:u + s * oh:s, v:v + s * ow:s] += \
                        gcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            x.add_grad(gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp)

        tape.record(backward)
    return y


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise max(x, 0); gradient passes only where x > 0."""
    y = Tensor(np.maximum(x.data, 0))

    if tape is not None:
        def backward():
            if y.grad is None:
                return
            x.add_grad(np.where(y.data > 0, y.grad, 0))

        tape.record(backward)
    return y


def sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise logistic function, computed without overflow.

    Output is strictly inside (0, 1) until the exponential underflows
    (|x| beyond roughly 88 in float32, 745 in float64).
    """
    e = np.exp(-np.abs(x.data))
    y = Tensor(np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)))

    if tape is not None:
        def backward():
            if y.grad is None:
                return
            x.add_grad(y.grad * y.data * (1.0 - y.data))

        tape.record(backward)
    return y


def elementwise_mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Hadamard product of two identically shaped tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"elementwise_mul: shapes differ, {a.shape} vs {b.shape}")
    y = Tensor(a.data * b.data)

    if tape is not None:
        def backward():
            if y.grad is None:
                return
            a.add_grad(y.grad * b.data)
            b.add_grad(y.grad * a.data)

        tape.record(backward)
    return y


def concat_channels(xs: list[Tensor], tape: Tape | None = None) -> Tensor:
    """Concatenate along the channel axis; backward splits the gradient back."""
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    for x in xs:
        _require_4d(x, "concat_channels")
    first = xs[0].data.shape
    for x in xs[1:]:
        s = x.data.shape
        if (s[0], s[2], s[3]) != (first[0], first[2], first[3]):
            raise ShapeError(f"concat_channels: spatial/batch mismatch, {first} vs {s}")
    y = Tensor(np.concatenate([x.data for x in xs], axis=1))

    if tape is not None:
        offsets = np.cumsum([0] + [x.data.shape[1] for x in xs])

        def backward():
            if y.grad is None:
                return
            for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
                x.add_grad(y.grad[:, lo:hi])

        tape.record(backward)
    return y


def split_channels(x: Tensor, sizes: list[int], tape: Tape | None = None) -> list[Tensor]:
    """Slice the channel axis into consecutive blocks (inverse of concat)."""
    _require_4d(x, "split_channels")
    if sum(sizes) != x.data.shape[1]:
        raise ShapeError(
            f"split_channels: block sizes {sizes} do not sum to {x.data.shape[1]} channels")
    offsets = np.cumsum([0] + list(sizes))
    ys = [Tensor(x.data[:, lo:hi].copy()) for lo, hi in zip(offsets[:-1], offsets[1:])]

    if tape is not None:
        def backward():
            gs = [y.grad for y in ys]
            if all(g is None for g in gs):
                return
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            for g, lo, hi in zip(gs, offsets[:-1], offsets[1:]):
                if g is not None:
                    x.grad[:, lo:hi] += g

        tape.record(backward)
    return ys


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Corner-aligned linear interpolation matrix, (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = 0.0 if n_out == 1 else (n_in - 1) / (n_out - 1)
    for o in range(n_out):
        src = o * scale
        i0 = int(np.floor(src))
        t = src - i0
        i1 = min(i0 + 1, n_in - 1)
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, out_h: int, out_w: int, tape: Tape | None = None) -> Tensor:
    """Bilinear upsampling with aligned corners.

    Implemented as two interpolation matmuls (rows then columns); the
    backward pass applies the transposed matrices, so gradients distribute
    by exactly the forward interpolation weights.
    """
    _require_4d(x, "upsample_bilinear")
    b, c, h, w = x.data.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"upsample_bilinear: target dims must be positive, got {out_h}x{out_w}")
    if out_h < h or out_w < w:
        raise ShapeError(
            f"upsample_bilinear: target {out_h}x{out_w} smaller than input {h}x{w}")
    ry = _interp_matrix(out_h, h, x.data.dtype)
    rx = _interp_matrix(out_w, w, x.data.dtype)
    y = Tensor(np.matmul(np.matmul(ry, x.data), rx.T))

    if tape is not None:
        def backward():
            if y.grad is None:
                return
            x.add_grad(np.matmul(np.matmul(ry.T, y.grad), rx))

        tape.record(backward)
    return y


def max_pool2(x: Tensor, tape: Tape | None = None) -> Tensor:
    """2x2 max pooling with stride 2.

    Requires even spatial dims.  Backward routes the gradient to the argmax
    position inside each window; ties go to the first position in row-major
    window order ((0,0), (0,1), (1,0), (1,1)).
    """
    _require_4d(x, "max_pool2")
    b, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 requires even spatial dims, got {h}x{w}")
    oh, ow = h // 2, w // 2
    win = np.ascontiguousarray(
        x.data.reshape(b, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)).reshape(b, c, oh, ow, 4)
    idx = win.argmax(axis=-1)
    y = Tensor(win.max(axis=-1))

    if tape is not None:
        def backward():
            if y.grad is None:
                return
            onehot = idx[..., None] == np.arange(4)
            gwin = y.grad[..., None] * onehot
            x.add_grad(gwin.reshape(b, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
                       .reshape(b, c, h, w))

        tape.record(backward)
    return y
