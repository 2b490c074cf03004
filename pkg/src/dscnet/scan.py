"""Recurrent data translations across the image grid.

One scan propagates features along a principal direction with the rectified
recurrence

    h[first] = max(x[first], 0)
    h[j]     = max(A @ h[j-1] + x[j], 0)

where A is a (channels, channels) recurrent weight matrix applied to the
channel vector at each pixel and j walks the direction's axis.  Out of
bounds neighbors contribute nothing, so the first pixel of each line sees
only its own input.  The sweep is mathematically identical to applying the
parallel one-step update width (or height) many times, but costs O(n) per
line instead of O(n^2).

The backward pass is the exact reverse sweep: gradients flow from each line
position to its predecessor through A^T, masked by the ReLU activation
pattern saved from the forward pass.

Direction order is fixed everywhere as (left, down, right, up) and matches
the channel-block order of the attention weight split.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tape, Tensor

DIRECTIONS = ("left", "down", "right", "up")

# Transform pairs (to_sweep, from_sweep) mapping each direction's traversal
# onto a left-to-right sweep over the last axis and back.  "right" means
# data travels rightward, i.e. each pixel receives from its left neighbor.
_VIEWS = {
    "right": (lambda d: d, lambda d: d),
    "left": (lambda d: d[..., ::-1], lambda d: d[..., ::-1]),
    "down": (lambda d: d.swapaxes(2, 3), lambda d: d.swapaxes(2, 3)),
    "up": (lambda d: d.swapaxes(2, 3)[..., ::-1], lambda d: d[..., ::-1].swapaxes(2, 3)),
}


class ScanParams:
    """Four per-direction recurrent weight matrices, identity-initialized."""

    def __init__(self, weights: dict[str, Tensor]):
        if set(weights) != set(DIRECTIONS):
            raise ShapeError(f"scan weights must cover {DIRECTIONS}, got {sorted(weights)}")
        for name, t in weights.items():
            if t.data.ndim != 2 or t.data.shape[0] != t.data.shape[1]:
                raise ShapeError(f"scan weight '{name}' must be square, got {t.shape}")
        self.weights = weights

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> "ScanParams":
        return cls({d: Tensor(np.eye(channels, dtype=dtype)) for d in DIRECTIONS})

    @property
    def channels(self) -> int:
        return self.weights["right"].data.shape[0]


def _sweep_forward(xd: np.ndarray, a: np.ndarray) -> np.ndarray:
    b, c, hh, ww = xd.shape
    out = np.empty_like(xd)
    out[..., 0] = np.maximum(xd[..., 0], 0)
    for j in range(1, ww):
        pre = np.matmul(a, out[..., j - 1]) + xd[..., j]
        out[..., j] = np.maximum(pre, 0)
    return out


def _sweep_backward(a: np.ndarray, out: np.ndarray, g: np.ndarray):
    b, c, hh, ww = out.shape
    gx = np.empty_like(out)
    ga = np.zeros_like(a)
    at = np.ascontiguousarray(a.T)
    carry = np.zeros((b, c, hh), dtype=out.dtype)
    for j in range(ww - 1, -1, -1):
        total = g[..., j] + carry
        delta = np.where(out[..., j] > 0, total, 0)
        gx[..., j] = delta
        if j > 0:
            # d pre[j] / d A accumulates delta (outer) h[j-1] over batch, rows
            dmat = delta.transpose(1, 0, 2).reshape(c, b * hh)
            hmat = out[..., j - 1].transpose(1, 0, 2).reshape(c, b * hh)
            ga += dmat @ hmat.T
            carry = np.matmul(at, delta)
    return gx, ga


def scan(x: Tensor, weight: Tensor, direction: str, tape: Tape | None = None) -> Tensor:
    """One directional recurrent translation with exact gradients."""
    if direction not in DIRECTIONS:
        raise ShapeError(f"unknown scan direction '{direction}'")
    if x.data.ndim != 4:
        raise ShapeError(f"scan expects a 4-D tensor, got {x.shape}")
    c = x.data.shape[1]
    if weight.data.shape != (c, c):
        raise ShapeError(
            f"scan weight {weight.shape} does not match {c} feature channels")
    to_sweep, from_sweep = _VIEWS[direction]
    xt = np.ascontiguousarray(to_sweep(x.data))
    ot = _sweep_forward(xt, weight.data)
    y = Tensor(np.ascontiguousarray(from_sweep(ot)))

    if tape is not None:
        def backward():
            if y.grad is None:
                return
            gt = np.ascontiguousarray(to_sweep(y.grad))
            gx, ga = _sweep_backward(weight.data, ot, gt)
            x.add_grad(np.ascontiguousarray(from_sweep(gx)))
            weight.add_grad(ga)

        tape.record(backward)
    return y


def scan_all_directions(x: Tensor, p: ScanParams, tape: Tape | None = None) -> list[Tensor]:
    """All four directional scans, in (left, down, right, up) order."""
    return [scan(x, p.weights[d], d, tape) for d in DIRECTIONS]
