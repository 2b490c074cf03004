"""Class-balanced and hard-class-weighted cross entropy.

Two per-pixel weightings combine into the supervision signal for every
score map.  With y the binary ground truth, p the predicted probability,
Np/Nn the shadow / non-shadow pixel counts and TP/TN the currently
correctly classified counts at threshold 0.5:

    balance term:    -(Nn/(Np+Nn)) y log p - (Np/(Np+Nn)) (1-y) log(1-p)
    hard-class term: -(1-TP/Np)    y log p - (1-TN/Nn)    (1-y) log(1-p)

Both are averaged over pixels, making magnitudes resolution-independent.
The count-derived weights are constants under differentiation; they are
recomputed per score map at every training step.  The overall training
objective sums (balance + hard-class) over all supervised score maps after
a sigmoid, with unit weight per map.

Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs; clamp events
are counted in a module counter rather than raised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tape, Tensor, sigmoid

EPS = 1e-7

_clamp_events = 0


def clamp_event_count() -> int:
    return _clamp_events


def reset_clamp_events() -> None:
    global _clamp_events
    _clamp_events = 0


@dataclass
class ClassCounts:
    """Pixel counts for one image/map pair: class sizes and correct calls."""

    n_p: int
    n_n: int
    tp: int = 0
    tn: int = 0

    def __post_init__(self):
        if self.n_p < 0 or self.n_n < 0:
            raise ValueError("negative class counts")
        if not (0 <= self.tp <= self.n_p) or not (0 <= self.tn <= self.n_n):
            raise ValueError(
                f"correct-call counts (tp={self.tp}, tn={self.tn}) exceed class "
                f"sizes (n_p={self.n_p}, n_n={self.n_n})")

    @classmethod
    def from_maps(cls, prob: np.ndarray, target: np.ndarray,
                  threshold: float = 0.5) -> "ClassCounts":
        pos = target > 0.5
        pred_pos = prob >= threshold
        return cls(n_p=int(pos.sum()), n_n=int((~pos).sum()),
                   tp=int((pred_pos & pos).sum()), tn=int((~pred_pos & ~pos).sum()))


def _validate(p: Tensor, y: Tensor, c: ClassCounts) -> None:
    if p.data.shape != y.data.shape:
        raise ShapeError(f"prediction {p.shape} vs target {y.shape}")
    yd = y.data
    if not np.all((yd == 0) | (yd == 1)):
        raise ValueError("target mask must be strictly binary")
    n_p = int((yd == 1).sum())
    if c.n_p != n_p or c.n_n != yd.size - n_p:
        raise ValueError(
            f"class counts (n_p={c.n_p}, n_n={c.n_n}) disagree with the target "
            f"({n_p} shadow of {yd.size} pixels)")


def _clamped(p: Tensor) -> np.ndarray:
    global _clamp_events
    d = p.data
    outside = int(((d < EPS) | (d > 1.0 - EPS)).sum())
    if outside:
        _clamp_events += outside
    return np.clip(d.astype(np.float64), EPS, 1.0 - EPS)


def _weighted_ce(p: Tensor, y: Tensor, w_pos: float, w_neg: float,
                 tape: Tape | None) -> float:
    """Mean over pixels of -w_pos y log p - w_neg (1-y) log(1-p)."""
    pc = _clamped(p)
    yd = y.data
    n = yd.size
    pos = yd == 1
    neg = ~pos
    value = (w_pos * -np.log(pc[pos]).sum() + w_neg * -np.log1p(-pc[neg]).sum()) / n

    if tape is not None:
        def backward():
            g = np.zeros_like(pc)
            g[pos] = -w_pos / pc[pos]
            g[neg] = w_neg / (1.0 - pc[neg])
            p.add_grad((g / n).astype(p.data.dtype))

        tape.record(backward)
    return float(value)


def loss_l1(p: Tensor, y: Tensor, c: ClassCounts, tape: Tape | None = None) -> float:
    """Class-balance weighted cross entropy (weights Nn/(Np+Nn), Np/(Np+Nn))."""
    _validate(p, y, c)
    total = c.n_p + c.n_n
    if total == 0:
        raise ValueError("empty target")
    return _weighted_ce(p, y, c.n_n / total, c.n_p / total, tape)


def loss_l2(p: Tensor, y: Tensor, c: ClassCounts, tape: Tape | None = None) -> float:
    """Hard-class weighted cross entropy (weights 1-TP/Np, 1-TN/Nn).

    An absent class contributes weight 0 for its term.
    """
    _validate(p, y, c)
    w_pos = 1.0 - c.tp / c.n_p if c.n_p > 0 else 0.0
    w_neg = 1.0 - c.tn / c.n_n if c.n_n > 0 else 0.0
    return _weighted_ce(p, y, w_pos, w_neg, tape)


def map_loss(score: Tensor, y: Tensor, tape: Tape | None = None) -> tuple[float, float]:
    """(balance, hard-class) losses of one pre-sigmoid score map."""
    prob = sigmoid(score, tape)
    counts = ClassCounts.from_maps(prob.data, y.data)
    return (loss_l1(prob, y, counts, tape), loss_l2(prob, y, counts, tape))


def supervised_losses(outputs, y: Tensor, tape: Tape | None = None) -> list[tuple[str, float, float]]:
    """Per-map (name, balance, hard-class) losses over every supervised map."""
    rows = []
    for name, score in outputs.named_scores():
        if score.data.shape[-2:] != y.data.shape[-2:]:
            raise ShapeError(
                f"score map '{name}' is {score.shape}, target is {y.shape}")
        l1, l2 = map_loss(score, y, tape)
        rows.append((name, l1, l2))
    return rows


def overall_loss(outputs, y: Tensor, tape: Tape | None = None) -> float:
    """Sum of per-map losses over all supervised score maps (unit weights)."""
    return sum(l1 + l2 for _, l1, l2 in supervised_losses(outputs, y, tape))
