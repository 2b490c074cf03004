"""Direction-aware spatial context module.

Pipeline (default two rounds): a small convolutional attention estimator
produces one gating map per scan direction from the input features; each
round runs the four directional scans, multiplies each result with its
gating map, concatenates the four gated maps, and reduces back to the
working width with a 1x1 convolution.  The final round's concatenation
passes through a 1x1 convolution plus ReLU instead, producing the output
context features.

The attention estimator is conv3x3 -> ReLU -> conv3x3 -> ReLU -> conv1x1
with no nonlinearity after the last layer; its output holds channels for
all four directions in (left, down, right, up) block order.  By default
the same gating maps serve every round; a separate estimator for the later
rounds is supported as an ablation.  With attention disabled the scan
results pass through ungated, which is numerically identical to gating by
all-ones maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import RandomStream
from .scan import ScanParams, scan_all_directions
from .tensor import (ConvParams, ShapeError, Tape, Tensor, concat_channels,
                     conv2d, elementwise_mul, relu, split_channels)

# Number of dsc_forward invocations since import or reset; the "basic"
# network configuration is validated structurally against this staying 0.
FORWARD_CALLS = 0


def reset_forward_calls() -> None:
    global FORWARD_CALLS
    FORWARD_CALLS = 0


@dataclass
class DscConfig:
    """Structural switches: round count, gate sharing, gating on/off."""

    rounds: int = 2
    share_attention: bool = True
    attention_enabled: bool = True

    def __post_init__(self):
        if self.rounds not in (1, 2, 3):
            raise ValueError(f"rounds must be 1, 2 or 3, got {self.rounds}")
        if self.rounds == 3 and not self.share_attention:
            raise ValueError("three rounds are only supported with shared attention")


@dataclass
class DscParams:
    """Parameters for one module instance.

    attention: the three estimator convs, or None when gating is disabled.
    attention2: separate estimator for round 2 when gates are not shared.
    scans: one recurrent weight set per round.
    reduces: rounds-1 convs mapping the 4C concatenation back to C.
    output: final conv mapping the last 4C concatenation to the output width.
    """

    attention: list[ConvParams] | None
    attention2: list[ConvParams] | None
    scans: list[ScanParams]
    reduces: list[ConvParams]
    output: ConvParams


# Init damping for the convs that consume directional aggregates.  Identity
# recurrences turn each line into a running rectified sum, so scan outputs
# carry an extra factor of roughly half the traversal length; dividing the
# fan-in-scaled bound of the consuming conv by this constant keeps context
# features on the same scale as the backbone features they are concatenated
# with, which a single global learning rate needs.
AGGREGATE_DAMP = 8.0


def init_dsc_params(channels: int, out_channels: int, cfg: DscConfig,
                    rng: RandomStream, dtype=np.float32) -> DscParams:
    """Build parameters for a module on C-channel features.

    Recurrent matrices start as the identity.  The estimator's final conv
    starts at zero weights with bias 1, so training begins from neutral
    (all-ones) gates and any learned directional preference is a deviation
    from the ungated pipeline.
    """
    def conv(in_c, out_c, k, pad, zero=False, bias_value=0.0, damp=1.0):
        if zero:
            w = np.zeros((out_c, in_c, k, k), dtype=dtype)
        else:
            bound = np.sqrt(6.0 / (in_c * k * k)) / damp
            w = rng.uniform_array((out_c, in_c, k, k), -bound, bound, dtype)
        b = np.full(out_c, bias_value, dtype=dtype)
        return ConvParams(Tensor(w), Tensor(b), stride=1, padding=pad)

    def estimator():
        return [conv(channels, channels, 3, 1),
                conv(channels, channels, 3, 1),
                conv(channels, 4 * channels, 1, 0, zero=True, bias_value=1.0)]

    attention = estimator() if cfg.attention_enabled else None
    attention2 = (estimator()
                  if cfg.attention_enabled and not cfg.share_attention and cfg.rounds > 1
                  else None)
    scans = [ScanParams.identity(channels, dtype) for _ in range(cfg.rounds)]
    reduces = [conv(4 * channels, channels, 1, 0, damp=AGGREGATE_DAMP)
               for _ in range(cfg.rounds - 1)]
    output = conv(4 * channels, out_channels, 1, 0, damp=AGGREGATE_DAMP)
    return DscParams(attention, attention2, scans, reduces, output)


def _estimate(x: Tensor, convs: list[ConvParams], tape: Tape | None) -> Tensor:
    h = relu(conv2d(x, convs[0], tape), tape)
    h = relu(conv2d(h, convs[1], tape), tape)
    return conv2d(h, convs[2], tape)


def attention_weights(x: Tensor, p: DscParams, tape: Tape | None = None) -> Tensor:
    """Gating maps for all directions: 4C channels at the input resolution."""
    if p.attention is None:
        raise ShapeError("attention_weights called on a module built without an estimator")
    if x.data.shape[1] != p.attention[0].in_channels:
        raise ShapeError(
            f"attention estimator expects {p.attention[0].in_channels} channels, "
            f"input has {x.data.shape[1]}")
    return _estimate(x, p.attention, tape)


def split_weights(w: Tensor, tape: Tape | None = None) -> list[Tensor]:
    """Split gating maps into four per-direction blocks (left, down, right, up)."""
    c4 = w.data.shape[1]
    if c4 % 4:
        raise ShapeError(f"gating maps need a channel count divisible by 4, got {c4}")
    return split_channels(w, [c4 // 4] * 4, tape)


def dsc_forward(x: Tensor, p: DscParams, cfg: DscConfig, tape: Tape | None = None) -> Tensor:
    """Run the full module and return direction-aware context features."""
    global FORWARD_CALLS
    FORWARD_CALLS += 1

    gates = None
    if cfg.attention_enabled:
        gates = split_weights(attention_weights(x, p, tape), tape)

    if len(p.scans) != cfg.rounds:
        raise ShapeError(f"module has {len(p.scans)} scan sets for {cfg.rounds} rounds")
    if len(p.reduces) != cfg.rounds - 1:
        raise ShapeError(f"module has {len(p.reduces)} reduce convs for {cfg.rounds} rounds")

    cur = x
    for r in range(cfg.rounds):
        stage = f"round {r + 1}"
        streams = scan_all_directions(cur, p.scans[r], tape)
        if cfg.attention_enabled:
            if r > 0 and not cfg.share_attention:
                gates = split_weights(_estimate(cur, p.attention2, tape), tape)
            try:
                streams = [elementwise_mul(s, g, tape) for s, g in zip(streams, gates)]
            except ShapeError as e:
                raise ShapeError(f"dsc {stage} gating: {e}") from None
        cat = concat_channels(streams, tape)
        try:
            if r < cfg.rounds - 1:
                cur = conv2d(cat, p.reduces[r], tape)
            else:
                return relu(conv2d(cat, p.output, tape), tape)
        except ShapeError as e:
            raise ShapeError(f"dsc {stage} projection: {e}") from None
    raise AssertionError("unreachable")
