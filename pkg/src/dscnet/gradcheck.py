"""Finite-difference verification of every hand-derived backward pass.

For each operator a case builder draws random shapes, inputs and parameters
from a seeded stream, runs the operator forward under a random linear
projection to get a scalar, backpropagates analytically, and compares the
gradient at sampled coordinates against central differences computed purely
from forward evaluations in double precision.  The numeric side never
touches the backward code, so it is an independent oracle.

Inputs for operators containing ReLU-style kinks are constructed to keep
every preactivation strictly positive (or bounded away from zero), since a
finite difference across a kink measures nothing; the kink subgradient
convention itself is pinned by direct unit tests instead.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass

import numpy as np

from . import dsc as dsc_mod
from .loss import ClassCounts, loss_l1, loss_l2, overall_loss
from .network import NetworkOutput
from .rng import RandomStream
from .scan import DIRECTIONS, ScanParams, scan, scan_all_directions
from .tensor import (ConvParams, Tape, Tensor, concat_channels, conv2d,
                     elementwise_mul, max_pool2, relu, sigmoid,
                     split_channels, upsample_bilinear)

DEFAULT_TOLERANCE = 1e-4


@dataclass
class OpReport:
    name: str
    instances: int
    max_rel_err: float
    tolerance: float = DEFAULT_TOLERANCE
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.name:<22s} instances={self.instances:<4d} "
                f"max_rel_err={self.max_rel_err:.3e} tol={self.tolerance:.0e} {status}")


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def _check_instance(run, checked, rs: RandomStream, coords: int = 16) -> float:
    """Compare analytic grads of one case against central differences.

    run(tape) must return a Tensor, a list of Tensors, or a float (a loss
    that seeds its own gradient).  checked is a list of (label, Tensor)
    whose gradients are verified.
    """
    tape = Tape()
    out = run(tape)
    if isinstance(out, Tensor):
        out = [out]
    if isinstance(out, list):
        projs = [rs.uniform_array(o.data.shape, -1.0, 1.0) for o in out]
        for o, pr in zip(out, projs):
            o.grad = pr.copy()

        def scalar() -> float:
            res = run(None)
            res = [res] if isinstance(res, Tensor) else res
            return float(sum((r.data * pr).sum() for r, pr in zip(res, projs)))
    else:
        def scalar() -> float:
            return float(run(None))
    tape.backward()

    max_err = 0.0
    for _, t in checked:
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = grad.reshape(-1)
        n = flat.size
        indices = range(n) if n <= coords else [rs.randint(n) for _ in range(coords)]
        for i in indices:
            old = flat[i]
            eps = 1e-5 * max(1.0, abs(old))
            flat[i] = old + eps
            fp = scalar()
            flat[i] = old - eps
            fm = scalar()
            flat[i] = old
            max_err = max(max_err, _rel_err(gflat[i], (fp - fm) / (2.0 * eps)))
    return max_err


def _signs(rs: RandomStream, shape) -> np.ndarray:
    return np.where(rs.uniform_array(shape) < 0.5, -1.0, 1.0)


def _rand_conv(rs: RandomStream, in_c: int, out_c: int, k: int, pad: int,
               stride: int = 1, positive: bool = False) -> ConvParams:
    bound = 1.0 / np.sqrt(in_c * k * k)
    if positive:
        w = rs.uniform_array((out_c, in_c, k, k), 0.2 * bound, bound)
        b = rs.uniform_array((out_c,), 0.05, 0.2)
    else:
        w = rs.uniform_array((out_c, in_c, k, k), -bound, bound)
        b = rs.uniform_array((out_c,), -0.2, 0.2)
    return ConvParams(Tensor(w), Tensor(b), stride=stride, padding=pad)


def _positive_scans(rs: RandomStream, c: int, rounds: int) -> list[ScanParams]:
    # Identity-dominated non-negative recurrences keep every preactivation
    # strictly positive for positive inputs, so no finite difference can
    # straddle a ReLU kink.
    sets = []
    for _ in range(rounds):
        sets.append(ScanParams({
            d: Tensor(np.eye(c) * rs.uniform(0.5, 0.9)
                      + rs.uniform_array((c, c), 0.0, 0.2 / c))
            for d in DIRECTIONS}))
    return sets


def _case_conv2d(rs: RandomStream):
    k = 3 if rs.uniform() < 0.5 else 1
    stride = 1 + rs.randint(2)
    pad = rs.randint(2) if k == 3 else 0
    ci, co = 1 + rs.randint(3), 1 + rs.randint(3)
    oh, ow = 1 + rs.randint(3), 1 + rs.randint(3)
    h = k + stride * (oh - 1) - 2 * pad
    w = k + stride * (ow - 1) - 2 * pad
    if h < 1 or w < 1:
        h, w = k, k
        pad = 0
    x = Tensor(rs.uniform_array((1 + rs.randint(2), ci, h, w), -1.0, 1.0))
    p = _rand_conv(rs, ci, co, k, pad, stride)
    return (lambda tape=None: conv2d(x, p, tape),
            [("x", x), ("weights", p.weights), ("bias", p.bias)])


def _case_relu(rs: RandomStream):
    shape = (1, 1 + rs.randint(3), 2 + rs.randint(3), 2 + rs.randint(3))
    x = Tensor(_signs(rs, shape) * rs.uniform_array(shape, 0.05, 1.5))
    return (lambda tape=None: relu(x, tape), [("x", x)])


def _case_sigmoid(rs: RandomStream):
    shape = (1, 1 + rs.randint(3), 2 + rs.randint(3), 2 + rs.randint(3))
    x = Tensor(rs.uniform_array(shape, -3.0, 3.0))
    return (lambda tape=None: sigmoid(x, tape), [("x", x)])


def _case_mul(rs: RandomStream):
    shape = (1, 1 + rs.randint(3), 2 + rs.randint(3), 2 + rs.randint(3))
    a = Tensor(rs.uniform_array(shape, -1.5, 1.5))
    b = Tensor(rs.uniform_array(shape, -1.5, 1.5))
    return (lambda tape=None: elementwise_mul(a, b, tape), [("a", a), ("b", b)])


def _case_concat(rs: RandomStream):
    b, h, w = 1 + rs.randint(2), 2 + rs.randint(3), 2 + rs.randint(3)
    xs = [Tensor(rs.uniform_array((b, 1 + rs.randint(3), h, w), -1.0, 1.0))
          for _ in range(2 + rs.randint(3))]
    return (lambda tape=None: concat_channels(xs, tape),
            [(f"x{i}", x) for i, x in enumerate(xs)])


def _case_split(rs: RandomStream):
    sizes = [1 + rs.randint(3) for _ in range(2 + rs.randint(3))]
    x = Tensor(rs.uniform_array((1, sum(sizes), 2 + rs.randint(3), 2 + rs.randint(3)),
                                -1.0, 1.0))
    return (lambda tape=None: split_channels(x, sizes, tape), [("x", x)])


def _case_upsample(rs: RandomStream):
    h, w = 1 + rs.randint(4), 1 + rs.randint(4)
    oh, ow = h + rs.randint(6), w + rs.randint(6)
    x = Tensor(rs.uniform_array((1 + rs.randint(2), 1 + rs.randint(3), h, w), -1.5, 1.5))
    return (lambda tape=None: upsample_bilinear(x, oh, ow, tape), [("x", x)])


def _case_max_pool2(rs: RandomStream):
    shape = (1, 1 + rs.randint(3), 2 * (1 + rs.randint(3)), 2 * (1 + rs.randint(3)))
    while True:
        d = rs.uniform_array(shape, -1.0, 1.0)
        win = d.reshape(shape[0], shape[1], shape[2] // 2, 2, shape[3] // 2, 2)
        win = win.transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
        gaps = np.sort(win, axis=1)
        if np.min(np.diff(gaps, axis=1)) > 1e-3:
            break
    x = Tensor(d)
    return (lambda tape=None: max_pool2(x, tape), [("x", x)])


def _case_scan(rs: RandomStream):
    c = 1 + rs.randint(3)
    direction = DIRECTIONS[rs.randint(4)]
    x = Tensor(rs.uniform_array((1 + rs.randint(2), c, 2 + rs.randint(4), 2 + rs.randint(4)),
                                0.5, 1.5))
    a = Tensor(np.eye(c) * rs.uniform(0.5, 0.9) + rs.uniform_array((c, c), 0.0, 0.2 / c))
    return (lambda tape=None: scan(x, a, direction, tape), [("x", x), ("weight", a)])


def _case_scan_all(rs: RandomStream):
    c = 1 + rs.randint(3)
    x = Tensor(rs.uniform_array((1, c, 2 + rs.randint(3), 2 + rs.randint(3)), 0.5, 1.5))
    p = _positive_scans(rs, c, 1)[0]
    checked = [("x", x)] + [(f"weight_{d}", p.weights[d]) for d in DIRECTIONS]
    return (lambda tape=None: scan_all_directions(x, p, tape), checked)


def _positive_dsc_params(rs: RandomStream, c: int, cfg: dsc_mod.DscConfig) -> dsc_mod.DscParams:
    def estimator():
        return [_rand_conv(rs, c, c, 3, 1, positive=True),
                _rand_conv(rs, c, c, 3, 1, positive=True),
                _rand_conv(rs, c, 4 * c, 1, 0, positive=True)]

    attention = estimator() if cfg.attention_enabled else None
    attention2 = (estimator() if cfg.attention_enabled and not cfg.share_attention
                  and cfg.rounds > 1 else None)
    return dsc_mod.DscParams(
        attention=attention, attention2=attention2,
        scans=_positive_scans(rs, c, cfg.rounds),
        reduces=[_rand_conv(rs, 4 * c, c, 1, 0, positive=True)
                 for _ in range(cfg.rounds - 1)],
        output=_rand_conv(rs, 4 * c, c, 1, 0, positive=True))


def _dsc_checked(prefix: str, p: dsc_mod.DscParams):
    checked = []
    for tag, convs in (("att", p.attention), ("att2", p.attention2)):
        for i, cp in enumerate(convs or []):
            checked += [(f"{tag}{i}.w", cp.weights), (f"{tag}{i}.b", cp.bias)]
    for r, sp in enumerate(p.scans):
        checked += [(f"scan{r}.{d}", sp.weights[d]) for d in DIRECTIONS]
    for r, cp in enumerate(p.reduces):
        checked += [(f"reduce{r}.w", cp.weights), (f"reduce{r}.b", cp.bias)]
    checked += [("out.w", p.output.weights), ("out.b", p.output.bias)]
    return checked


def _case_attention(rs: RandomStream):
    c = 1 + rs.randint(3)
    cfg = dsc_mod.DscConfig()
    p = _positive_dsc_params(rs, c, cfg)
    x = Tensor(rs.uniform_array((1, c, 3 + rs.randint(3), 3 + rs.randint(3)), 0.3, 1.0))
    checked = [("x", x)]
    for i, cp in enumerate(p.attention):
        checked += [(f"att{i}.w", cp.weights), (f"att{i}.b", cp.bias)]
    return (lambda tape=None: dsc_mod.attention_weights(x, p, tape), checked)


def _case_dsc_forward(rs: RandomStream):
    variant = rs.randint(4)
    cfg = [dsc_mod.DscConfig(rounds=1),
           dsc_mod.DscConfig(rounds=2, share_attention=True),
           dsc_mod.DscConfig(rounds=2, share_attention=False),
           dsc_mod.DscConfig(rounds=3)][variant]
    if rs.uniform() < 0.25:
        cfg = dsc_mod.DscConfig(rounds=cfg.rounds, share_attention=True,
                                attention_enabled=False)
    c = 1 + rs.randint(2)
    p = _positive_dsc_params(rs, c, cfg)
    x = Tensor(rs.uniform_array((1, c, 3 + rs.randint(2), 3 + rs.randint(2)), 0.3, 1.0))
    return (lambda tape=None: dsc_mod.dsc_forward(x, p, cfg, tape),
            [("x", x)] + _dsc_checked("", p))


def _binary_target(rs: RandomStream, shape) -> Tensor:
    while True:
        y = (rs.uniform_array(shape) < 0.35).astype(np.float64)
        if 0 < y.sum() < y.size:
            return Tensor(y)


def _probs_off_half(rs: RandomStream, shape) -> Tensor:
    # Probabilities bounded away from the 0.5 counting threshold so finite
    # differences cannot flip the constant TP/TN weights.
    base = rs.uniform_array(shape, 0.05, 0.95)
    low = np.minimum(base, 0.49)
    high = np.maximum(base, 0.51)
    return Tensor(np.where(base < 0.5, low, high))


def _case_loss(which):
    def build(rs: RandomStream):
        shape = (1, 1, 3 + rs.randint(4), 3 + rs.randint(4))
        y = _binary_target(rs, shape)
        p = _probs_off_half(rs, shape)
        counts = ClassCounts.from_maps(p.data, y.data)
        fn = loss_l1 if which == 1 else loss_l2
        return (lambda tape=None: fn(p, y, counts, tape), [("p", p)])
    return build


def _case_overall_loss(rs: RandomStream):
    shape = (1, 1, 3 + rs.randint(3), 3 + rs.randint(3))
    y = _binary_target(rs, shape)
    n_layers = 2 + rs.randint(2)
    scores = [Tensor(_signs(rs, shape) * rs.uniform_array(shape, 0.05, 2.0))
              for _ in range(n_layers + 2)]
    out = NetworkOutput(layer_scores=scores[:n_layers],
                        mlif_score=scores[n_layers], fusion_score=scores[n_layers + 1])
    return (lambda tape=None: overall_loss(out, y, tape),
            [(f"score{i}", s) for i, s in enumerate(scores)])


CASES = [
    ("conv2d", _case_conv2d),
    ("relu", _case_relu),
    ("sigmoid", _case_sigmoid),
    ("elementwise_mul", _case_mul),
    ("concat_channels", _case_concat),
    ("split_channels", _case_split),
    ("upsample_bilinear", _case_upsample),
    ("max_pool2", _case_max_pool2),
    ("scan", _case_scan),
    ("scan_all_directions", _case_scan_all),
    ("attention_weights", _case_attention),
    ("dsc_forward", _case_dsc_forward),
    ("loss_l1", _case_loss(1)),
    ("loss_l2", _case_loss(2)),
    ("overall_loss", _case_overall_loss),
]


def check_op(name: str, instances: int = 100, seed: int = 0,
             tolerance: float = DEFAULT_TOLERANCE) -> OpReport:
    builder = dict(CASES)[name]
    tag = zlib.crc32(name.encode("ascii"))
    rs = RandomStream(seed).child(tag)
    start = time.perf_counter()
    max_err = 0.0
    for i in range(instances):
        run, checked = builder(rs.child(i))
        max_err = max(max_err, _check_instance(run, checked, rs.child(10_000 + i)))
    return OpReport(name, instances, max_err, tolerance,
                    seconds=time.perf_counter() - start)


def run_all(instances: int = 100, seed: int = 0,
            tolerance: float = DEFAULT_TOLERANCE) -> list[OpReport]:
    return [check_op(name, instances, seed, tolerance) for name, _ in CASES]
