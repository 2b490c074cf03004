"""The end-to-end shadow detection network.

A small convolutional backbone extracts features at four scales (two 3x3
conv+ReLU layers per stage, 2x2 max-pool between stages).  Every stage
except the first feeds a direction-aware context module; its output is
concatenated with that stage's convolutional features, upsampled to the
input resolution, and scored by a per-stage 1x1 head.  All upsampled stage
features are also merged by a 1x1 conv into multi-level integrated features
with their own score head, and a final 1x1 fusion conv combines every score
map (per-stage plus integrated) into the fused score map.  Every score map
is supervised during training; inference averages the sigmoids of the
integrated and fused maps.

Checkpoints are a single file: a textual manifest (one line per tensor with
name, shape and scalar type) followed by the raw values in manifest order
as little-endian 32-bit floats.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dsc import DscConfig, DscParams, dsc_forward, init_dsc_params
from .rng import RandomStream
from .scan import DIRECTIONS
from .tensor import (ConvParams, ShapeError, Tape, Tensor, check_finite,
                     concat_channels, conv2d, max_pool2, relu, sigmoid,
                     upsample_bilinear)

VARIANTS = ("basic", "context", "dsc")


@dataclass
class NetworkConfig:
    """Structural description of one network instance."""

    stage_channels: tuple = (8, 16, 32, 64)
    in_channels: int = 3
    mlif_channels: int = 16
    use_dsc: bool = True
    dsc: DscConfig = field(default_factory=DscConfig)

    def __post_init__(self):
        if len(self.stage_channels) < 2:
            raise ValueError("need at least two backbone stages")

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)


def variant_config(name: str, **kwargs) -> NetworkConfig:
    """Named configurations: 'basic' (no context modules), 'context'
    (modules with gating disabled), 'dsc' (the full network)."""
    if name == "basic":
        return NetworkConfig(use_dsc=False, **kwargs)
    if name == "context":
        return NetworkConfig(use_dsc=True, dsc=DscConfig(attention_enabled=False), **kwargs)
    if name == "dsc":
        return NetworkConfig(use_dsc=True, **kwargs)
    raise ValueError(f"unknown variant '{name}' (expected one of {VARIANTS})")


@dataclass
class BackboneStage:
    conv1: ConvParams
    conv2: ConvParams


@dataclass
class NetworkOutput:
    """Pre-sigmoid score maps, all at the input resolution."""

    layer_scores: list[Tensor]
    mlif_score: Tensor
    fusion_score: Tensor

    def named_scores(self):
        for i, s in enumerate(self.layer_scores):
            yield f"layer{i + 2}", s
        yield "mlif", self.mlif_score
        yield "fusion", self.fusion_score


class NetworkParams:
    """All trainable tensors, addressable by stable dotted names."""

    def __init__(self, config: NetworkConfig, stages: list[BackboneStage],
                 dsc: list[DscParams], heads: list[ConvParams],
                 mlif: ConvParams, mlif_head: ConvParams, fusion: ConvParams):
        self.config = config
        self.stages = stages
        self.dsc = dsc
        self.heads = heads
        self.mlif = mlif
        self.mlif_head = mlif_head
        self.fusion = fusion

    def _conv_items(self, name: str, p: ConvParams):
        yield f"{name}.weight", p.weights
        yield f"{name}.bias", p.bias

    def named_parameters(self):
        """Yield (name, tensor) pairs in a fixed, documented order."""
        for i, st in enumerate(self.stages, start=1):
            yield from self._conv_items(f"stage{i}.conv1", st.conv1)
            yield from self._conv_items(f"stage{i}.conv2", st.conv2)
        for i, d in enumerate(self.dsc, start=2):
            prefix = f"dsc{i}"
            if d.attention is not None:
                for k, cp in enumerate(d.attention):
                    yield from self._conv_items(f"{prefix}.att.{k}", cp)
            if d.attention2 is not None:
                for k, cp in enumerate(d.attention2):
                    yield from self._conv_items(f"{prefix}.att2.{k}", cp)
            for r, sp in enumerate(d.scans, start=1):
                for direction in DIRECTIONS:
                    yield f"{prefix}.scan{r}.{direction}", sp.weights[direction]
            for r, cp in enumerate(d.reduces, start=1):
                yield from self._conv_items(f"{prefix}.reduce{r}", cp)
            yield from self._conv_items(f"{prefix}.out", d.output)
        for i, cp in enumerate(self.heads, start=2):
            yield from self._conv_items(f"head{i}", cp)
        yield from self._conv_items("mlif", self.mlif)
        yield from self._conv_items("mlif_head", self.mlif_head)
        yield from self._conv_items("fusion", self.fusion)

    def zero_grads(self) -> None:
        for _, t in self.named_parameters():
            t.zero_grad()

    def astype(self, dtype) -> "NetworkParams":
        """Copy with every tensor cast to dtype (for gradient-check mode)."""
        import copy
        clone = copy.deepcopy(self)
        for _, t in clone.named_parameters():
            t.data = t.data.astype(dtype)
            t.grad = None
        return clone


def init_network(config: NetworkConfig, rng: RandomStream, dtype=np.float32) -> NetworkParams:
    """Seeded initialization: fan-in scaled uniform conv weights (He bound
    sqrt(6/fan_in), which preserves activation scale through ReLU stacks),
    zero biases, identity recurrences, neutral (all-ones) starting gates."""
    def conv(in_c, out_c, k, pad):
        bound = np.sqrt(6.0 / (in_c * k * k))
        w = rng.uniform_array((out_c, in_c, k, k), -bound, bound, dtype)
        return ConvParams(Tensor(w), Tensor(np.zeros(out_c, dtype=dtype)), 1, pad)

    chans = config.stage_channels
    stages = []
    prev = config.in_channels
    for c in chans:
        stages.append(BackboneStage(conv(prev, c, 3, 1), conv(c, c, 3, 1)))
        prev = c

    dsc = []
    if config.use_dsc:
        for c in chans[1:]:
            dsc.append(init_dsc_params(c, c, config.dsc, rng, dtype))

    # Heads read the upsampled per-stage maps: conv features concatenated
    # with context features when present, conv features alone otherwise.
    stage_widths = [2 * c if config.use_dsc else c for c in chans[1:]]
    heads = [conv(wd, 1, 1, 0) for wd in stage_widths]
    mlif = conv(sum(stage_widths), config.mlif_channels, 1, 0)
    mlif_head = conv(config.mlif_channels, 1, 1, 0)
    fusion = conv(len(stage_widths) + 1, 1, 1, 0)
    return NetworkParams(config, stages, dsc, heads, mlif, mlif_head, fusion)


def forward(image: Tensor, params: NetworkParams, tape: Tape | None = None) -> NetworkOutput:
    """Full forward pass producing every supervised score map."""
    cfg = params.config
    b, c, h, w = image.data.shape
    if c != cfg.in_channels:
        raise ShapeError(f"network expects {cfg.in_channels}-channel images, got {c}")
    factor = 2 ** (cfg.num_stages - 1)
    if h % factor or w % factor:
        raise ShapeError(
            f"image dims {h}x{w} are not divisible by {factor}; pad the image "
            f"to a multiple of {factor} before running the network")

    feats = []
    cur = image
    for i, st in enumerate(params.stages, start=1):
        if i > 1:
            cur = max_pool2(cur, tape)
        cur = relu(conv2d(cur, st.conv1, tape), tape)
        cur = relu(conv2d(cur, st.conv2, tape), tape)
        check_finite(cur.data, f"stage{i} features")
        feats.append(cur)

    upsampled = []
    layer_scores = []
    for idx, feat in enumerate(feats[1:]):
        stage = idx + 2
        if cfg.use_dsc:
            ctx = dsc_forward(feat, params.dsc[idx], cfg.dsc, tape)
            check_finite(ctx.data, f"dsc{stage} features")
            merged = concat_channels([ctx, feat], tape)
        else:
            merged = feat
        up = upsample_bilinear(merged, h, w, tape)
        upsampled.append(up)
        score = conv2d(up, params.heads[idx], tape)
        check_finite(score.data, f"head{stage} score")
        layer_scores.append(score)

    mlif_feat = conv2d(concat_channels(upsampled, tape), params.mlif, tape)
    mlif_score = conv2d(mlif_feat, params.mlif_head, tape)
    check_finite(mlif_score.data, "mlif score")
    fusion_in = concat_channels(layer_scores + [mlif_score], tape)
    fusion_score = conv2d(fusion_in, params.fusion, tape)
    check_finite(fusion_score.data, "fusion score")
    return NetworkOutput(layer_scores, mlif_score, fusion_score)


def predict(image: Tensor, params: NetworkParams) -> Tensor:
    """Shadow probability map: mean of the sigmoided integrated and fused scores."""
    out = forward(image, params)
    pm = sigmoid(out.mlif_score)
    pf = sigmoid(out.fusion_score)
    return Tensor(0.5 * (pm.data + pf.data))


class CheckpointError(ValueError):
    """Raised when a checkpoint file does not match the expected parameters."""


_MAGIC = "DSCNET1"


def save_checkpoint(params: NetworkParams, path) -> None:
    names = []
    blobs = []
    for name, t in params.named_parameters():
        shape = ",".join(str(s) for s in t.data.shape)
        names.append(f"tensor {name} {shape} f32\n")
        blobs.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write((_MAGIC + "\n").encode("ascii"))
        fh.write(f"count {len(names)}\n".encode("ascii"))
        for line in names:
            fh.write(line.encode("ascii"))
        fh.write(b"data\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(params: NetworkParams, path) -> None:
    """Load values into an existing parameter set, validating the manifest.

    Every manifest entry must match a parameter name and shape exactly; a
    missing or extra tensor is an error.  Stored values are 32-bit floats
    and are cast to the parameter dtype on load.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    header_end = raw.find(b"data\n")
    if header_end < 0 or not raw.startswith((_MAGIC + "\n").encode("ascii")):
        raise CheckpointError(f"{path} is not a recognized checkpoint file")
    lines = raw[:header_end].decode("ascii").splitlines()
    try:
        count = int(lines[1].split()[1])
    except (IndexError, ValueError):
        raise CheckpointError(f"{path}: malformed manifest header") from None
    entries = []
    for line in lines[2:]:
        kind, name, shape_s, scalar = line.split()
        if kind != "tensor" or scalar != "f32":
            raise CheckpointError(f"{path}: unsupported manifest entry '{line}'")
        shape = tuple(int(s) for s in shape_s.split(","))
        entries.append((name, shape))
    if len(entries) != count:
        raise CheckpointError(f"{path}: manifest declares {count} tensors, lists {len(entries)}")

    expected = dict(params.named_parameters())
    seen = set()
    offset = header_end + len(b"data\n")
    loaded = {}
    for name, shape in entries:
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected tensor '{name}'")
        if name in seen:
            raise CheckpointError(f"{path}: duplicate tensor '{name}'")
        seen.add(name)
        t = expected[name]
        if t.data.shape != shape:
            raise CheckpointError(
                f"{path}: tensor '{name}' has shape {shape}, expected {t.data.shape}")
        nbytes = 4 * int(np.prod(shape)) if shape else 4
        blob = raw[offset:offset + nbytes]
        if len(blob) != nbytes:
            raise CheckpointError(f"{path}: truncated data for tensor '{name}'")
        offset += nbytes
        loaded[name] = np.frombuffer(blob, dtype="<f4").reshape(shape)
    missing = sorted(set(expected) - seen)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing}")
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after tensor data")
    for name, arr in loaded.items():
        t = expected[name]
        t.data = arr.astype(t.data.dtype)
        t.grad = None
