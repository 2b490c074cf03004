"""Datasets: PNG image/mask pairs, synthetic shadow scenes, augmentation.

Synthetic scenes are built from seeded streams only (see :mod:`dscnet.rng`),
so a config with the same seed yields bit-identical samples on any platform.
Each image is a smooth color gradient plus coarse and fine brightness
texture; shadows are 1 to 4 convex shapes (ellipses or convex polygons)
whose interiors multiply the image by a darkening factor, with a box-blurred
soft boundary.  A pixel belongs to the ground-truth mask when it receives at
least half of a shape's full darkening, so the labeled region tracks the
shape outline even when the edge is soft.  The generator retries (on a fresh
substream) until shadows cover 2 to 40 percent of the image, keeping shadow
pixels the minority class.

Directory layout for on-disk datasets: ``images/NAME.png`` (8-bit RGB) and
``masks/NAME.png`` (8-bit grayscale, binarized at 128 on load).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .rng import RandomStream
from .tensor import Tensor, _interp_matrix


@dataclass
class Sample:
    image: Tensor  # (1, 3, H, W) in [0, 1]
    mask: Tensor   # (1, 1, H, W) in {0, 1}
    id: str
    provenance: str

    def __post_init__(self):
        if self.image.data.shape[2:] != self.mask.data.shape[2:]:
            raise ValueError(
                f"sample '{self.id}': image {self.image.shape} and mask "
                f"{self.mask.shape} disagree spatially")
        m = self.mask.data
        if not np.all((m == 0) | (m == 1)):
            raise ValueError(f"sample '{self.id}': mask is not strictly binary")


@dataclass
class SynthConfig:
    seed: int = 0
    count: int = 20
    size: int = 64
    shapes_per_image: tuple = (1, 4)
    darkening: tuple = (0.6, 0.85)
    softness: tuple = (1.0, 3.0)

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be positive")
        if self.size < 16 or self.size & (self.size - 1):
            raise ValueError(f"size must be a power of two >= 16, got {self.size}")
        lo, hi = self.shapes_per_image
        if not (1 <= lo <= hi):
            raise ValueError(f"bad shapes_per_image range {self.shapes_per_image}")
        dl, dh = self.darkening
        if not (0.0 < dl <= dh < 1.0):
            raise ValueError(f"darkening factors must lie in (0, 1), got {self.darkening}")
        sl, sh = self.softness
        if not (0.0 <= sl <= sh):
            raise ValueError(f"bad softness range {self.softness}")


def _box_blur(field: np.ndarray, radius: int) -> np.ndarray:
    """Separable box blur with edge replication."""
    if radius < 1:
        return field
    k = 2 * radius + 1
    out = field
    for axis in (0, 1):
        padded = np.pad(out, [(radius + 1, radius) if a == axis else (0, 0)
                              for a in range(2)], mode="edge")
        csum = np.cumsum(padded, axis=axis)
        hi = np.take(csum, range(k, csum.shape[axis]), axis=axis)
        lo = np.take(csum, range(0, csum.shape[axis] - k), axis=axis)
        out = (hi - lo) / k
    return out


def _convex_hull(pts: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; returns hull vertices in CCW order."""
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def half(points):
        chain = []
        for p in points:
            while len(chain) >= 2:
                o, a = chain[-2], chain[-1]
                if (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0]) <= 0:
                    chain.pop()
                else:
                    break
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _shape_interior(rs: RandomStream, size: int, xx: np.ndarray, yy: np.ndarray,
                    axis_angle: float):
    """One random convex interior; returns (mask, min_radius).

    Most shapes are elongated along the image's shared shadow axis (with a
    small per-shape jitter), the rest are compact blobs.  The shared axis
    varies from image to image, so exploiting elongation requires selecting
    the informative direction per input rather than hard-wiring it.
    """
    cx = rs.uniform(0.15, 0.85) * size
    cy = rs.uniform(0.15, 0.85) * size
    kind = rs.uniform()
    if kind < 0.75:  # elongated along the image axis
        rx = rs.uniform(size / 18.0, size / 8.0)
        ry = rs.uniform(size / 4.0, size / 1.8)
        theta = axis_angle + rs.uniform(-0.25, 0.25)
    else:  # compact blob, orientation-neutral
        rx = rs.uniform(size / 10.0, size / 4.0)
        ry = rs.uniform(size / 10.0, size / 4.0)
        theta = rs.uniform(0.0, np.pi)
    if kind < 0.9:  # rotated ellipse
        dx, dy = xx - cx, yy - cy
        xr = dx * np.cos(theta) + dy * np.sin(theta)
        yr = -dx * np.sin(theta) + dy * np.cos(theta)
        return (xr / rx) ** 2 + (yr / ry) ** 2 <= 1.0, min(rx, ry)
    k = 4 + rs.randint(4)
    angles = sorted(rs.uniform(0.0, 2.0 * np.pi) for _ in range(k))
    scales = [rs.uniform(0.7, 1.0) for _ in range(k)]
    pts = np.array([[cx + rx * s * np.cos(a), cy + ry * s * np.sin(a)]
                    for a, s in zip(angles, scales)])
    hull = _convex_hull(pts)
    inside = np.ones_like(xx, dtype=bool)
    for i in range(len(hull)):
        x1, y1 = hull[i]
        x2, y2 = hull[(i + 1) % len(hull)]
        inside &= (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1) >= 0
    return inside, min(rx, ry) * 0.7


def _synth_one(rs: RandomStream, cfg: SynthConfig):
    size = cfg.size
    axis = np.arange(size, dtype=np.float64)
    xx, yy = np.meshgrid(axis, axis)
    xn = xx / (size - 1) - 0.5
    yn = yy / (size - 1) - 0.5

    # Base brightness varies widely from image to image, so "dark" is only
    # meaningful relative to the rest of the picture.  The lighting gradient
    # runs along the same per-image axis the shadows are elongated on.
    base = rs.uniform(0.35, 0.95)
    axis_angle = rs.uniform(0.0, np.pi)
    gdir = np.cos(axis_angle) * xn + np.sin(axis_angle) * yn
    img = np.empty((3, size, size))
    for c in range(3):
        img[c] = base + rs.uniform(-0.08, 0.08) + rs.uniform(-0.3, 0.3) * gdir

    # Brightness blotches at two scales, shared across channels.  The ranges
    # skew dark so background patches can be as dim as a light shadow, which
    # keeps per-pixel brightness from determining the label on its own.
    for grid, lo, hi in ((max(2, size // 8), -0.22, 0.12),
                         (max(2, size // 4), -0.1, 0.07)):
        blotch = rs.uniform_array((grid, grid), lo, hi)
        up = _interp_matrix(size, grid, np.float64)
        img += up @ blotch @ up.T

    # Streaky texture running across the shadow axis: dark stripes with the
    # same width and depth as a light shadow but the perpendicular
    # orientation, so darkness plus elongation only means shadow when the
    # orientation matches this image's axis.
    along = -np.sin(axis_angle) * (xx - size / 2) + np.cos(axis_angle) * (yy - size / 2)
    knots = rs.uniform_array((17,), -0.22, 0.1)
    t = (along / (size * np.sqrt(2.0)) + 0.5) * (len(knots) - 1)
    i0 = np.clip(np.floor(t).astype(int), 0, len(knots) - 2)
    frac = t - i0
    img += knots[i0] * (1 - frac) + knots[i0 + 1] * frac

    img += rs.uniform_array((3, size, size), -0.02, 0.02)
    img = np.clip(img, 0.04, 1.0)

    lo, hi = cfg.shapes_per_image
    n_shapes = lo + rs.randint(hi - lo + 1)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(n_shapes):
        interior, min_radius = _shape_interior(rs, size, xx, yy, axis_angle)
        # cap the blur so a thin shape's spine keeps a soft value above 1/2,
        # otherwise its mask would vanish under its own boundary blur
        radius = int(round(min(rs.uniform(*cfg.softness), min_radius / 2.0)))
        soft = _box_blur(interior.astype(np.float64), radius)
        factor = rs.uniform(*cfg.darkening)
        img *= 1.0 - (1.0 - factor) * soft[None]
        mask |= soft >= 0.5
    return np.clip(img, 0.0, 1.0), mask


def synthesize(cfg: SynthConfig, dtype=np.float32) -> list[Sample]:
    """Deterministic synthetic dataset; identical config gives identical bits."""
    root = RandomStream(cfg.seed)
    samples = []
    for i in range(cfg.count):
        per_sample = root.child(i)
        for attempt in range(100):
            img, mask = _synth_one(per_sample.child(attempt), cfg)
            density = mask.mean()
            if 0.02 <= density <= 0.40:
                break
        else:
            raise RuntimeError(
                f"sample {i}: no draw with 2-40% shadow cover in 100 attempts; "
                f"the configured shape/darkening ranges are too extreme")
        samples.append(Sample(
            image=Tensor(img[None].astype(dtype)),
            mask=Tensor(mask[None, None].astype(dtype)),
            id=f"synth_{cfg.seed}_{i:04d}",
            provenance=f"seed={cfg.seed},index={i},attempt={attempt}"))
    return samples


def hflip(s: Sample) -> Sample:
    """Mirror a sample about the vertical axis; applying it twice restores
    the original, including the id (a '.flip' suffix toggles)."""
    new_id = s.id[:-5] if s.id.endswith(".flip") else s.id + ".flip"
    return Sample(image=Tensor(s.image.data[..., ::-1].copy()),
                  mask=Tensor(s.mask.data[..., ::-1].copy()),
                  id=new_id, provenance=s.provenance)


def load_dataset(root, dtype=np.float32) -> list[Sample]:
    """Load image/mask PNG pairs from root/images and root/masks."""
    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    for d in (img_dir, mask_dir):
        if not os.path.isdir(d):
            raise FileNotFoundError(f"dataset directory missing: {d}")
    img_names = sorted(n for n in os.listdir(img_dir) if n.endswith(".png"))
    mask_names = sorted(n for n in os.listdir(mask_dir) if n.endswith(".png"))
    if img_names != mask_names:
        missing = sorted(set(img_names) ^ set(mask_names))
        raise FileNotFoundError(f"unpaired dataset files: {missing}")

    samples = []
    for name in img_names:
        img_path = os.path.join(img_dir, name)
        mask_path = os.path.join(mask_dir, name)
        img = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float64) / 255.0
        mask = np.asarray(Image.open(mask_path).convert("L"))
        if img.shape[:2] != mask.shape:
            raise ValueError(
                f"pair '{name}': image is {img.shape[1]}x{img.shape[0]}, "
                f"mask is {mask.shape[1]}x{mask.shape[0]}")
        samples.append(Sample(
            image=Tensor(img.transpose(2, 0, 1)[None].astype(dtype)),
            mask=Tensor((mask >= 128)[None, None].astype(dtype)),
            id=name[:-4],
            provenance=f"file:{img_path}"))
    return samples


def save_dataset(samples: list[Sample], root) -> None:
    """Write samples as 8-bit PNG pairs under root/images and root/masks."""
    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    for s in samples:
        rgb = np.round(255.0 * s.image.data[0].transpose(1, 2, 0).astype(np.float64))
        Image.fromarray(rgb.astype(np.uint8), "RGB").save(
            os.path.join(img_dir, s.id + ".png"))
        Image.fromarray((s.mask.data[0, 0] * 255).astype(np.uint8), "L").save(
            os.path.join(mask_dir, s.id + ".png"))


def save_prediction_png(prob: np.ndarray, path) -> None:
    """Store a probability map as 8-bit grayscale, byte = round(255 p).

    Exact p = 0.5 stores as byte 128, so thresholding the stored byte at
    128 agrees with thresholding p at 0.5.
    """
    arr = np.asarray(prob, dtype=np.float64)
    if arr.ndim == 4:
        arr = arr[0, 0]
    Image.fromarray(np.round(255.0 * arr).astype(np.uint8), "L").save(path)


def load_prediction_png(path, dtype=np.float32) -> Tensor:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0
    return Tensor(arr[None, None].astype(dtype))
