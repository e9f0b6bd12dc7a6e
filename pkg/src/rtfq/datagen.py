"""Synthetic two-domain shape classification data and its on-disk container.

Each class is a parametric shape (bar, disk, cross, ring, ...) drawn with
per-sample jitter in position, size, orientation and color. The source domain
is a clean rendering; the target domain applies a ``ShiftSpec``.

Container layout (little-endian)::

    b"RTFQDS1\\0"                                   8 bytes
    u32 version, N, C, H, W, labels_present         24 bytes
    f32 images[N*C*H*W]
    u32 labels[N]                                   only if labels_present
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"RTFQDS1\x00"
VERSION = 1
_HEADER = struct.Struct("<6I")
KINDS = ("bar", "disk", "cross", "ring", "square", "triangle")


class DatasetFormatError(ValueError):
    pass


@dataclass
class DomainDataset:
    images: torch.Tensor
    labels: torch.Tensor | None
    domain: str
    num_classes: int

    def __post_init__(self):
        if self.images.dim() != 4:
            raise ValueError(f"images must be N x C x H x W, got shape {tuple(self.images.shape)}")
        if self.labels is not None:
            if self.labels.shape != (self.images.shape[0],):
                raise ValueError("labels must have one entry per image")
            if len(self.labels) and (int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_classes):
                raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    def unlabeled(self) -> "DomainDataset":
        return DomainDataset(self.images, None, self.domain, self.num_classes)

    def with_labels(self, labels: torch.Tensor) -> "DomainDataset":
        return DomainDataset(self.images, labels, self.domain, self.num_classes)


@dataclass(frozen=True)
class ShiftSpec:
    """Target-domain corruption. Each field is a per-channel brightness offset,
    a contrast factor around 0.5, additive Gaussian noise, and the amplitude and
    spatial frequency (cycles per image) of a striped background."""

    brightness: tuple[float, float, float] = (0.3, 0.3, 0.3)
    contrast: float = 1.0
    noise_sigma: float = 0.1
    texture_amplitude: float = 0.0
    texture_frequency: float = 0.0

    def __post_init__(self):
        if any(abs(b) > 1.0 for b in self.brightness):
            raise ValueError("brightness offsets must lie in [-1, 1]")
        if not 0.0 < self.contrast <= 2.0:
            raise ValueError("contrast must lie in (0, 2]")
        if not 0.0 <= self.noise_sigma <= 0.5:
            raise ValueError("noise_sigma must lie in [0, 0.5]")
        if not 0.0 <= self.texture_amplitude <= 0.5:
            raise ValueError("texture_amplitude must lie in [0, 0.5]")

    @classmethod
    def none(cls) -> "ShiftSpec":
        return cls(brightness=(0.0, 0.0, 0.0), contrast=1.0, noise_sigma=0.0)


def _render(labels: np.ndarray, size: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    n = labels.shape[0]
    coords = (np.arange(size) + 0.5) / size * 2 - 1  # [-1, 1]
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cx = rng.uniform(-0.25, 0.25, n)[:, None, None]
    cy = rng.uniform(-0.25, 0.25, n)[:, None, None]
    scale = rng.uniform(0.45, 0.7, n)[:, None, None]
    theta = rng.uniform(-0.35, 0.35, n)[:, None, None]
    kind = labels % len(KINDS)
    theta = theta + (labels // len(KINDS))[:, None, None] * (np.pi / 4)
    x = xx[None] - cx
    y = yy[None] - cy
    u = (np.cos(theta) * x + np.sin(theta) * y) / scale
    v = (-np.sin(theta) * x + np.cos(theta) * y) / scale
    r = np.sqrt(u * u + v * v)
    thick = 0.22
    # signed distance-like fields, negative inside
    fields = {
        "bar": np.maximum(np.abs(u) - 1.0, np.abs(v) - thick),
        "disk": r - 0.75,
        "cross": np.minimum(np.maximum(np.abs(u) - 1.0, np.abs(v) - thick),
                            np.maximum(np.abs(v) - 1.0, np.abs(u) - thick)),
        "ring": np.abs(r - 0.7) - thick * 0.8,
        "square": np.maximum(np.abs(u), np.abs(v)) - 0.65,
        "triangle": np.maximum(np.maximum(-v - 0.5, 0.866 * u + 0.5 * v - 0.5), -0.866 * u + 0.5 * v - 0.5),
    }
    d = np.zeros((n, size, size))
    for k, name in enumerate(KINDS):
        sel = kind == k
        if sel.any():
            d[sel] = fields[name][sel]
    mask = 1.0 / (1.0 + np.exp(d * size / 1.5))  # soft edge about one pixel wide
    fg = rng.uniform(0.55, 0.95, (n, channels))[:, :, None, None]
    bg = rng.uniform(0.0, 0.2, (n, channels))[:, :, None, None]
    img = bg + (fg - bg) * mask[:, None]
    img = img + rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


def apply_shift(images: np.ndarray, shift: ShiftSpec, rng: np.random.Generator) -> np.ndarray:
    n, c, h, w = images.shape
    out = (images - 0.5) * shift.contrast + 0.5
    if shift.texture_amplitude > 0:
        coords = np.arange(w) / w
        phase = rng.uniform(0, 2 * np.pi, (n, 1, 1, 1))
        stripes = np.sin(2 * np.pi * shift.texture_frequency * coords[None, None, None, :] + phase)
        out = out + shift.texture_amplitude * stripes
    bright = np.asarray(shift.brightness, dtype=np.float64)
    if bright.size != c:
        bright = np.resize(bright, c)
    out = out + bright[None, :, None, None]
    if shift.noise_sigma > 0:
        out = out + rng.normal(0.0, shift.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


def balanced_labels(n: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % classes)


def generate_pair(classes: int = 4, n_source: int = 2000, n_target: int = 2000,
                  shift: ShiftSpec | None = None, seed: int = 0, size: int = 32,
                  channels: int = 3):
    """Returns (labeled source, unlabeled target, target labels for evaluation)."""
    if classes < 2:
        raise ValueError(f"classes must be >= 2, got {classes}")
    if n_source < classes or n_target < classes:
        raise ValueError("each domain needs at least one sample per class")
    shift = ShiftSpec() if shift is None else shift
    ss = np.random.SeedSequence(seed)
    rng_s, rng_t, rng_shift = (np.random.default_rng(s) for s in ss.spawn(3))

    ys = balanced_labels(n_source, classes, rng_s)
    xs = _render(ys, size, channels, rng_s)
    yt = balanced_labels(n_target, classes, rng_t)
    xt = apply_shift(_render(yt, size, channels, rng_t), shift, rng_shift)

    source = DomainDataset(torch.from_numpy(xs.astype(np.float32)), torch.from_numpy(ys.astype(np.int64)),
                           "source", classes)
    target = DomainDataset(torch.from_numpy(xt.astype(np.float32)), None, "target", classes)
    return source, target, torch.from_numpy(yt.astype(np.int64))


def save_dataset(ds: DomainDataset, path) -> None:
    images = ds.images.detach().to(torch.float32).contiguous().numpy()
    n, c, h, w = images.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_HEADER.pack(VERSION, n, c, h, w, int(ds.labels is not None)))
        f.write(images.astype("<f4", copy=False).tobytes())
        if ds.labels is not None:
            f.write(ds.labels.numpy().astype("<u4").tobytes())


def load_dataset(path, domain: str | None = None, num_classes: int | None = None) -> DomainDataset:
    """Parse a container written by ``save_dataset``.

    ``num_classes`` defaults to max(label) + 1 when labels are present.
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) or raw[:len(MAGIC)] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic at offset 0 (expected {MAGIC!r})")
    off = len(MAGIC)
    if len(raw) < off + _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header at offset {off}")
    version, n, c, h, w, has_labels = _HEADER.unpack_from(raw, off)
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version} at offset {off}")
    if has_labels not in (0, 1):
        raise DatasetFormatError(f"{path}: labels_present must be 0 or 1 at offset {off + 20}")
    off += _HEADER.size
    count = n * c * h * w
    if count > (len(raw) - off) // 4:
        raise DatasetFormatError(f"{path}: image block of {count} floats overruns file at offset {off}")
    images = np.frombuffer(raw, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(n, c, h, w)
    off += 4 * count
    labels = None
    if has_labels:
        if len(raw) - off < 4 * n:
            raise DatasetFormatError(f"{path}: truncated labels at offset {off}")
        labels = torch.from_numpy(np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64))
        off += 4 * n
    if off != len(raw):
        raise DatasetFormatError(f"{path}: {len(raw) - off} trailing bytes at offset {off}")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels is not None and n else 2
    return DomainDataset(torch.from_numpy(images), labels, domain or ("source" if has_labels else "target"),
                         num_classes)
