"""Object-cue input channels: fg/bg masks, filtered edges, mask noise and input assembly.

Label maps and binary masks are plain 2D numpy arrays (integer and uint8
respectively). The helpers here validate shapes and value ranges and raise
``ShapeError`` / ``ValueError`` on contract violations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage


class ShapeError(ValueError):
    pass


class ProviderError(RuntimeError):
    pass


DEFAULT_ROLES = ("R", "G", "B", "fg", "edge")


def check_labelmap(labels: np.ndarray, num_classes: int | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError(f"label map must be 2D, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError(f"label map must be integer typed, got {labels.dtype}")
    if labels.size and labels.min() < 0:
        raise ValueError("label map contains negative class ids")
    if num_classes is not None and labels.size and labels.max() >= num_classes:
        raise ValueError(f"label {labels.max()} out of range for K={num_classes}")
    return labels


def derive_foreground(objects: np.ndarray) -> np.ndarray:
    """Binary fg/bg mask: 1 wherever the object label is non-background."""
    objects = check_labelmap(objects)
    return (objects != 0).astype(np.uint8)


def filter_edges(raw: np.ndarray, fg: np.ndarray, threshold: float = 0.0) -> np.ndarray:
    """Binarize a raw edge response (``raw > threshold``) and keep foreground edges only."""
    raw = np.asarray(raw)
    fg = np.asarray(fg)
    if raw.shape != fg.shape:
        raise ShapeError(f"raw edge map {raw.shape} vs fg {fg.shape}")
    return ((raw > threshold) & (fg == 1)).astype(np.uint8)


def flip_count(level: float, n: int) -> int:
    # round half up, so 0.5 always rounds away from zero
    return int(math.floor(level * n + 0.5))


def _rng(seed: int, stream: int = 0) -> np.random.Generator:
    # PCG64 seeded through SeedSequence: portable and stable across platforms
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream)])))


def inject_noise(mask: np.ndarray, level: float, seed: int, stream: int = 0) -> np.ndarray:
    """Flip exactly ``flip_count(level, H*W)`` distinct pixels chosen uniformly at random."""
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"noise level must lie in [0, 1], got {level}")
    mask = np.asarray(mask, dtype=np.uint8)
    n = mask.size
    k = flip_count(level, n)
    out = mask.copy().reshape(-1)
    if k:
        idx = _rng(seed, stream).permutation(n)[:k]
        out[idx] = 1 - out[idx]
    return out.reshape(mask.shape)


def estimate_noise(candidate: np.ndarray, reference: np.ndarray) -> float:
    candidate = np.asarray(candidate)
    reference = np.asarray(reference)
    if candidate.shape != reference.shape:
        raise ShapeError(f"{candidate.shape} vs {reference.shape}")
    return float(np.count_nonzero(candidate != reference)) / candidate.size


@dataclass
class ChannelStack:
    """H x W x C float32 network input with named channel roles."""

    data: np.ndarray
    roles: tuple[str, ...] = DEFAULT_ROLES

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != len(self.roles):
            raise ShapeError(f"stack shape {self.data.shape} does not match roles {self.roles}")

    @property
    def k(self) -> int:
        return self.data.shape[2] - 3

    def channel(self, role: str) -> np.ndarray:
        return self.data[..., self.roles.index(role)]

    def to_chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.data.transpose(2, 0, 1))


def assemble_input(
    rgb: np.ndarray,
    fg: np.ndarray | None = None,
    edge: np.ndarray | None = None,
    extras: Sequence[tuple[str, np.ndarray]] = (),
) -> ChannelStack:
    """Stack RGB with the auxiliary masks, in the order R, G, B, fg, edge, extras."""
    rgb = np.asarray(rgb, dtype=np.float32)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"rgb must be H x W x 3, got {rgb.shape}")
    planes = [rgb]
    roles = ["R", "G", "B"]
    aux = [("fg", fg), ("edge", edge), *extras]
    for role, plane in aux:
        if plane is None:
            continue
        plane = np.asarray(plane)
        if plane.shape != rgb.shape[:2]:
            raise ShapeError(f"{role} channel {plane.shape} vs rgb {rgb.shape[:2]}")
        planes.append(plane.astype(np.float32)[..., None])
        roles.append(role)
    return ChannelStack(np.concatenate(planes, axis=2), tuple(roles))


def gradient_edges(rgb: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude of the luminance, scaled to [0, 1]."""
    gray = np.asarray(rgb, dtype=np.float64) @ np.array([0.299, 0.587, 0.114])
    mag = np.hypot(ndimage.sobel(gray, axis=0), ndimage.sobel(gray, axis=1))
    peak = mag.max()
    return mag / peak if peak > 0 else mag


@dataclass(frozen=True)
class MaskProvider:
    """Where the fg and edge channels come from.

    kind is one of ``oracle``, ``synthetic-degraded``, ``gradient-edge`` or
    ``file-backed``. ``noise_level`` only applies to synthetic-degraded,
    ``edge_threshold`` to gradient-edge and ``root`` to file-backed.
    """

    kind: str = "oracle"
    noise_level: float = 0.0
    edge_threshold: float = 0.0
    root: str | None = None

    KINDS = ("oracle", "synthetic-degraded", "gradient-edge", "file-backed")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown mask provider kind {self.kind!r}")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError(f"noise level must lie in [0, 1], got {self.noise_level}")


def provide_masks(sample, provider: MaskProvider, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Return (fg, edge) binary masks for ``sample`` according to ``provider``.

    ``sample`` needs ``image_id`` and, depending on the provider, ``rgb``,
    ``objects`` and ``gt_edges``.
    """
    if provider.kind == "file-backed":
        if provider.root is None:
            raise ProviderError("file-backed provider needs a root directory")
        root = Path(provider.root)
        return (
            read_mask(root / "fg" / f"{sample.image_id}.png"),
            read_mask(root / "edge" / f"{sample.image_id}.png"),
        )

    if getattr(sample, "objects", None) is None:
        raise ProviderError(f"ground-truth objects missing for image {sample.image_id!r}")
    fg = derive_foreground(sample.objects)

    if provider.kind == "gradient-edge":
        return fg, filter_edges(gradient_edges(sample.rgb), fg, provider.edge_threshold)

    if getattr(sample, "gt_edges", None) is None:
        raise ProviderError(f"ground-truth edges missing for image {sample.image_id!r}")
    edge = filter_edges(sample.gt_edges, fg)
    if provider.kind == "synthetic-degraded":
        # edges are degraded after fg filtering; each mask gets its own flip set
        fg = inject_noise(fg, provider.noise_level, seed, stream=0)
        edge = inject_noise(edge, provider.noise_level, seed, stream=1)
    return fg, edge


# -- rasters on disk ---------------------------------------------------------

def write_labelmap(path: str | Path, labels: np.ndarray, num_classes: int) -> None:
    dtype = np.uint8 if num_classes <= 256 else np.uint16
    Image.fromarray(np.asarray(labels).astype(dtype)).save(path)


def read_labelmap(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ProviderError(f"missing raster {path}")
    with Image.open(path) as im:
        return np.array(im).astype(np.int64)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def read_mask(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ProviderError(f"missing mask raster {path}")
    with Image.open(path) as im:
        return (np.array(im) > 127).astype(np.uint8)
