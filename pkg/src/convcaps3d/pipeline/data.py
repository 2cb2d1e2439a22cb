"""Input normalization, synthetic phantoms and patch sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_EXTENT = 16


def normalize(volume: np.ndarray) -> np.ndarray:
    """Rescale each channel (last axis) to [0, 1]; constant channels become 0."""
    volume = np.asarray(volume)
    if np.isnan(volume).any():
        raise ValueError("cannot normalize a volume containing NaN")
    if volume.ndim == 3:
        return normalize(volume[..., None])[..., 0]
    axes = tuple(range(volume.ndim - 1))
    lo = volume.min(axis=axes, keepdims=True)
    span = volume.max(axis=axes, keepdims=True) - lo
    safe = np.where(span > 0, span, 1)
    return np.where(span > 0, (volume - lo) / safe, 0).astype(volume.dtype)


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (64, 64, 64)
    classes: int = 4
    modalities: int = 2
    noise: float = 0.05
    seed: int = 0


def _random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def generate_phantom(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Nested random ellipsoids: outer shell class 1 ... innermost class C-1.

    Returns a normalized float32 image ``[X, Y, Z, M]`` and uint8 labels. Each
    modality gives every class its own mean intensity plus Gaussian noise.
    """
    shape = tuple(int(n) for n in spec.shape)
    if len(shape) != 3 or min(shape) < MIN_EXTENT:
        raise ValueError(f"phantom extents {shape} too small for nested shells "
                         f"(minimum {MIN_EXTENT})")
    if spec.classes < 2 or spec.classes > 255 or spec.modalities < 1:
        raise ValueError("phantom needs 2..255 classes and at least one modality")
    rng = np.random.default_rng(spec.seed)
    ext = np.asarray(shape, dtype=np.float64)
    # radii up to 0.8 of the half extent (less a margin); the bounding sphere
    # then keeps any rotation of the ellipsoid inside the volume
    radii = rng.uniform(0.5, 0.8, size=3) * (ext.min() / 2 - 1.5)
    reach = np.ceil(radii.max()) + 1
    center = rng.uniform(reach, ext - 1 - reach)
    rot = _random_rotation(rng)

    grid = np.stack(np.meshgrid(*(np.arange(n) for n in shape), indexing="ij"), axis=-1)
    local = (grid - center) @ rot
    rho = np.sqrt(((local / radii) ** 2).sum(axis=-1))

    shells = spec.classes - 1
    labels = np.zeros(shape, dtype=np.uint8)
    scales = np.linspace(1.0, 0.35, shells) if shells > 1 else np.ones(1)
    scales = scales * np.concatenate([[1.0], rng.uniform(0.9, 1.1, shells - 1)])
    for cls, scale in enumerate(scales, start=1):
        labels[rho <= scale] = cls

    image = np.empty(shape + (spec.modalities,), dtype=np.float64)
    base = np.linspace(0.1, 0.9, spec.classes)
    for m in range(spec.modalities):
        means = base if m % 2 == 0 else base[::-1]
        means = means + rng.uniform(-0.03, 0.03, spec.classes)
        image[..., m] = means[labels] + rng.normal(0.0, spec.noise, shape)
    return normalize(image).astype(np.float32), labels


def sample_patches(volume, labels, size, n: int, fg_bias: float, seed: int = 0):
    """Draw ``n`` random patches ``(image_patch, label_patch)``.

    With probability ``fg_bias`` a patch is placed so that a random foreground
    voxel sits at its center (shifted inward at the borders); otherwise the
    corner is uniform.
    """
    volume, labels = np.asarray(volume), np.asarray(labels)
    size = tuple(int(s) for s in (size if np.ndim(size) else (size,) * 3))
    ext = labels.shape
    if any(s > e for s, e in zip(size, ext)):
        raise ValueError(f"patch {size} exceeds volume {ext}")
    rng = np.random.default_rng(seed)
    fg = np.argwhere(labels > 0)
    hi = np.asarray(ext) - np.asarray(size)
    out = []
    for _ in range(n):
        if len(fg) and rng.random() < fg_bias:
            center = fg[rng.integers(len(fg))]
            corner = np.clip(center - np.asarray(size) // 2, 0, hi)
        else:
            corner = np.array([rng.integers(h + 1) for h in hi])
        sl = tuple(slice(c, c + s) for c, s in zip(corner, size))
        out.append((volume[sl].copy(), labels[sl].copy()))
    return out
