from __future__ import annotations

import numpy as np

from ..model import Network, forward
from ..tensor import Tensor, no_grad


def tile_starts(extent: int, patch: int, overlap: float) -> list[int]:
    """Tile origins along one axis; the last tile is flush with the far edge."""
    if patch > extent:
        raise ValueError(f"patch {patch} larger than extent {extent}")
    step = max(1, int(patch * (1 - overlap)))
    starts = list(range(0, extent - patch + 1, step))
    if starts[-1] != extent - patch:
        starts.append(extent - patch)
    return starts


def sliding_window_probs(net: Network, volume, patch, overlap: float = 0.5) -> np.ndarray:
    """Per-voxel class probabilities averaged over every covering tile."""
    volume = np.asarray(volume, dtype=net.dtype)
    if volume.ndim == 3:
        volume = volume[..., None]
    patch = tuple(int(p) for p in (patch if np.ndim(patch) else (patch,) * 3))
    ext = volume.shape[:3]
    grids = [tile_starts(e, p, overlap) for e, p in zip(ext, patch)]
    acc = np.zeros(ext + (net.config.classes,), dtype=np.float64)
    hits = np.zeros(ext + (1,), dtype=np.float64)
    with no_grad():
        for x0 in grids[0]:
            for y0 in grids[1]:
                for z0 in grids[2]:
                    sl = (slice(x0, x0 + patch[0]), slice(y0, y0 + patch[1]),
                          slice(z0, z0 + patch[2]))
                    seg = forward(net, Tensor(volume[sl]))["seg"].data
                    acc[sl] += seg
                    hits[sl] += 1
    return acc / hits


def sliding_window_infer(net: Network, volume, patch, overlap: float = 0.5) -> np.ndarray:
    """Label volume from tiled inference; ties go to the smaller class index."""
    return sliding_window_probs(net, volume, patch, overlap).argmax(axis=-1).astype(np.uint8)
