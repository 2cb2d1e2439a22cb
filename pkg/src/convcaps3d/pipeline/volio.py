"""Raw volume files with JSON sidecars.

``name.vol`` holds little-endian samples with linear index
``m + M*(x + X*(y + Y*z))``; ``name.vol.json`` holds
``{"shape": [X, Y, Z], "channels": M, "dtype": "f32le" | "u8", "spacing": [...]}``.
Images are float32 ``[X, Y, Z, M]``; label volumes are uint8 ``[X, Y, Z]``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _write(path, arr: np.ndarray, dtype: str, spacing) -> None:
    x, y, z, m = arr.shape
    meta = {"shape": [x, y, z], "channels": m, "dtype": dtype,
            "spacing": [float(s) for s in spacing]}
    raw = np.ascontiguousarray(arr.transpose(2, 1, 0, 3), dtype=DTYPES[dtype])
    Path(path).write_bytes(raw.tobytes())
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True) + "\n")


def write_volume(path, volume: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    volume = np.asarray(volume)
    if volume.ndim == 3:
        volume = volume[..., None]
    if volume.ndim != 4:
        raise ValueError(f"volume must be [X,Y,Z] or [X,Y,Z,M], got {volume.shape}")
    _write(path, volume, "f32le", spacing)


def write_labels(path, labels: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ValueError(f"labels must be [X,Y,Z], got {labels.shape}")
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("labels must fit in u8")
    _write(path, labels[..., None], "u8", spacing)


def read_meta(path) -> dict:
    meta = json.loads(sidecar_path(path).read_text())
    for key in ("shape", "channels", "dtype", "spacing"):
        if key not in meta:
            raise ValueError(f"{sidecar_path(path)}: missing key {key!r}")
    if meta["dtype"] not in DTYPES:
        raise ValueError(f"{sidecar_path(path)}: unsupported dtype {meta['dtype']!r}")
    return meta


def _read(path) -> tuple[np.ndarray, dict]:
    meta = read_meta(path)
    x, y, z = meta["shape"]
    m = meta["channels"]
    dt = DTYPES[meta["dtype"]]
    raw = Path(path).read_bytes()
    if len(raw) != x * y * z * m * dt.itemsize:
        raise ValueError(f"{path}: expected {x * y * z * m * dt.itemsize} bytes, got {len(raw)}")
    arr = np.frombuffer(raw, dtype=dt).reshape(z, y, x, m).transpose(2, 1, 0, 3)
    return np.ascontiguousarray(arr), meta


def read_volume(path) -> tuple[np.ndarray, dict]:
    arr, meta = _read(path)
    if meta["dtype"] != "f32le":
        raise ValueError(f"{path}: expected an f32le image, got {meta['dtype']}")
    return arr.astype(np.float32), meta


def read_labels(path) -> tuple[np.ndarray, dict]:
    arr, meta = _read(path)
    if meta["dtype"] != "u8" or meta["channels"] != 1:
        raise ValueError(f"{path}: expected a single-channel u8 label volume")
    return arr[..., 0], meta
