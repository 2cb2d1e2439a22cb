"""Channels-last 3D convolution and trilinear upsampling.

Spatial tensors are laid out ``[X, Y, Z, C]`` or, batched, ``[N, X, Y, Z, C]``.
Convolution is cross-correlation with zero "same" padding, so every output
extent is ``ceil(extent / stride)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .core import Tensor, make_result


@dataclass(frozen=True)
class ConvSpec:
    kernel: int | tuple[int, int, int] = 3
    stride: int | tuple[int, int, int] = 1
    dilation: int | tuple[int, int, int] = 1
    padding: str = "same"

    def __post_init__(self):
        for name in ("kernel", "stride", "dilation"):
            val = getattr(self, name)
            if isinstance(val, int):
                val = (val, val, val)
            val = tuple(int(v) for v in val)
            if len(val) != 3 or any(v < 1 for v in val):
                raise ValueError(f"{name} must be three positive integers, got {val}")
            object.__setattr__(self, name, val)
        if any(k % 2 == 0 for k in self.kernel):
            raise ValueError(f"kernel extents must be odd, got {self.kernel}")
        if self.padding != "same":
            raise ValueError(f"only 'same' padding is supported, got {self.padding!r}")

    @property
    def effective_kernel(self) -> tuple[int, int, int]:
        return tuple(d * (k - 1) + 1 for k, d in zip(self.kernel, self.dilation))

    def output_shape(self, spatial) -> tuple[int, int, int]:
        return tuple(math.ceil(n / s) for n, s in zip(spatial, self.stride))

    def padding_for(self, spatial) -> list[tuple[int, int]]:
        pads = []
        for n, s, eff in zip(spatial, self.stride, self.effective_kernel):
            out = math.ceil(n / s)
            total = max((out - 1) * s + eff - n, 0)
            if eff > n + total:
                raise ValueError(f"effective kernel {eff} exceeds padded extent {n + total}")
            pads.append((total // 2, total - total // 2))
        return pads

    def offsets(self):
        return itertools.product(*(range(k) for k in self.kernel))


def _window(spec: ConvSpec, out_shape, offset):
    return tuple(
        slice(o * d, o * d + s * (n - 1) + 1, s)
        for o, d, s, n in zip(offset, spec.dilation, spec.stride, out_shape)
    )


def conv_windows(xp: np.ndarray, spec: ConvSpec, out_shape):
    """Yield ``(flat_offset, view)`` where view is ``xp`` sampled for one kernel tap.

    ``xp`` is padded and batched, ``[N, X, Y, Z, ...]``.
    """
    for i, off in enumerate(spec.offsets()):
        yield i, xp[(slice(None),) + _window(spec, out_shape, off)]


def scatter_windows(target: np.ndarray, spec: ConvSpec, out_shape, pieces) -> None:
    """Adjoint of :func:`conv_windows`: add each piece back into ``target``."""
    for off, piece in zip(spec.offsets(), pieces):
        target[(slice(None),) + _window(spec, out_shape, off)] += piece


def _check_spatial(x: Tensor, trailing: int, what: str) -> bool:
    if x.ndim == 3 + trailing:
        return False
    if x.ndim == 4 + trailing:
        return True
    raise ValueError(f"{what}: expected rank {3 + trailing} or {4 + trailing}, got {x.shape}")


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Cross-correlate ``x`` with ``weight`` of shape ``[kx, ky, kz, Cin, Cout]``."""
    batched = _check_spatial(x, 1, "conv3d input")
    xd = x.data if batched else x.data[None]
    kshape = weight.shape[:3]
    if weight.ndim != 5 or tuple(kshape) != spec.kernel:
        raise ValueError(f"weight shape {weight.shape} does not match kernel {spec.kernel}")
    cin, cout = weight.shape[3], weight.shape[4]
    if xd.shape[-1] != cin:
        raise ValueError(f"input has {xd.shape[-1]} channels, weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} != ({cout},)")

    n = xd.shape[0]
    spatial = xd.shape[1:4]
    pads = spec.padding_for(spatial)
    out_sp = spec.output_shape(spatial)
    xp = np.pad(xd, [(0, 0), *pads, (0, 0)]) if any(p != (0, 0) for p in pads) else xd
    rows = n * int(np.prod(out_sp))
    # one small GEMM per kernel tap; [taps, Cin, Cout]
    wt = weight.data.reshape(-1, cin, cout)
    out = np.zeros((rows, cout), dtype=np.result_type(xd, wt))
    for i, view in conv_windows(xp, spec, out_sp):
        out += view.reshape(rows, cin) @ wt[i]
    if bias is not None:
        out += bias.data
    out = out.reshape(n, *out_sp, cout)
    if not batched:
        out = out[0]

    def bw(g):
        g2 = g.reshape(rows, cout)
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if weight.requires_grad:
            gw = np.empty_like(wt)
            for i, view in conv_windows(xp, spec, out_sp):
                gw[i] = view.reshape(rows, cin).T @ g2
            gw = gw.reshape(weight.shape)
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            pieces = ((g2 @ wt[i].T).reshape(n, *out_sp, cin) for i in range(len(wt)))
            scatter_windows(gxp, spec, out_sp, pieces)
            crop = tuple(slice(lo, lo + s) for (lo, _), s in zip(pads, spatial))
            gx = gxp[(slice(None),) + crop]
            if not batched:
                gx = gx[0]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return make_result(out, parents, lambda g: bw(g)[:2], "conv3d")
    return make_result(out, parents, bw, "conv3d")


def _upsample_axis(x: Tensor, axis: int) -> Tensor:
    """Double one axis by linear interpolation with half-pixel centers."""
    xd = np.moveaxis(x.data, axis, 0)
    prev = np.concatenate([xd[:1], xd[:-1]], axis=0)
    nxt = np.concatenate([xd[1:], xd[-1:]], axis=0)
    even = 0.75 * xd + 0.25 * prev
    odd = 0.75 * xd + 0.25 * nxt
    out = np.stack([even, odd], axis=1).reshape((2 * xd.shape[0],) + xd.shape[1:])
    out = np.moveaxis(out, 0, axis).astype(x.dtype, copy=False)

    def bw(g):
        g = np.moveaxis(g, axis, 0)
        ge, go = g[0::2], g[1::2]
        gx = 0.75 * (ge + go)
        gx[:-1] += 0.25 * ge[1:]
        gx[0] += 0.25 * ge[0]
        gx[1:] += 0.25 * go[:-1]
        gx[-1] += 0.25 * go[-1]
        return (np.moveaxis(gx, 0, axis),)

    return make_result(np.ascontiguousarray(out), (x,), bw, "upsample")


def upsample3d(x: Tensor, factor: int = 2) -> Tensor:
    """Trilinear x2 upsampling of the three spatial axes (corners not aligned)."""
    if factor != 2:
        raise ValueError(f"only factor 2 is supported, got {factor}")
    batched = _check_spatial(x, 1, "upsample3d input")
    first = 1 if batched else 0
    for axis in range(first, first + 3):
        x = _upsample_axis(x, axis)
    return x
