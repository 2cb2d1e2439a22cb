"""Capsule primitives: squash, primary capsules, convolutional capsules with
dynamic routing-by-agreement.

A capsule map is a tensor ``[X, Y, Z, T, A]`` (optionally with a leading batch
axis): ``T`` capsule types per voxel, each an ``A``-dimensional pose vector
whose length is the probability that the entity is present.
"""

from __future__ import annotations

import numpy as np

from .tensor import ConvSpec, Tensor, make_result
from .tensor import ops
from .tensor.conv import conv_windows, scatter_windows


def squash(s: Tensor) -> Tensor:
    """Scale each pose vector ``s`` to length ``|s|^2 / (1 + |s|^2)``.

    Computed as ``s * |s| / (1 + |s|^2)``, which needs no division by ``|s|``
    and is continuously differentiable at the origin (Jacobian 0 there).
    """
    sd = s.data
    r = np.sqrt((sd * sd).sum(axis=-1, keepdims=True))
    denom = 1.0 + r * r
    scale = r / denom
    out = sd * scale

    def bw(g):
        # J = scale*I + (1 - r^2) / ((1 + r^2)^2 r) * s s^T
        safe_r = np.where(r > 0, r, 1.0)
        coef = np.where(r > 0, (1.0 - r * r) / (denom * denom * safe_r), 0.0)
        dot = (sd * g).sum(axis=-1, keepdims=True)
        return (g * scale + sd * (coef * dot),)

    return make_result(out.astype(sd.dtype, copy=False), (s,), bw, "squash")


def capsule_length(caps: Tensor) -> Tensor:
    """Pose-vector lengths, ``[..., T, A] -> [..., T]``."""
    return ops.vector_norm(caps)


def primary_caps(features: Tensor, types: int) -> Tensor:
    """Split the channel axis into ``types`` capsules and squash each one."""
    f = features.shape[-1]
    if types < 1 or f % types:
        raise ValueError(f"{f} channels cannot be split into {types} capsule types")
    poses = ops.reshape(features, features.shape[:-1] + (types, f // types))
    return squash(poses)


def dynamic_routing(votes: Tensor, iterations: int = 3) -> tuple[Tensor, Tensor]:
    """Route ``votes[..., N, T_out, A_out]`` to ``T_out`` output capsules.

    Returns ``(poses[..., T_out, A_out], couplings[..., N, T_out])``. Routing
    logits start at zero on every call; each vote's couplings are a softmax
    over output types. The loop is unrolled so gradients flow through the
    couplings.
    """
    if iterations < 1:
        raise ValueError(f"routing needs at least one iteration, got {iterations}")
    if votes.ndim < 3 or votes.shape[-3] == 0:
        raise ValueError(f"votes must be [..., N, T, A] with N > 0, got {votes.shape}")
    logits = Tensor(np.zeros(votes.shape[:-1], dtype=votes.dtype))
    lead = votes.shape[:-3]
    for it in range(iterations):
        couplings = ops.softmax(logits, axis=-1)
        weighted = ops.mul(ops.reshape(couplings, couplings.shape + (1,)), votes)
        poses = squash(ops.sum(weighted, axis=-3))
        if it + 1 < iterations:
            expanded = ops.reshape(poses, lead + (1,) + poses.shape[-2:])
            agreement = ops.sum(ops.mul(votes, expanded), axis=-1)
            logits = ops.add(logits, agreement)
    return poses, couplings


def capsule_votes(caps: Tensor, weight: Tensor, spec: ConvSpec) -> Tensor:
    """Per-position votes ``W u`` from every capsule in each receptive field.

    ``caps`` is ``[N, X, Y, Z, Tin, Ain]`` and ``weight`` is
    ``[k, k, k, Tin, Tout, Ain, Aout]``; the result is
    ``[N, X', Y', Z', k^3 * Tin, Tout, Aout]`` with the vote axis ordered
    (kernel offset, input type). Zero padding yields zero votes.
    """
    ud = caps.data
    n, *spatial, tin, ain = ud.shape
    kx, ky, kz, wtin, tout, wain, aout = weight.shape
    if (kx, ky, kz) != spec.kernel or (wtin, wain) != (tin, ain):
        raise ValueError(f"capsule weight {weight.shape} does not fit input {ud.shape}")
    pads = spec.padding_for(spatial)
    out_sp = spec.output_shape(spatial)
    up = np.pad(ud, [(0, 0), *pads, (0, 0), (0, 0)])
    taps = kx * ky * kz
    rows = n * int(np.prod(out_sp))
    # per tap: [Tin, Ain, Tout*Aout]
    wmat = weight.data.reshape(taps, tin, tout, ain, aout).transpose(0, 1, 3, 2, 4)
    wmat = wmat.reshape(taps, tin, ain, tout * aout)
    votes = np.empty((rows, taps, tin, tout * aout), dtype=np.result_type(ud, wmat))
    inputs = []
    for i, view in conv_windows(up, spec, out_sp):
        u = view.reshape(rows, tin, ain).transpose(1, 0, 2)  # [Tin, rows, Ain]
        inputs.append(u)
        votes[:, i] = np.matmul(u, wmat[i]).transpose(1, 0, 2)
    votes = votes.reshape(n, *out_sp, taps * tin, tout, aout)

    def bw(g):
        g = g.reshape(rows, taps, tin, tout * aout)
        gu = gw = None
        if weight.requires_grad:
            gw = np.empty_like(wmat)
            for i, u in enumerate(inputs):
                gw[i] = np.matmul(u.transpose(0, 2, 1), g[:, i].transpose(1, 0, 2))
            gw = gw.reshape(taps, tin, ain, tout, aout).transpose(0, 1, 3, 2, 4)
            gw = gw.reshape(weight.shape)
        if caps.requires_grad:
            gup = np.zeros(up.shape, dtype=g.dtype)
            wt = wmat.transpose(0, 1, 3, 2)
            pieces = (
                np.matmul(g[:, i].transpose(1, 0, 2), wt[i])
                .transpose(1, 0, 2)
                .reshape(n, *out_sp, tin, ain)
                for i in range(taps)
            )
            scatter_windows(gup, spec, out_sp, pieces)
            crop = tuple(slice(lo, lo + s) for (lo, _), s in zip(pads, spatial))
            gu = gup[(slice(None),) + crop]
        return gu, gw

    return make_result(votes, (caps, weight), bw, "capsule_votes")


def conv_capsule(
    caps: Tensor, weight: Tensor, spec: ConvSpec, iterations: int = 3,
    return_couplings: bool = False,
):
    """3D convolutional capsule layer.

    Transformation weights are shared across positions; routing runs
    independently at every output voxel. Accepts ``[X, Y, Z, T, A]`` or a
    batched ``[N, X, Y, Z, T, A]`` map and returns the same rank. With
    ``return_couplings`` the final couplings ``[..., k^3*Tin, Tout]`` are
    returned as well.
    """
    if iterations < 1:
        raise ValueError(f"routing needs at least one iteration, got {iterations}")
    if caps.ndim == 5:
        batched = False
        caps = ops.reshape(caps, (1,) + caps.shape)
    elif caps.ndim == 6:
        batched = True
    else:
        raise ValueError(f"capsule map must be rank 5 or 6, got {caps.shape}")
    if weight.ndim != 7:
        raise ValueError(f"capsule weight must be rank 7, got {weight.shape}")
    votes = capsule_votes(caps, weight, spec)
    poses, couplings = dynamic_routing(votes, iterations)
    if not batched:
        poses = ops.reshape(poses, poses.shape[1:])
        couplings = ops.reshape(couplings, couplings.shape[1:])
    return (poses, couplings) if return_couplings else poses
