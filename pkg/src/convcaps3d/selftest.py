"""Quick oracle and invariant checks run by ``convcaps3d selftest``."""

from __future__ import annotations

import contextlib
from typing import Callable

import numpy as np

from . import capsule, loss, metrics
from .tensor import ConvSpec, Tensor, conv3d, grad_check, ops, upsample3d

CHECKS: dict[str, Callable[[], bool]] = {}


def check(name):
    def register(fn):
        CHECKS[name] = fn
        return fn
    return register


def _rng():
    return np.random.default_rng(1234)


def _linear_probe(rng, shape):
    return Tensor(rng.normal(size=shape))


@check("grad.conv3d")
def _grad_conv():
    rng = _rng()
    spec = ConvSpec(3, 2, 1)
    w = Tensor(rng.normal(size=(3, 3, 3, 2, 3)))
    b = Tensor(rng.normal(size=3))
    probe = _linear_probe(rng, (3, 3, 3, 3))
    x = Tensor(rng.normal(size=(5, 5, 5, 2)))
    return grad_check(lambda t: ops.sum(ops.mul(conv3d(t, w, b, spec), probe)), x, 1e-5) < 1e-4


@check("grad.upsample3d")
def _grad_upsample():
    rng = _rng()
    probe = _linear_probe(rng, (4, 6, 2, 2))
    x = Tensor(rng.normal(size=(2, 3, 1, 2)))
    return grad_check(lambda t: ops.sum(ops.mul(upsample3d(t), probe)), x, 1e-5) < 1e-4


@check("grad.squash")
def _grad_squash():
    rng = _rng()
    probe = _linear_probe(rng, (6, 4))
    x = Tensor(rng.normal(size=(6, 4)))
    return grad_check(lambda t: ops.sum(ops.mul(capsule.squash(t), probe)), x, 1e-6) < 1e-4


@check("grad.dynamic_routing")
def _grad_routing():
    rng = _rng()
    probe = _linear_probe(rng, (3, 4))
    votes = Tensor(rng.normal(size=(5, 3, 4)))
    f = lambda t: ops.sum(ops.mul(capsule.dynamic_routing(t, 3)[0], probe))  # noqa: E731
    return grad_check(f, votes, 1e-6) < 1e-4


@check("capsule.squash_range")
def _squash_range():
    rng = _rng()
    s = rng.normal(size=(200, 8)) * rng.uniform(0, 10, size=(200, 1))
    r = np.linalg.norm(s, axis=-1)
    out = np.linalg.norm(capsule.squash(Tensor(s)).data, axis=-1)
    return bool(np.all(out < 1) and np.allclose(out, r * r / (1 + r * r), atol=1e-12))


@check("capsule.coupling_rows_sum_to_one")
def _couplings():
    rng = _rng()
    votes = Tensor(rng.normal(size=(4, 27, 3, 5)))
    poses, c = capsule.dynamic_routing(votes, 3)
    norms = np.linalg.norm(poses.data, axis=-1)
    return bool(np.allclose(c.data.sum(-1), 1, atol=1e-6) and np.all(norms < 1 - 1e-9))


@check("capsule.rotation_equivariance")
def _rotation():
    rng = _rng()
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    votes = rng.normal(size=(12, 3, 5))
    p1, c1 = capsule.dynamic_routing(Tensor(votes), 3)
    p2, c2 = capsule.dynamic_routing(Tensor(votes @ q), 3)
    return bool(np.allclose(p1.data @ q, p2.data, atol=1e-6)
                and np.allclose(c1.data, c2.data, atol=1e-6))


@check("loss.margin_oracle")
def _margin():
    rng = _rng()
    y = rng.uniform(0, 1, size=(3, 3, 3, 4))
    t = np.eye(4)[rng.integers(0, 4, size=(3, 3, 3))]
    ref = (t * np.maximum(0, 0.9 - y) ** 2 + 0.5 * (1 - t) * np.maximum(0, y - 0.1) ** 2).mean()
    return abs(loss.margin_loss(Tensor(y), t).item() - ref) < 1e-9


@check("loss.weighted_ce_oracle")
def _ce():
    rng = _rng()
    logits = rng.normal(size=(4, 4, 4, 3))
    p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    lab = rng.integers(0, 3, size=(4, 4, 4))
    w = np.array([2.0, 1.0, 0.5])
    ref = -np.mean(w[lab] * np.log(np.take_along_axis(p, lab[..., None], -1)[..., 0]))
    return abs(loss.weighted_ce(Tensor(p), lab, w).item() - ref) < 1e-9


@check("loss.masked_mse_oracle")
def _mse():
    rng = _rng()
    r, x = rng.normal(size=(2, 4, 4, 4, 2))
    lab = rng.integers(0, 3, size=(4, 4, 4))
    m = lab > 0
    ref = ((r - x) ** 2)[m].mean()
    return abs(loss.masked_mse(Tensor(r), x, lab).item() - ref) < 1e-9


@check("metrics.dsc_asd_oracle")
def _metrics():
    t = np.zeros((8, 8, 8), dtype=np.uint8)
    p = np.zeros_like(t)
    t[0, 0, 0], p[3, 4, 0] = 1, 1
    a = np.zeros(10, dtype=np.uint8)
    b = np.zeros(10, dtype=np.uint8)
    a[:4] = 1
    b[1:7] = 1
    return (metrics.asd(t, p, 1) == 5.0
            and metrics.dsc(a.reshape(10, 1, 1), b.reshape(10, 1, 1), 1) == 0.6)


@contextlib.contextmanager
def sabotage(target: str | None):
    """Deliberately break one primitive to prove the harness catches it."""
    if target is None:
        yield
        return
    if target != "squash":
        raise ValueError(f"unknown sabotage target {target!r}")
    original = capsule.squash
    capsule.squash = lambda s: ops.mul(s, 1.5)
    try:
        yield
    finally:
        capsule.squash = original


def run(target: str | None = None) -> list[tuple[str, bool, str]]:
    results = []
    with sabotage(target):
        for name, fn in CHECKS.items():
            try:
                ok, msg = bool(fn()), ""
            except Exception as exc:  # a crash is a failure of that check
                ok, msg = False, f"{type(exc).__name__}: {exc}"
            results.append((name, ok, msg))
    return results
