"""Independent reference implementations used by the tests.

Written with plain loops, Python sets and direct formulas so they share no
code with the package under test.
"""

import math

import numpy as np

NEIGHBOURS = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def voxel_set(labels, cls):
    return {tuple(int(i) for i in idx) for idx in zip(*np.nonzero(np.asarray(labels) == cls))}


def dsc(truth, pred, cls):
    t, p = voxel_set(truth, cls), voxel_set(pred, cls)
    if not t and not p:
        return 1.0
    return 2.0 * len(t & p) / (len(t) + len(p))


def precision_recall(truth, pred, cls):
    t, p = voxel_set(truth, cls), voxel_set(pred, cls)
    both = float(not t and not p)
    precision = len(t & p) / len(p) if p else both
    recall = len(t & p) / len(t) if t else both
    return precision, recall


def surface(labels, cls):
    shape = np.asarray(labels).shape
    region = voxel_set(labels, cls)
    out = set()
    for v in region:
        for d in NEIGHBOURS:
            n = tuple(v[a] + d[a] for a in range(3))
            inside = all(0 <= n[a] < shape[a] for a in range(3))
            if not inside or n not in region:
                out.add(v)
                break
    return out


def asd(truth, pred, cls, spacing=(1.0, 1.0, 1.0)):
    st, sp = sorted(surface(truth, cls)), sorted(surface(pred, cls))
    if not st or not sp:
        return None
    # full distance matrix over every surface pair
    a = np.asarray(st, dtype=np.float64) * spacing
    b = np.asarray(sp, dtype=np.float64) * spacing
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))

    # pred-to-truth and truth-to-pred nearest distances, averaged per direction
    return 0.5 * (d.min(axis=0).mean() + d.min(axis=1).mean())


def margin_loss(y, t):
    total = 0.0
    for yv, tv in zip(np.ravel(y), np.ravel(t)):
        total += tv * max(0.0, 0.9 - yv) ** 2 + 0.5 * (1 - tv) * max(0.0, yv - 0.1) ** 2
    return total / np.size(y)


def weighted_ce(p, labels, weights):
    p = np.asarray(p)
    flat = p.reshape(-1, p.shape[-1])
    total = 0.0
    for row, lab in zip(flat, np.ravel(labels)):
        total -= weights[lab] * math.log(max(row[lab], 1e-7))
    return total / len(flat)


def masked_mse(recon, x, labels):
    recon, x = np.asarray(recon), np.asarray(x)
    total, count = 0.0, 0
    for idx in np.ndindex(*np.shape(labels)):
        if labels[idx] > 0:
            for m in range(recon.shape[-1]):
                total += (recon[idx][m] - x[idx][m]) ** 2
                count += 1
    return total / count if count else 0.0


def routing(u, iterations):
    """Routing for a single position with votes ``u[N, T, A]``."""
    n, t, _ = u.shape
    b = np.zeros((n, t))
    for it in range(iterations):
        c = np.exp(b) / np.exp(b).sum(axis=1, keepdims=True)
        s = np.einsum("nt,nta->ta", c, u)
        r = np.linalg.norm(s, axis=-1, keepdims=True)
        v = s * r / (1 + r * r)
        if it + 1 < iterations:
            b = b + np.einsum("nta,ta->nt", u, v)
    return v, c
