"""Composite training objective: binary cross-entropy plus a distance-weighted
false-positive penalty.

For real residues ``i`` with labels ``y`` and probabilities ``p``::

    ce     = -(1/N) sum [y ln p + (1 - y) ln(1 - p)]
    struct =  (1/N) sum [y == 0] * p * d(i) / max(d)
    total  =  ce + lam * struct

``d(i)`` is the minimum heavy-atom distance from residue ``i`` to any binding
residue.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "EPS",
    "LossBreakdown",
    "DistanceField",
    "EmptyInstanceError",
    "DegenerateInstanceError",
    "ce_loss",
    "distance_field",
    "struct_loss",
    "struct_loss_hard",
    "total_loss",
]

EPS = 1e-7


class EmptyInstanceError(ValueError):
    """No real residues to average over."""


class DegenerateInstanceError(ValueError):
    """No binding residues, so the distance term is undefined."""


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    ce: float
    struct: float
    lam: float
    grad: np.ndarray | None = None


@dataclass(frozen=True)
class DistanceField:
    d3d: np.ndarray   # per real residue, Angstrom
    dmax: float


def _real(p, y, mask):
    p = np.asarray(p, dtype=float)
    y = np.asarray(y)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    m = np.ones(p.shape, dtype=bool) if mask is None else np.asarray(mask).astype(bool)
    n = int(m.sum())
    if n == 0:
        raise EmptyInstanceError("no real residues")
    return p, y.astype(float), m, n


def ce_loss(p, y, mask=None) -> float:
    p, y, m, n = _real(p, y, mask)
    pc = np.clip(p[m], EPS, 1.0 - EPS)
    yy = y[m]
    return float(-(yy * np.log(pc) + (1.0 - yy) * np.log(1.0 - pc)).sum() / n)


def distance_field(coords: Sequence[np.ndarray], y) -> DistanceField:
    """Distances from every residue to the nearest binding residue.

    ``coords`` holds one heavy-atom array per real residue and ``y`` the
    labels of those residues (unpadded).
    """
    y = np.asarray(y)[: len(coords)]
    pos = np.flatnonzero(y == 1)
    if pos.size == 0:
        raise DegenerateInstanceError("no binding residues")
    all_xyz = np.concatenate(coords)
    owner = np.concatenate([np.full(len(c), i) for i, c in enumerate(coords)])
    pos_xyz = np.concatenate([coords[j] for j in pos])
    d3d = np.empty(len(coords))
    # chunk over atoms to bound memory
    best = np.full(len(all_xyz), np.inf)
    for start in range(0, len(pos_xyz), 256):
        blk = pos_xyz[start:start + 256]
        diff = all_xyz[:, None, :] - blk[None, :, :]
        best = np.minimum(best, (diff ** 2).sum(axis=-1).min(axis=1))
    per_atom = np.sqrt(best)
    d3d[:] = np.inf
    np.minimum.at(d3d, owner, per_atom)
    d3d[pos] = 0.0
    return DistanceField(d3d, float(d3d.max()))


def _aligned_field(field: DistanceField, length: int) -> np.ndarray:
    d = np.zeros(length)
    d[: len(field.d3d)] = field.d3d
    return d


def struct_loss(p, y, field: DistanceField, mask=None) -> float:
    p, y, m, n = _real(p, y, mask)
    if field.dmax == 0:
        return 0.0
    w = _aligned_field(field, len(p)) / field.dmax
    neg = m & (y == 0)
    return float((p[neg] * w[neg]).sum() / n)


def struct_loss_hard(p, y, field: DistanceField, mask=None, threshold: float = 0.5) -> float:
    """False-positive variant: each predicted-positive negative contributes
    ``d(i) / r2`` where ``r2`` is the largest such distance among false
    positives.  Piecewise constant in ``p``, so it carries no gradient."""
    p, y, m, n = _real(p, y, mask)
    d = _aligned_field(field, len(p))
    fp = m & (y == 0) & (p >= threshold)
    if not fp.any():
        return 0.0
    r2 = d[fp].max()
    if r2 == 0:
        return 0.0
    return float((d[fp] / r2).sum() / n)


def total_loss(p, y, field: DistanceField | None, lam: float = 0.5, mask=None,
               mode: str = "composite") -> LossBreakdown:
    """Composite loss and its gradient with respect to ``p``.

    ``field=None`` (no binding residues) leaves only the cross-entropy term.
    ``mode`` is ``composite``, ``ce_only`` or ``hard``; the hard variant
    adds its value but no gradient.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    p, y, m, n = _real(p, y, mask)
    ce = ce_loss(p, y, m)
    raw = np.clip(p, EPS, 1.0 - EPS)
    inside = (p > EPS) & (p < 1.0 - EPS)
    grad = np.zeros_like(p)
    grad[m] = ((raw - y) / (raw * (1.0 - raw)))[m] * inside[m] / n

    if field is None:
        st = 0.0
    elif mode == "ce_only":
        # still reported, never weighted
        st = struct_loss(p, y, field, m)
    elif mode == "composite":
        st = struct_loss(p, y, field, m)
        if field.dmax > 0:
            w = _aligned_field(field, len(p)) / field.dmax
            neg = m & (y == 0)
            grad[neg] += lam * w[neg] / n
    elif mode == "hard":
        st = struct_loss_hard(p, y, field, m)
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    eff_lam = 0.0 if mode == "ce_only" else lam
    return LossBreakdown(ce + eff_lam * st, ce, st, eff_lam, grad)
