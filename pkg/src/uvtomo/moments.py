"""Helgason-Ludwig moment consistency.

Coordinates are normalised so the image ball has radius 1: pixel offset
``t`` (pixels) maps to ``2 t / m``. Image moments use midpoint quadrature
with cell area ``(2/m)^2``; projection moments rescale line integrals by
``2/m`` and sum with step ``2/m``.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .hb_basis import pixel_coords

__all__ = [
    "HLReport",
    "MomentSet",
    "geometric_moments",
    "hl_check",
    "hl_polynomial",
    "identifiability_det",
    "offset_grid",
    "pi_distinct",
    "projection_moment",
    "uas",
]


@dataclass(frozen=True)
class MomentSet:
    """Geometric moments ``v[(i, k)] = int x^i y^k f`` for ``i + k <= d_max``."""

    v: dict
    d_max: int

    def __getitem__(self, ik):
        return self.v[ik]

    @classmethod
    def from_values(cls, **kw) -> "MomentSet":
        """Build from keywords such as ``v10=1.0, v01=0.5`` (single digits)."""
        v = {(int(name[1]), int(name[2])): float(val) for name, val in kw.items()}
        d = max((i + k for i, k in v), default=0)
        for i in range(d + 1):
            for k in range(d + 1 - i):
                v.setdefault((i, k), 0.0)
        return cls(v, d)


def offset_grid(m: int) -> np.ndarray:
    """Normalised signed offsets of the ``m`` line samples."""
    return (np.arange(m) - m // 2) * (2.0 / m)


def geometric_moments(image: np.ndarray, d_max: int) -> MomentSet:
    image = np.asarray(image, dtype=float)
    m = image.shape[0]
    x, y = pixel_coords(m)
    h = 2.0 / m
    x, y = x * h, y * h
    w = image * h * h
    v = {}
    for i in range(d_max + 1):
        for k in range(d_max + 1 - i):
            v[(i, k)] = float(np.sum(x**i * y**k * w))
    return MomentSet(v, d_max)


def projection_moment(line: np.ndarray, d: int) -> float:
    """``mu_d = sum_n t_n^d P(t_n) dt`` for a spatial line in pixel units."""
    line = np.asarray(line, dtype=float)
    m = line.shape[-1]
    h = 2.0 / m
    t = offset_grid(m)
    return np.sum(t**d * line * h, axis=-1) * h


def hl_polynomial(v: MomentSet, d: int, theta):
    """``Q_d(theta) = sum_r C(d, r) v_{r, d-r} cos^r sin^(d-r)``."""
    theta = np.asarray(theta, dtype=float)
    ct, st = np.cos(theta), np.sin(theta)
    return sum(comb(d, r) * v[(r, d - r)] * ct**r * st ** (d - r) for r in range(d + 1))


def _scale(v: MomentSet, d: int) -> float:
    return sum(comb(d, r) * abs(v[(r, d - r)]) for r in range(d + 1))


@dataclass
class HLReport:
    deviations: np.ndarray
    relative: np.ndarray
    tol: float

    @property
    def passed(self) -> np.ndarray:
        return self.relative <= self.tol

    @property
    def ok(self) -> bool:
        return bool(np.all(self.passed))

    def rows(self):
        for d, (dev, ok) in enumerate(zip(self.relative, self.passed)):
            yield d, float(dev), self.tol, bool(ok)


def hl_check(image, lines, angles, d_max: int = 2, tol: float = 1e-3) -> HLReport:
    """Compare ``Q_d(theta)`` with ``mu_d(theta)`` for ``d = 0..d_max``.

    ``relative[d]`` divides the worst absolute deviation by the moment
    scale ``sum_r C(d, r) |v_{r, d-r}|``, which bounds ``|Q_d|``. A zero
    scale leaves the deviation unscaled.
    """
    v = geometric_moments(image, d_max)
    lines = np.atleast_2d(np.asarray(lines, dtype=float))
    angles = np.asarray(angles, dtype=float)
    dev = np.zeros(d_max + 1)
    rel = np.zeros(d_max + 1)
    for d in range(d_max + 1):
        mu = projection_moment(lines, d)
        q = hl_polynomial(v, d, angles)
        dev[d] = float(np.max(np.abs(q - mu))) if mu.size else 0.0
        s = _scale(v, d)
        rel[d] = dev[d] / s if s > 0 else dev[d]
    return HLReport(dev, rel, tol)


def identifiability_det(v: MomentSet) -> float:
    a = np.array(
        [
            [v[(1, 0)] ** 2, v[(2, 0)], 1.0],
            [2 * v[(1, 0)] * v[(0, 1)], v[(1, 1)], 0.0],
            [v[(0, 1)] ** 2, v[(0, 2)], 1.0],
        ]
    )
    return float(np.linalg.det(a))


def uas(v: MomentSet) -> tuple[float, float]:
    """Unidentifiable angle pair, both in ``[0, 2 pi)`` and sorted."""
    c1 = 0.5 * (v[(1, 0)] - 1j * v[(0, 1)])
    if c1 == 0:
        raise ValueError("c1 = 0: unidentifiable angle set undefined")
    root = np.sqrt(-np.conj(c1) / c1)
    a = np.mod(np.angle(root), 2 * np.pi)
    b = np.mod(np.angle(-root), 2 * np.pi)
    return tuple(sorted((float(a), float(b))))


def pi_distinct(lines, mass_tol: float = 1e-6) -> np.ndarray:
    """Indices of lines with positive first moment.

    Of the two projections at ``theta`` and ``theta + pi`` exactly one has
    ``mu_1 > 0`` unless ``mu_1 = 0``; lines with ``|mu_1| < mass_tol * mass``
    are dropped as ambiguous.
    """
    lines = np.atleast_2d(np.asarray(lines, dtype=float))
    mu0 = projection_moment(lines, 0)
    mu1 = projection_moment(lines, 1)
    keep = mu1 > mass_tol * np.abs(mu0)
    return np.flatnonzero(keep)
