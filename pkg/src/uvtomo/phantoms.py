"""Synthetic test phantoms on the centred pixel grid."""

from __future__ import annotations

import numpy as np

from .hb_basis import BasisSpec, HBCoefficients, pixel_coords

__all__ = ["PHANTOM_KINDS", "expand_image", "make_phantom"]

PHANTOM_KINDS = ("shepp-like", "disks", "blobs")

# modified Shepp-Logan ellipses: value, a, b, x0, y0, angle (deg)
_SHEPP = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0),
]


def _supersampled_grid(m: int, factor: int):
    """Normalised coordinates of ``factor x factor`` subsamples per pixel."""
    sub = (np.arange(factor) + 0.5) / factor - 0.5
    t = np.arange(m) - m // 2
    fine = (t[:, None] + sub[None, :]).ravel() * (2.0 / m)
    y, x = np.meshgrid(fine, fine, indexing="ij")
    return x, y


def _bin(img: np.ndarray, m: int, factor: int) -> np.ndarray:
    return img.reshape(m, factor, m, factor).mean(axis=(1, 3))


def make_phantom(kind: str, m: int, seed: int = 0, radius: float = 0.85,
                 supersample: int = 4) -> np.ndarray:
    """Nonnegative phantom with peak 1, zero outside ``radius`` (unit-ball units).

    Parameters
    ----------
    kind : {"shepp-like", "disks", "blobs"}
    m : int
        Grid size.
    seed : int
        Seed for the random kinds; ``shepp-like`` ignores it.
    radius : float
        Support radius relative to the ball of radius ``m / 2`` pixels.
    """
    if kind not in PHANTOM_KINDS:
        raise ValueError(f"unknown phantom kind {kind!r}; choose from {PHANTOM_KINDS}")
    rng = np.random.default_rng(seed)
    x, y = _supersampled_grid(m, supersample)
    img = np.zeros_like(x)
    if kind == "shepp-like":
        for val, a, b, x0, y0, ang in _SHEPP:
            th = np.deg2rad(ang)
            xr = (x - x0) * np.cos(th) + (y - y0) * np.sin(th)
            yr = -(x - x0) * np.sin(th) + (y - y0) * np.cos(th)
            img += val * (((xr / (a * radius)) ** 2 + (yr / (b * radius)) ** 2) <= 1)
        img = np.clip(img, 0, None)
    elif kind == "disks":
        # one large off-centre disk plus smaller random ones, kept inside
        r0 = 0.45 * radius
        c0 = rng.uniform(-0.3, 0.3, size=2) * radius
        img += 0.5 * (np.hypot(x - c0[0], y - c0[1]) <= r0)
        for _ in range(5):
            rr = rng.uniform(0.08, 0.22) * radius
            dist = rng.uniform(0, radius - rr)
            ang = rng.uniform(0, 2 * np.pi)
            cx, cy = dist * np.cos(ang), dist * np.sin(ang)
            img += rng.uniform(0.3, 1.0) * (np.hypot(x - cx, y - cy) <= rr)
    else:
        for _ in range(8):
            w = rng.uniform(0.05, 0.18) * radius
            dist = rng.uniform(0, radius - 2.5 * w)
            ang = rng.uniform(0, 2 * np.pi)
            cx, cy = dist * np.cos(ang), dist * np.sin(ang)
            img += rng.uniform(0.3, 1.0) * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * w * w))
    img[np.hypot(x, y) > radius] = 0.0
    img = _bin(img, m, supersample)
    xp, yp = pixel_coords(m)
    img[np.hypot(xp, yp) * (2.0 / m) > 1.0] = 0.0
    return img / img.max()


def expand_image(image: np.ndarray, spec: BasisSpec, n_radial: int | None = None,
                 n_angular: int | None = None) -> HBCoefficients:
    """Orthogonal projection of a pixel image onto the HB basis.

    The image's Hartley transform (of its band-limited interpolant) is
    evaluated on a polar quadrature grid inside the disk ``xi <= s`` and
    integrated against each basis function. The HB functions are
    orthonormal there, so this is the best L2 approximation in span.
    """
    image = np.asarray(image, dtype=float)
    m = image.shape[0]
    k_max = spec.k_max
    if n_angular is None:
        n_angular = 4 * k_max + 16
    if n_radial is None:
        n_radial = int(2 * spec.roots.max() / np.pi) + 32
    nodes, weights = np.polynomial.legendre.leggauss(n_radial)
    xi = 0.5 * spec.s * (nodes + 1)
    wr = 0.5 * spec.s * weights * xi
    theta = 2 * np.pi * np.arange(n_angular) / n_angular
    wt = 2 * np.pi / n_angular

    t = np.arange(m) - m // 2
    # 2D DTFT on the polar grid, one angle at a time
    hart = np.empty((n_angular, n_radial))
    for j, th in enumerate(theta):
        ex = np.exp(-2j * np.pi * np.outer(xi * np.cos(th), t))
        ey = np.exp(-2j * np.pi * np.outer(xi * np.sin(th), t))
        f = np.sum((ey @ image) * ex, axis=1)
        hart[j] = f.real - f.imag

    from .hb_basis import radial_matrix

    rad = radial_matrix(spec, xi)  # [n_radial, |omega|]
    orders = np.arange(-k_max, k_max + 1)
    casm = np.cos(np.outer(theta, orders)) + np.sin(np.outer(theta, orders))
    proj = (casm.T * wt) @ hart  # [K, n_radial]
    vals = np.einsum("rw,wr->w", rad * wr[:, None], proj[spec.ks + k_max])
    return HBCoefficients(vals, spec)
