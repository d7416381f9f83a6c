"""Truncated Hartley-Bessel basis.

The Hartley transform of an image bandlimited to ``s`` cycles/pixel and
concentrated within ``R`` pixels is expanded as

    H(I)(xi, theta) = sum_{k,q} c_{k,q} J_s^{k,q}(xi) cas(k theta)

with radial functions ``J_s^{k,q}(xi) = N_{k,q} J_k(R_{k,q} xi / s)`` on
``xi <= s`` and zero outside. Only pairs with ``R_{|k|,q} <= 2 pi s R`` are
kept.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import optimize, special

__all__ = [
    "BasisConfigError",
    "BesselRootTable",
    "BasisSpec",
    "HBCoefficients",
    "bessel_j",
    "bessel_roots",
    "build_basis_spec",
    "cas",
    "eval_radial",
    "radial_matrix",
    "render_spatial",
    "render_matrix",
    "render_adjoint",
    "pixel_coords",
]

_ROOT_TOL = 1e-12
_TABLE_MAGIC = b"UVTB"
_TABLE_VERSION = 1
_SINGULAR_EPS = 1e-8


class BasisConfigError(ValueError):
    """Raised for basis parameters that give an empty or invalid index set."""


def bessel_j(k, x):
    """Bessel function of the first kind J_k(x), integer ``k >= 0``.

    Vectorised over ``x``. Negative orders are handled by callers through
    ``J_{-k} = (-1)^k J_k``.
    """
    if np.any(np.asarray(k) < 0):
        raise ValueError("order must be nonnegative")
    return special.jv(k, x)


def _signed_bessel(k, x):
    """J_k(x) for any integer k."""
    kk = np.abs(k)
    sign = np.where((np.asarray(k) < 0) & (kk % 2 == 1), -1.0, 1.0)
    return sign * special.jv(kk, x)


def _refine_root(k, a, b):
    root = optimize.brentq(lambda x: special.jv(k, x), a, b, xtol=1e-14, rtol=1e-15, maxiter=200)
    # two Newton polishing steps; J_k' = (J_{k-1} - J_{k+1}) / 2
    for _ in range(2):
        f = special.jv(k, root)
        if abs(f) < 1e-15:
            break
        df = 0.5 * (special.jv(k - 1, root) - special.jv(k + 1, root))
        step = f / df
        if abs(step) > 1e-6:
            break
        root -= step
    return root


def _mcmahon(k, q):
    """McMahon's large-root asymptotic for the q-th zero of J_k."""
    mu = 4.0 * k * k
    beta = (q + 0.5 * k - 0.25) * np.pi
    return beta - (mu - 1) / (8 * beta) - 4 * (mu - 1) * (7 * mu - 31) / (3 * (8 * beta) ** 3)


def bessel_roots(k: int, q_max: int) -> np.ndarray:
    """First ``q_max`` positive roots of J_k.

    Roots are bracketed by a sign-change scan seeded from McMahon's
    asymptotic (zeros of J_k are more than pi apart and the first exceeds
    k), then refined with Brent's method plus Newton polishing.
    """
    k = abs(int(k))
    if q_max < 1:
        raise ValueError("q_max must be >= 1")
    lo = max(float(k), 1e-3)
    hi = max(_mcmahon(k, q_max), lo) + 2 * np.pi
    for _ in range(8):
        x = np.arange(lo, hi + 0.5, 0.5)
        f = special.jv(k, x)
        brackets = np.flatnonzero(np.sign(f[:-1]) * np.sign(f[1:]) < 0)
        if brackets.size >= q_max:
            break
        hi += np.pi * (q_max - brackets.size + 2)
    else:
        raise RuntimeError(f"failed to bracket {q_max} roots of J_{k}")
    out = np.array([_refine_root(k, x[i], x[i + 1]) for i in brackets[:q_max]])
    if np.any(np.abs(special.jv(k, out)) > _ROOT_TOL):
        raise RuntimeError(f"root refinement of J_{k} did not converge")
    return out


def _roots_below(k: int, xmax: float, extra: int = 0) -> np.ndarray:
    """All positive roots of J_k that are <= xmax, plus ``extra`` beyond it."""
    n = max(1, int((xmax - 0.5 * k) / np.pi) + 2)
    while True:
        roots = bessel_roots(k, n + extra)
        below = int(np.sum(roots <= xmax))
        if below < n:
            return roots[: below + extra]
        n *= 2


@dataclass(frozen=True)
class BesselRootTable:
    """First ``q_max`` roots of J_k for k = 0..k_max, padded with NaN."""

    roots: np.ndarray

    @property
    def k_max(self) -> int:
        return self.roots.shape[0] - 1

    @property
    def q_max(self) -> int:
        return self.roots.shape[1]

    def norms(self, s: float) -> np.ndarray:
        """Normalisation factors N_{k,q} = 1 / (s sqrt(pi) |J_{k+1}(R_{k,q})|)."""
        ks = np.arange(self.k_max + 1)[:, None]
        with np.errstate(invalid="ignore"):
            return 1.0 / (s * np.sqrt(np.pi) * np.abs(special.jv(ks + 1, self.roots)))

    @classmethod
    def compute(cls, xmax: float) -> "BesselRootTable":
        """Tabulate every root <= xmax plus the first root above it, per order.

        The extra root (and the extra final order whose first root already
        exceeds xmax) lets a cached table prove it covers a cut-off.
        """
        rows = []
        k = 0
        while True:
            r = _roots_below(k, xmax, extra=1)
            rows.append(r)
            if r.size == 1:
                break
            k += 1
        q_max = max(r.size for r in rows)
        table = np.full((len(rows), q_max), np.nan)
        for i, r in enumerate(rows):
            table[i, : r.size] = r
        return cls(table)

    def covers(self, xmax: float) -> bool:
        r = self.roots
        if r.size == 0:
            return False
        last = np.array([row[~np.isnan(row)][-1] for row in r])
        return bool(np.all(last > xmax) and r[-1, 0] > xmax)

    def below(self, xmax: float) -> "BesselRootTable":
        """Sub-table of roots <= xmax (orders without such roots dropped)."""
        r = np.where(self.roots <= xmax, self.roots, np.nan)
        r = r[~np.isnan(r[:, 0])]
        q = int(np.max(np.sum(~np.isnan(r), axis=1))) if r.size else 0
        return BesselRootTable(r[:, :q].copy())

    def save(self, path) -> None:
        header = _TABLE_MAGIC + struct.pack("<III", _TABLE_VERSION, self.k_max, self.q_max)
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(self.roots, dtype="<f8").tobytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "BesselRootTable":
        data = Path(path).read_bytes()
        if data[:4] != _TABLE_MAGIC:
            raise ValueError(f"{path}: not a Bessel root table")
        version, k_max, q_max = struct.unpack("<III", data[4:16])
        if version != _TABLE_VERSION:
            raise ValueError(f"{path}: unsupported table version {version}")
        roots = np.frombuffer(data[16:], dtype="<f8").reshape(k_max + 1, q_max)
        return cls(roots.copy())


@lru_cache(maxsize=32)
def _root_table(xmax: float) -> BesselRootTable:
    """Roots <= xmax, read from / written to $UVTOMO_CACHE when set."""
    cache = os.environ.get("UVTOMO_CACHE")
    table = None
    if cache and Path(cache).exists():
        try:
            loaded = BesselRootTable.load(cache)
            if loaded.covers(xmax):
                table = loaded
        except (ValueError, OSError):
            table = None
    if table is None:
        table = BesselRootTable.compute(xmax)
        if cache:
            try:
                table.save(cache)
            except OSError:
                pass
    return table.below(xmax)


@dataclass(frozen=True)
class BasisSpec:
    """Truncated HB index set for bandlimit ``s`` and radius ``R`` (pixels).

    ``omega`` is ordered by k ascending from -k_max to k_max, then q
    ascending; coefficient vectors everywhere use this ordering.
    """

    s: float
    R: float
    m: int
    ks: np.ndarray = field(repr=False)
    qs: np.ndarray = field(repr=False)
    roots: np.ndarray = field(repr=False)
    norms: np.ndarray = field(repr=False)
    p_k: np.ndarray = field(repr=False)

    @property
    def k_max(self) -> int:
        return len(self.p_k) - 1

    @property
    def size(self) -> int:
        return self.ks.size

    @property
    def omega(self) -> list[tuple[int, int]]:
        return list(zip(self.ks.tolist(), self.qs.tolist()))

    def index(self, k: int, q: int) -> int:
        hit = np.flatnonzero((self.ks == k) & (self.qs == q))
        if hit.size == 0:
            raise KeyError((k, q))
        return int(hit[0])

    def zeros(self) -> "HBCoefficients":
        return HBCoefficients(np.zeros(self.size), self)


def build_basis_spec(s: float, R: float, m: int) -> BasisSpec:
    """Index set of all (k, q) with R_{|k|,q} <= 2 pi s R."""
    if not 0 < s <= 0.5:
        raise BasisConfigError(f"bandlimit s={s} outside (0, 0.5]")
    if not 0 < R <= m / 2:
        raise BasisConfigError(f"radius R={R} outside (0, m/2]")
    xmax = 2 * np.pi * s * R
    table = _root_table(round(float(xmax), 12))
    if table.k_max < 0 or table.roots.size == 0:
        raise BasisConfigError(
            f"empty basis: 2*pi*s*R = {xmax:.4g} is below the first root of J_0"
        )
    norms = table.norms(s)
    p_k = np.sum(~np.isnan(table.roots), axis=1)
    ks, qs, rts, nms = [], [], [], []
    k_max = table.k_max
    for k in range(-k_max, k_max + 1):
        n = p_k[abs(k)]
        ks.extend([k] * n)
        qs.extend(range(1, n + 1))
        rts.extend(table.roots[abs(k), :n])
        nms.extend(norms[abs(k), :n])
    return BasisSpec(
        s=float(s),
        R=float(R),
        m=int(m),
        ks=np.asarray(ks, dtype=int),
        qs=np.asarray(qs, dtype=int),
        roots=np.asarray(rts),
        norms=np.asarray(nms),
        p_k=p_k,
    )


@dataclass
class HBCoefficients:
    """Real HB expansion coefficients ordered per ``spec.omega``."""

    values: np.ndarray
    spec: BasisSpec

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != (self.spec.size,):
            raise ValueError(
                f"expected {self.spec.size} coefficients, got shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("coefficients must be finite")


def cas(x):
    return np.cos(x) + np.sin(x)


def eval_radial(spec: BasisSpec, k: int, q: int, xi):
    """J_s^{k,q}(xi); identically zero for xi > s."""
    i = spec.index(k, q)
    xi = np.asarray(xi, dtype=float)
    val = spec.norms[i] * _signed_bessel(k, spec.roots[i] * xi / spec.s)
    return np.where(xi <= spec.s, val, 0.0)


def radial_matrix(spec: BasisSpec, xi) -> np.ndarray:
    """Matrix ``[len(xi), |omega|]`` of radial functions at |xi|."""
    xi = np.abs(np.asarray(xi, dtype=float))
    arg = spec.roots[None, :] * xi[:, None] / spec.s
    val = spec.norms[None, :] * _signed_bessel(spec.ks[None, :], arg)
    return np.where(xi[:, None] <= spec.s, val, 0.0)


def pixel_coords(m: int):
    """Pixel-centre coordinates (x, y) in pixel units, origin at index m // 2.

    Array axis 0 is y, axis 1 is x.
    """
    c = m // 2
    t = np.arange(m) - c
    y, x = np.meshgrid(t, t, indexing="ij")
    return x.astype(float), y.astype(float)


def _spatial_factors(spec: BasisSpec, m: int):
    """Per-pixel quantities shared by rendering and its adjoint."""
    x, y = pixel_coords(m)
    r = np.hypot(x, y).ravel()
    phi = np.arctan2(y, x).ravel()
    inside = r <= m / 2
    a = 2 * np.pi * spec.s * r
    return r, phi, inside, a


def _basis_block(spec: BasisSpec, k: int, sel: np.ndarray, a: np.ndarray, phi: np.ndarray):
    """Spatial (inverse Hartley) basis functions for one angular order k.

    H(u^{k,q})(r, phi) = 2 sqrt(2 pi) s (-1)^(q+l) R J_k(a) / (a^2 - R^2)
                         * cos(k phi - pi/4),   a = 2 pi s r,  l = floor(|k|/2)
    """
    R = spec.roots[sel]
    q = spec.qs[sel]
    l = abs(k) // 2
    sign = np.where((q + l) % 2 == 0, 1.0, -1.0)
    # pixel radii repeat (r^2 is an integer), so evaluate J_k once per radius
    ua, inv = np.unique(a, return_inverse=True)
    jk = _signed_bessel(k, ua)[inv.ravel()][:, None]
    den = a[:, None] ** 2 - R[None, :] ** 2
    singular = np.abs(den) < _SINGULAR_EPS
    ratio = jk / np.where(singular, 1.0, den)
    if np.any(singular):
        # removable singularity: J_k(a) / (a^2 - R^2) -> J_k'(R) / (2R)
        kk = abs(k)
        dj = 0.5 * (special.jv(kk - 1, R) - special.jv(kk + 1, R))
        if k < 0 and kk % 2 == 1:
            dj = -dj
        ratio = np.where(singular, (dj / (2 * R))[None, :], ratio)
    amp = 2 * np.sqrt(2 * np.pi) * spec.s * sign * R
    ang = np.cos(k * phi - np.pi / 4)[:, None]
    return ratio * amp[None, :] * ang


def render_matrix(spec: BasisSpec, m: int | None = None) -> np.ndarray:
    """Dense ``[m*m, |omega|]`` matrix mapping coefficients to pixels."""
    m = spec.m if m is None else m
    r, phi, inside, a = _spatial_factors(spec, m)
    out = np.zeros((m * m, spec.size))
    idx = np.flatnonzero(inside)
    for k in range(-spec.k_max, spec.k_max + 1):
        sel = np.flatnonzero(spec.ks == k)
        out[np.ix_(idx, sel)] = _basis_block(spec, k, sel, a[idx], phi[idx])
    return out


def render_spatial(c, m: int | None = None) -> np.ndarray:
    """Render HB coefficients on the m x m pixel grid; zero outside the ball."""
    spec = c.spec
    values = c.values
    m = spec.m if m is None else m
    r, phi, inside, a = _spatial_factors(spec, m)
    idx = np.flatnonzero(inside)
    img = np.zeros(m * m, dtype=np.result_type(values, float))
    for k in range(-spec.k_max, spec.k_max + 1):
        sel = np.flatnonzero(spec.ks == k)
        if not np.any(values[sel]):
            continue
        img[idx] += _basis_block(spec, k, sel, a[idx], phi[idx]) @ values[sel]
    return img.reshape(m, m)


def render_adjoint(spec: BasisSpec, image: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`render_spatial`: pixels -> coefficient space."""
    m = image.shape[0]
    r, phi, inside, a = _spatial_factors(spec, m)
    idx = np.flatnonzero(inside)
    flat = image.ravel()[idx]
    out = np.zeros(spec.size)
    for k in range(-spec.k_max, spec.k_max + 1):
        sel = np.flatnonzero(spec.ks == k)
        out[sel] = flat @ _basis_block(spec, k, sel, a[idx], phi[idx])
    return out
