"""Forward model: Hartley lines, HB projections, pixel Radon transform, data synthesis.

Frequency and offset grids are centred: sample ``j`` of a length-``m`` line
sits at ``j - m // 2`` (offset, pixels) or ``(j - m // 2) / m`` (frequency,
cycles/pixel). The discrete Hartley transform is unitary on this grid, so a
pixel-domain projection ``P`` and its Hartley line ``hartley_1d(P)`` carry the
same noise law.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .hb_basis import BasisSpec, HBCoefficients, radial_matrix

__all__ = [
    "AnglePMF",
    "HBProjector",
    "ProjectionDataset",
    "DatasetFormatError",
    "calibrate_sigma",
    "freq_grid",
    "hartley_1d",
    "project_hb",
    "radon_pixel",
    "smooth_random_pmf",
    "synthesize_dataset",
]

_DATA_MAGIC = b"UVTD"
_DATA_VERSION = 1
_FLAG_FLIP = 1
_FLAG_ANGLES = 2


class DatasetFormatError(ValueError):
    """Malformed or version-mismatched dataset file."""


def freq_grid(m: int) -> np.ndarray:
    """Signed centred frequency grid ``(j - m // 2) / m``."""
    return (np.arange(m) - m // 2) / m


def hartley_1d(x: np.ndarray) -> np.ndarray:
    """Unitary centred discrete Hartley transform along the last axis.

    ``H(x) = Re F(x) - Im F(x)`` with ``F`` the unitary DFT whose origin is
    index ``m // 2`` in both domains. The transform is its own inverse.
    """
    x = np.asarray(x, dtype=float)
    m = x.shape[-1]
    f = np.fft.fftshift(np.fft.fft(np.fft.ifftshift(x, axes=-1), axis=-1), axes=-1)
    f /= np.sqrt(m)
    return f.real - f.imag


@dataclass(frozen=True)
class AnglePMF:
    """Probability vector over ``n`` equispaced bins on ``[0, period)``."""

    probs: np.ndarray
    period: float = 2 * np.pi

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("PMF must be a non-empty vector")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("PMF entries must be finite and nonnegative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"PMF sums to {p.sum():.12g}, not 1")
        object.__setattr__(self, "probs", p / p.sum())

    @property
    def n(self) -> int:
        return self.probs.size

    @property
    def bin_centers(self) -> np.ndarray:
        return self.period * np.arange(self.n) / self.n

    @classmethod
    def uniform(cls, n: int, period: float = 2 * np.pi) -> "AnglePMF":
        return cls(np.full(n, 1.0 / n), period)

    def rebin(self, n_out: int, period: float | None = None) -> "AnglePMF":
        """Redistribute mass onto ``n_out`` bins over ``[0, period)``.

        Each bin's mass is spread uniformly over its width; output bins
        collect the overlapping mass. With ``period`` equal to twice the
        input period the mass is split evenly between ``theta`` and
        ``theta + period / 2``.
        """
        period = self.period if period is None else period
        reps = period / self.period
        if abs(reps - round(reps)) > 1e-12 or round(reps) < 1:
            raise ValueError("output period must be a multiple of the input period")
        reps = int(round(reps))
        p = np.tile(self.probs, reps) / reps
        w_in = period / p.size
        w_out = period / n_out
        # circular CDF on input bin edges (shifted by half a bin)
        edges_in = (np.arange(p.size + 1) - 0.5) * w_in
        cdf = np.concatenate([[0.0], np.cumsum(p)])

        def mass_below(x):
            turns = np.floor((x + 0.5 * w_in) / period)
            xr = x - turns * period
            return turns + np.interp(xr, edges_in, cdf)

        lo = (np.arange(n_out) - 0.5) * w_out
        out = mass_below(lo + w_out) - mass_below(lo)
        out = np.clip(out, 0.0, None)
        return AnglePMF(out / out.sum(), period)

    def fold(self) -> "AnglePMF":
        """Wrap a ``[0, 2 pi)`` PMF with an even number of bins onto ``[0, pi)``."""
        if self.n % 2:
            raise ValueError("folding needs an even number of bins")
        h = self.n // 2
        return AnglePMF(self.probs[:h] + self.probs[h:], self.period / 2)


def smooth_random_pmf(n: int, seed: int = 0, period: float = np.pi, n_modes: int = 3,
                      contrast: float = 1.0) -> AnglePMF:
    """Smooth random PMF: exponential of a low-order random Fourier series."""
    rng = np.random.default_rng(seed)
    theta = 2 * np.pi * np.arange(n) / n
    log_p = np.zeros(n)
    for j in range(1, n_modes + 1):
        a, b = rng.normal(size=2) / j
        log_p += a * np.cos(j * theta) + b * np.sin(j * theta)
    log_p *= contrast / max(np.std(log_p), 1e-12) * 0.5
    p = np.exp(log_p)
    return AnglePMF(p / p.sum(), period)


class HBProjector:
    """Hartley-domain projection operator ``c -> H_theta c`` for one basis.

    Lines are sampled on :func:`freq_grid` and scaled by ``1/sqrt(m)`` so they
    coincide with ``hartley_1d`` of pixel-domain projections. Evaluation
    factors as a per-order radial sum followed by a ``cas`` mixing matrix,
    which costs O(|omega| m + N K m) for N angles and K orders.
    """

    def __init__(self, spec: BasisSpec, m: int | None = None):
        self.spec = spec
        self.m = spec.m if m is None else int(m)
        self.xi = freq_grid(self.m)
        self.orders = np.arange(-spec.k_max, spec.k_max + 1)
        # radial values with the sign of xi folded into the angle
        rad = radial_matrix(spec, self.xi) / np.sqrt(self.m)
        neg = self.xi < 0
        odd = (spec.ks % 2) != 0
        # J(|xi|) at theta + pi: cas(k(theta + pi)) = (-1)^k cas(k theta)
        rad[np.ix_(neg, odd)] *= -1
        self._rad = rad
        self._k_index = spec.ks + spec.k_max
        self._starts = np.searchsorted(spec.ks, self.orders)

    def radial_by_order(self, c: np.ndarray) -> np.ndarray:
        """``f[k, j] = sum_q c_{k,q} J^{k,q}(xi_j)``, shape ``[K, m]``."""
        return np.add.reduceat((self._rad * c[None, :]).T, self._starts, axis=0)

    def cas_matrix(self, thetas) -> np.ndarray:
        return np.cos(np.outer(thetas, self.orders)) + np.sin(np.outer(thetas, self.orders))

    def project(self, c, thetas) -> np.ndarray:
        """Hartley lines ``[len(thetas), m]``."""
        c = c.values if isinstance(c, HBCoefficients) else np.asarray(c)
        thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
        return self.cas_matrix(thetas) @ self.radial_by_order(c)

    def adjoint(self, lines: np.ndarray, thetas) -> np.ndarray:
        """Adjoint of :meth:`project`: ``[N, m]`` lines -> coefficient vector."""
        thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
        g = self.cas_matrix(thetas).T @ lines  # [K, m]
        return np.einsum("jw,wj->w", self._rad, g[self._k_index])

    def matrix(self, theta: float) -> np.ndarray:
        """Dense ``[m, |omega|]`` matrix of ``H_theta``."""
        casv = np.cos(self.spec.ks * theta) + np.sin(self.spec.ks * theta)
        return self._rad * casv[None, :]


def project_hb(c: HBCoefficients, theta, m: int | None = None) -> np.ndarray:
    """Hartley-domain projection of ``c`` at angle(s) ``theta``.

    Returns a length-``m`` line for a scalar angle, else ``[N, m]``.
    """
    proj = HBProjector(c.spec, m)
    out = proj.project(c, theta)
    return out[0] if np.ndim(theta) == 0 else out


def _radon_slice(image: np.ndarray, theta: float) -> np.ndarray:
    m = image.shape[0]
    t = np.arange(m) - m // 2
    w = t / m
    ex = np.exp(-2j * np.pi * np.outer(w * np.cos(theta), t))
    ey = np.exp(-2j * np.pi * np.outer(w * np.sin(theta), t))
    # 2D DTFT of the pixel image sampled along the central slice
    slice_ = np.sum((ey @ image) * ex, axis=1)
    return np.fft.fftshift(np.fft.ifft(np.fft.ifftshift(slice_))).real


def _ray_points(m: int, theta: float):
    t = np.arange(m) - m // 2
    T, Y = np.meshgrid(t, t, indexing="ij")
    x = T * np.cos(theta) - Y * np.sin(theta)
    y = T * np.sin(theta) + Y * np.cos(theta)
    return x, y


def _radon_linear(image: np.ndarray, theta: float) -> np.ndarray:
    m = image.shape[0]
    x, y = _ray_points(m, theta)
    c = m // 2
    vals = ndimage.map_coordinates(image, [y + c, x + c], order=1, mode="constant")
    return vals.sum(axis=1)


def _radon_sinc(image: np.ndarray, theta: float) -> np.ndarray:
    m = image.shape[0]
    t = np.arange(m) - m // 2
    x, y = _ray_points(m, theta)
    sx = np.sinc(x.ravel()[:, None] - t[None, :])
    sy = np.sinc(y.ravel()[:, None] - t[None, :])
    vals = np.einsum("pi,pi->p", sy, sx @ image.T)
    return vals.reshape(m, m).sum(axis=1)


_RADON_METHODS = {"slice": _radon_slice, "sinc": _radon_sinc, "linear": _radon_linear}


def radon_pixel(image: np.ndarray, theta: float, method: str = "slice") -> np.ndarray:
    """Parallel-beam line integrals of a pixel image at angle ``theta``.

    Sample ``j`` integrates along the line ``x cos(theta) + y sin(theta) = t_j``
    with ``t_j = j - m // 2`` (pixel units).

    Parameters
    ----------
    image : ndarray, shape (m, m)
    theta : float
    method : {"slice", "sinc", "linear"}
        ``"slice"`` integrates the band-limited (sinc) interpolant of the
        image exactly, via its Fourier transform along the central slice.
        ``"sinc"`` sums the same interpolant at unit steps along each ray.
        ``"linear"`` sums bilinear samples; cheap, but loses accuracy at
        oblique angles.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError("image must be square")
    try:
        fn = _RADON_METHODS[method]
    except KeyError:
        raise ValueError(f"unknown Radon method {method!r}") from None
    return fn(image, float(theta))


def calibrate_sigma(clean_lines: np.ndarray, target_snr: float) -> float:
    """Noise level giving ``Var(clean) / sigma^2 = target_snr``.

    The variance pools every sample of every clean (spatial-domain) line.
    An infinite SNR yields 0.
    """
    if not target_snr > 0:
        raise ValueError("target SNR must be positive")
    var = float(np.var(np.asarray(clean_lines, dtype=float)))
    if var == 0.0:
        raise ValueError("clean data has zero variance")
    if np.isinf(target_snr):
        return 0.0
    return float(np.sqrt(var / target_snr))


@dataclass
class ProjectionDataset:
    """Hartley-domain projection lines with noise level and metadata.

    If ``flip_augmented``, line ``2i + 1`` is the companion of line ``2i``
    at angle ``theta + pi``.
    """

    lines: np.ndarray
    sigma: float
    flip_augmented: bool = False
    true_angles: np.ndarray | None = field(default=None, repr=False)
    n_theta_fine: int = 0

    def __post_init__(self):
        self.lines = np.asarray(self.lines, dtype=float)
        if self.lines.ndim != 2:
            raise ValueError("lines must be a [L, m] array")
        if not np.all(np.isfinite(self.lines)):
            raise ValueError("lines must be finite")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.flip_augmented and self.L % 2:
            raise ValueError("flip-augmented datasets need an even line count")
        if self.true_angles is not None:
            self.true_angles = np.asarray(self.true_angles, dtype=float)
            if self.true_angles.shape != (self.L,):
                raise ValueError("need one true angle per line")

    @property
    def L(self) -> int:
        return self.lines.shape[0]

    @property
    def m(self) -> int:
        return self.lines.shape[1]

    def spatial_lines(self) -> np.ndarray:
        return hartley_1d(self.lines)

    def save(self, path) -> None:
        flags = (_FLAG_FLIP if self.flip_augmented else 0)
        if self.true_angles is not None:
            flags |= _FLAG_ANGLES
        flags |= (int(self.n_theta_fine) & 0xFFFF) << 16
        header = _DATA_MAGIC + struct.pack(
            "<IIIdI", _DATA_VERSION, self.m, self.L, float(self.sigma), flags
        )
        body = [np.ascontiguousarray(self.lines, dtype="<f8").tobytes()]
        if self.true_angles is not None:
            body.append(np.ascontiguousarray(self.true_angles, dtype="<f8").tobytes())
        _atomic_write(path, header + b"".join(body))

    @classmethod
    def load(cls, path) -> "ProjectionDataset":
        data = Path(path).read_bytes()
        hsize = 4 + struct.calcsize("<IIIdI")
        if len(data) < hsize or data[:4] != _DATA_MAGIC:
            raise DatasetFormatError(f"{path}: not a projection dataset")
        version, m, L, sigma, flags = struct.unpack("<IIIdI", data[4:hsize])
        if version != _DATA_VERSION:
            raise DatasetFormatError(f"{path}: unsupported dataset version {version}")
        n = m * L
        if len(data) != hsize + 8 * n + (8 * L if flags & _FLAG_ANGLES else 0):
            raise DatasetFormatError(f"{path}: truncated or oversized payload")
        lines = np.frombuffer(data, dtype="<f8", count=n, offset=hsize).reshape(L, m)
        angles = None
        if flags & _FLAG_ANGLES:
            angles = np.frombuffer(data, dtype="<f8", count=L, offset=hsize + 8 * n)
        return cls(
            lines.copy(),
            sigma,
            flip_augmented=bool(flags & _FLAG_FLIP),
            true_angles=None if angles is None else angles.copy(),
            n_theta_fine=flags >> 16,
        )

    def export_line_csv(self, index: int, path, domain: str = "hartley") -> None:
        """Write one line as ``offset,value`` rows (``domain`` hartley or spatial)."""
        line = self.lines[index]
        if domain == "spatial":
            line = hartley_1d(line)
        elif domain != "hartley":
            raise ValueError("domain must be 'hartley' or 'spatial'")
        grid = freq_grid(self.m) if domain == "hartley" else np.arange(self.m) - self.m // 2
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frequency" if domain == "hartley" else "offset", "value"])
            for g, v in zip(grid, line):
                w.writerow([repr(float(g)), repr(float(v))])


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def synthesize_dataset(c: HBCoefficients, p: AnglePMF, L: int, snr: float | None = None,
                       seed: int = 0, flip: bool = True) -> ProjectionDataset:
    """Draw ``L`` angles from ``p`` and emit (optionally noisy) Hartley lines.

    With ``flip`` each clean line is followed by its companion at
    ``theta + pi``, giving ``2L`` lines. Noise is calibrated on the
    un-augmented clean spatial lines and added independently to every
    Hartley sample; line ``i`` draws from its own stream keyed by
    ``(seed, i)``.
    """
    if not isinstance(p, AnglePMF):
        p = AnglePMF(np.asarray(p, dtype=float))
    if L < 1:
        raise ValueError("L must be >= 1")
    root = np.random.SeedSequence(seed)
    angle_rng = np.random.default_rng(root.spawn(1)[0])
    idx = angle_rng.choice(p.n, size=L, p=p.probs)
    theta = p.bin_centers[idx]
    proj = HBProjector(c.spec)
    clean = proj.project(c, theta)
    sigma = 0.0
    if snr is not None and not np.isinf(snr):
        sigma = calibrate_sigma(hartley_1d(clean), snr)
    if flip:
        theta = np.stack([theta, theta + np.pi], axis=1).ravel()
        clean = proj.project(c, theta)
    lines = clean.copy()
    if sigma > 0:
        for i in range(lines.shape[0]):
            rng = np.random.default_rng([seed, 1, i])
            lines[i] += sigma * rng.standard_normal(lines.shape[1])
    return ProjectionDataset(
        lines, sigma, flip_augmented=flip, true_angles=np.mod(theta, 2 * np.pi),
        n_theta_fine=p.n,
    )
