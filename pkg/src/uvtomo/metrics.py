"""Reconstruction quality metrics and O(2) alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .hb_basis import pixel_coords

__all__ = [
    "AlignmentResult",
    "align_o2",
    "cc",
    "d_tv",
    "psnr",
    "recovery_scores",
    "rotate_image",
    "transform_pmf",
]

PSNR_CAP = 200.0


def psnr(img, ref, peak: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; ``peak`` defaults to ``max(ref)``."""
    img = np.asarray(img, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if img.shape != ref.shape:
        raise ValueError(f"shape mismatch {img.shape} vs {ref.shape}")
    if not np.any(ref):
        raise ValueError("reference image is identically zero")
    peak = float(np.max(ref)) if peak is None else float(peak)
    mse = float(np.mean((img - ref) ** 2))
    if mse < peak**2 * 1e-20:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * np.log10(peak**2 / mse))


def cc(img, ref) -> float:
    """Pearson correlation of the flattened images."""
    a = np.asarray(img, dtype=float).ravel()
    b = np.asarray(ref, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("correlation undefined for a constant image")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def d_tv(p, q) -> float:
    """Total-variation distance ``0.5 * ||p - q||_1``."""
    p = np.asarray(getattr(p, "probs", p), dtype=float)
    q = np.asarray(getattr(q, "probs", q), dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"PMF length mismatch {p.shape} vs {q.shape}")
    return float(0.5 * np.abs(p - q).sum())


def rotate_image(img: np.ndarray, alpha: float, reflect: bool = False) -> np.ndarray:
    """Apply ``x -> R_alpha G x`` to the image: ``out(x) = img(G R_{-alpha} x)``.

    ``G`` is the reflection ``(x, y) -> (x, -y)`` when ``reflect`` is set.
    Bilinear interpolation about the grid centre; zero outside the ball.
    """
    m = img.shape[0]
    x, y = pixel_coords(m)
    ca, sa = np.cos(alpha), np.sin(alpha)
    xs = ca * x + sa * y
    ys = -sa * x + ca * y
    if reflect:
        ys = -ys
    c = m // 2
    out = ndimage.map_coordinates(np.asarray(img, dtype=float), [ys + c, xs + c],
                                  order=1, mode="constant", cval=0.0)
    out[np.hypot(x, y) > m / 2] = 0.0
    return out


def transform_pmf(pmf: np.ndarray, shift: float, reflect: bool) -> np.ndarray:
    """PMF induced by the image transform ``R_alpha G``.

    ``shift`` is ``alpha`` in units of PMF bins. A rotation shifts mass to
    ``theta + alpha`` and a reflection maps ``theta -> -theta``. Fractional
    shifts are linearly interpolated on the circle.
    """
    p = np.asarray(pmf, dtype=float)
    n = p.size
    if reflect:
        p = p[(-np.arange(n)) % n]
    lo = int(np.floor(shift))
    frac = shift - lo
    out = (1 - frac) * np.roll(p, lo) + frac * np.roll(p, lo + 1)
    return out / out.sum()


@dataclass
class AlignmentResult:
    rotation_index: int
    reflected: bool
    cc: float
    aligned_image: np.ndarray
    aligned_pmf: np.ndarray | None = None


def align_o2(img, ref, pmf=None, n_rot: int = 240, tie_tol: float = 1e-12) -> AlignmentResult:
    """Best rotation/reflection of ``img`` onto ``ref`` by grid search.

    Candidates are ``R_{2 pi k / n_rot} G^e`` for ``e`` in {0, 1}; the image
    with the highest correlation wins, ties going to the smaller ``k`` and to
    the unreflected candidate. Scores within ``tie_tol`` count as ties. The
    same transform is applied to ``pmf``.
    """
    if n_rot < 1:
        raise ValueError("n_rot must be >= 1")
    img = np.asarray(img, dtype=float)
    ref = np.asarray(ref, dtype=float)
    best = None
    for reflect in (False, True):
        for k in range(n_rot):
            cand = rotate_image(img, 2 * np.pi * k / n_rot, reflect)
            try:
                score = cc(cand, ref)
            except ValueError:
                continue
            if best is None or score > best[0] + tie_tol:
                best = (score, k, reflect, cand)
    if best is None:
        raise ValueError("alignment undefined for constant images")
    score, k, reflect, cand = best
    aligned_pmf = None
    if pmf is not None:
        p = np.asarray(getattr(pmf, "probs", pmf), dtype=float)
        aligned_pmf = transform_pmf(p, k * p.size / n_rot, reflect)
    return AlignmentResult(k, reflect, score, cand, aligned_pmf)


def recovery_scores(img, pmf, ref, ref_pmf=None, n_rot: int = 240) -> dict:
    """Aligned PSNR/CC against ``ref`` and, given ``ref_pmf``, the PMF distance.

    ``pmf`` lives on ``[0, 2 pi)``. When ``ref_pmf`` has period ``pi`` the
    aligned estimate is folded onto ``[0, pi)`` first; the reference is then
    rebinned onto the estimate's grid before taking ``d_tv``.
    """
    from .projection import AnglePMF

    al = align_o2(img, ref, pmf, n_rot=n_rot)
    out = {"psnr": psnr(al.aligned_image, ref), "cc": al.cc, "alignment": al}
    if ref_pmf is not None and al.aligned_pmf is not None:
        est = AnglePMF(al.aligned_pmf / al.aligned_pmf.sum())
        if not isinstance(ref_pmf, AnglePMF):
            ref_pmf = AnglePMF(np.asarray(ref_pmf, dtype=float))
        if abs(ref_pmf.period - np.pi) < 1e-12 and est.n % 2 == 0:
            est = est.fold()
        out["d_tv"] = d_tv(est, ref_pmf.rebin(est.n, est.period))
    return out
