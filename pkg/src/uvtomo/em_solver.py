"""Marginal-likelihood EM over unknown projection angles.

Work happens in the complex Fourier-Bessel (FB) basis on the half line
``xi = n / m``, ``n = 0..m//2``. A Hartley line ``h`` corresponds to the
Fourier line ``F = E - i O`` built from its even and odd parts, and the
weighted norm ``sum_n w_n |F_n|^2`` (``w = 1`` at ``n = 0`` and at an even-m
Nyquist sample, ``2`` elsewhere) equals ``||h||^2``. Likelihoods computed here
therefore agree with the Gaussian model on the full Hartley line.

An FB template at angle ``theta`` is ``sum_{k,q} a_{k,q} J^{k,q}(xi) e^{i k theta}``;
real images satisfy ``a_{-k,q} = conj(a_{k,q})``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, ndimage, special

from .hb_basis import BasisSpec, HBCoefficients, radial_matrix
from .phantoms import expand_image
from .projection import AnglePMF, ProjectionDataset

__all__ = [
    "EMResult",
    "FBCoefficients",
    "FourierLines",
    "GramCache",
    "PCGResult",
    "SystemOperator",
    "blob_init_image",
    "build_system",
    "e_step",
    "em_best_of",
    "em_run",
    "fb_to_hb",
    "hb_to_fb",
    "log_marginal_likelihood",
    "m_step_pmf",
    "mask_init_image",
    "pcg_solve",
    "residuals",
    "smooth_pmf",
    "template_match",
]


@dataclass
class FBCoefficients:
    """Complex FB coefficients in ``spec.omega`` order."""

    values: np.ndarray
    spec: BasisSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != (self.spec.size,):
            raise ValueError(f"expected {self.spec.size} coefficients")

    def symmetry_error(self) -> float:
        """Max ``|a_{-k,q} - conj(a_{k,q})|``."""
        mir = mirror_index(self.spec)
        return float(np.max(np.abs(self.values[mir] - np.conj(self.values)), initial=0.0))


def mirror_index(spec: BasisSpec) -> np.ndarray:
    """Position of ``(-k, q)`` for each ``(k, q)``."""
    # omega is symmetric in k and ordered by (k, q)
    return spec.size - 1 - _within_order_reverse(spec)


def _within_order_reverse(spec: BasisSpec) -> np.ndarray:
    ks = spec.ks
    starts = np.searchsorted(ks, ks)
    ends = np.searchsorted(ks, ks, side="right")
    return starts + (ends - 1 - np.arange(ks.size))


def _order_weights(ks: np.ndarray) -> np.ndarray:
    return np.where(ks % 2 == 0, 1.0 + 0j, -1j)


def hb_to_fb(c: HBCoefficients) -> FBCoefficients:
    """Map real HB coefficients to the FB coefficients of the same image."""
    spec = c.spec
    vals = np.asarray(c.values)
    mir = mirror_index(spec)
    sign = np.where(spec.ks % 2 == 0, 1.0, -1.0)
    u, v = (1 - 1j) / 2, (1 + 1j) / 2
    a = _order_weights(spec.ks) * (u * vals + v * sign * vals[mir])
    return FBCoefficients(a, spec)


def fb_to_hb(a: FBCoefficients) -> np.ndarray:
    """Inverse of :func:`hb_to_fb`; complex output (real for symmetric ``a``)."""
    spec = a.spec
    mir = mirror_index(spec)
    w = _order_weights(spec.ks)
    alpha = a.values / w
    beta = a.values[mir] / w
    s = np.where(spec.ks % 2 == 0, 1.0, -1.0)
    u, v = (1 - 1j) / 2, (1 + 1j) / 2
    return 1j * (u * alpha - s * v * beta)


def _symmetrize(x: np.ndarray, mir: np.ndarray) -> np.ndarray:
    return 0.5 * (x + np.conj(x[mir]))


class FourierLines:
    """Half-line Fourier data and radial tables for one basis and line length."""

    def __init__(self, spec: BasisSpec, m: int | None = None):
        m = spec.m if m is None else int(m)
        self.spec = spec
        self.m = m
        n = np.arange(m // 2 + 1)
        self.xi = n / m
        w = np.full(n.size, 2.0)
        w[0] = 1.0
        if m % 2 == 0:
            w[-1] = 1.0
        self.w = w
        self.rad = radial_matrix(spec, self.xi) / np.sqrt(m)  # [n_xi, |omega|]
        self.orders = np.arange(-spec.k_max, spec.k_max + 1)
        self.k_index = spec.ks + spec.k_max
        self.starts = np.searchsorted(spec.ks, self.orders)

    def from_hartley(self, lines: np.ndarray) -> np.ndarray:
        """``[L, m]`` Hartley lines -> ``[L, n_xi]`` complex Fourier half lines."""
        lines = np.atleast_2d(lines)
        c = self.m // 2
        n = np.arange(self.xi.size)
        pos = lines[:, (c + n) % self.m]
        neg = lines[:, (c - n) % self.m]
        return 0.5 * (pos + neg) - 0.5j * (pos - neg)

    def by_order(self, a: np.ndarray) -> np.ndarray:
        """``Z[k, n] = sum_q a_{k,q} J^{k,q}(xi_n)``."""
        return np.add.reduceat((self.rad * a[None, :]).T, self.starts, axis=0)

    def templates(self, a, thetas) -> np.ndarray:
        """FB templates ``[N, n_xi]`` at the given angles."""
        a = a.values if isinstance(a, FBCoefficients) else np.asarray(a)
        e = np.exp(1j * np.outer(thetas, self.orders))
        return e @ self.by_order(a)

    def band_limited(self, xi_max: float) -> "FourierLines":
        """Shallow copy whose quadrature weights vanish above ``xi_max``."""
        out = copy.copy(self)
        out.w = np.where(self.xi <= xi_max, self.w, 0.0)
        return out

    def back_order(self, y: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`by_order` including the quadrature weights."""
        return np.einsum("nw,wn->w", self.rad * self.w[:, None], y[self.k_index])


def _grid(n_theta: int) -> np.ndarray:
    return 2 * np.pi * np.arange(n_theta) / n_theta


def residuals(F: np.ndarray, templates: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted squared distances ``[L, N]`` between data and templates."""
    fn = np.sum(w * np.abs(F) ** 2, axis=1)
    tn = np.sum(w * np.abs(templates) ** 2, axis=1)
    cross = ((np.conj(F) * w) @ templates.T).real
    return np.maximum(fn[:, None] + tn[None, :] - 2 * cross, 0.0)


def _log_joint(F, a, p, sigma, fl: FourierLines, thetas):
    res = residuals(F, fl.templates(a, thetas), fl.w)
    with np.errstate(divide="ignore"):
        logp = np.log(np.asarray(getattr(p, "probs", p), dtype=float))
    return logp[None, :] - res / (2 * sigma**2)


def e_step(F, a, p, sigma: float, fl: FourierLines, thetas=None) -> np.ndarray:
    """Posterior bin probabilities ``r[L, N]`` (log-sum-exp normalised)."""
    if not sigma > 0:
        raise ValueError("sigma must be positive; use template_match for sigma = 0")
    p = np.asarray(getattr(p, "probs", p), dtype=float)
    thetas = _grid(p.size) if thetas is None else thetas
    lj = _log_joint(F, a, p, sigma, fl, thetas)
    lj -= lj.max(axis=1, keepdims=True)
    r = np.exp(lj)
    r /= r.sum(axis=1, keepdims=True)
    return r


def template_match(F, a, fl: FourierLines, n_theta: int = 240, thetas=None) -> np.ndarray:
    """Nearest-template bin per line (first index on ties)."""
    thetas = _grid(n_theta) if thetas is None else thetas
    res = residuals(F, fl.templates(a, thetas), fl.w)
    return np.argmin(res, axis=1)


def log_marginal_likelihood(F, a, p, sigma: float, fl: FourierLines, thetas=None) -> float:
    """``sum_l logsumexp_j [log p_j - ||F_l - T_j||^2 / (2 sigma^2)]``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    p = np.asarray(getattr(p, "probs", p), dtype=float)
    thetas = _grid(p.size) if thetas is None else thetas
    lj = _log_joint(F, a, p, sigma, fl, thetas)
    return float(np.sum(special.logsumexp(lj, axis=1)))


def m_step_pmf(r: np.ndarray) -> np.ndarray:
    col = np.asarray(r, dtype=float).sum(axis=0)
    return col / col.sum()


class GramCache:
    """``J[(k,q),(k',q')] = sum_n w_n J^{k,q}(xi_n) J^{k',q'}(xi_n)`` for one basis."""

    def __init__(self, fl: FourierLines):
        self.fl = fl
        self._J = None

    @property
    def J(self) -> np.ndarray:
        if self._J is None:
            r = self.fl.rad
            self._J = r.T @ (r * self.fl.w[:, None])
        return self._J

    @property
    def diagonal(self) -> np.ndarray:
        r = self.fl.rad
        return np.sum(self.fl.w[:, None] * r * r, axis=0)


class SystemOperator:
    """``A = sum_j p_j H_j^H W H_j`` with ``A[(k,q),(k',q')] = phat(k-k') J``.

    Products use the factorisation ``J = rad^T W rad`` plus a Toeplitz mix
    over orders, so the dense matrix is only formed on request.
    """

    def __init__(self, p, thetas, gram: GramCache):
        p = np.asarray(p, dtype=float)
        fl = gram.fl
        self.gram = gram
        K = fl.orders.size
        d = np.arange(-(K - 1), K)
        phat = np.exp(-1j * np.outer(d, thetas)) @ p
        # T[k, k'] = phat(k - k')
        self.toeplitz = linalg.toeplitz(phat[K - 1:], phat[K - 1::-1])
        self.shape = (fl.spec.size, fl.spec.size)
        self._diag = np.real(phat[K - 1]) * gram.diagonal

    def matvec(self, a: np.ndarray) -> np.ndarray:
        fl = self.gram.fl
        z = fl.by_order(a)
        return fl.back_order(self.toeplitz @ z)

    __matmul__ = matvec

    def diagonal(self) -> np.ndarray:
        return self._diag

    def toarray(self) -> np.ndarray:
        k = self.gram.fl.k_index
        return self.toeplitz[np.ix_(k, k)] * self.gram.J


def build_system(r, p, F, gram: GramCache, thetas=None):
    """Operator ``A`` and right-hand side ``b`` of the coefficient M-step.

    ``b = (1/L) sum_j H_j^H W sum_i r_ij F_i``; with ``sum_i r_ij = L p_j``
    the normal equations of the weighted least-squares fit read ``A a = b``.
    """
    r = np.asarray(r, dtype=float)
    p = np.asarray(getattr(p, "probs", p), dtype=float)
    thetas = _grid(p.size) if thetas is None else np.asarray(thetas)
    fl = gram.fl
    A = SystemOperator(p, thetas, gram)
    y = r.T @ F  # [N, n_xi]
    z = np.exp(-1j * np.outer(fl.orders, thetas)) @ y
    b = fl.back_order(z) / r.shape[0]
    return A, b


@dataclass
class PCGResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool
    breakdown: bool = False


def _apply(A, x):
    return A.matvec(x) if hasattr(A, "matvec") else A @ x


def _diag(A):
    return A.diagonal() if hasattr(A, "diagonal") else np.diag(A)


def pcg_solve(A, b, tol: float = 1e-10, max_iter: int = 500, x0=None, project=None,
              eps: float = 1e-14) -> PCGResult:
    """Jacobi-preconditioned conjugate gradients for Hermitian PSD ``A``.

    ``project`` optionally restricts the iteration to a real-linear subspace
    (it must be an orthogonal projector commuting with the preconditioner);
    inner products are then taken as real parts.
    """
    b = np.asarray(b)
    cplx = np.iscomplexobj(b) or np.iscomplexobj(getattr(A, "toeplitz", A))
    dtype = complex if cplx else float
    P = project if project is not None else (lambda v: v)
    d = np.real(_diag(A)).astype(float)
    d = np.maximum(d, eps * max(np.max(np.abs(d)), 1.0))
    x = np.zeros(b.shape, dtype=dtype) if x0 is None else np.array(x0, dtype=dtype)
    rhs = P(b)
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0:
        return PCGResult(np.zeros_like(x), 0, 0.0, True)
    r = rhs - P(_apply(A, x))
    res = np.linalg.norm(r) / bnorm
    if res < tol:
        return PCGResult(x, 0, res, True)
    z = r / d
    s = z.copy()
    rz = np.vdot(r, z).real
    for it in range(1, max_iter + 1):
        As = P(_apply(A, s))
        curv = np.vdot(s, As).real
        if curv <= 0:
            return PCGResult(x, it - 1, res, False, breakdown=True)
        alpha = rz / curv
        x = x + alpha * s
        r = r - alpha * As
        res = np.linalg.norm(r) / bnorm
        if res < tol:
            return PCGResult(x, it, res, True)
        z = r / d
        rz_new = np.vdot(r, z).real
        s = z + (rz_new / rz) * s
        rz = rz_new
    return PCGResult(x, max_iter, res, False)


def blob_init_image(m: int, rng, n_blobs: int = 6) -> np.ndarray:
    """Random Gaussian blobs inside the ball."""
    t = (np.arange(m) - m // 2) * (2.0 / m)
    y, x = np.meshgrid(t, t, indexing="ij")
    img = np.zeros((m, m))
    for _ in range(n_blobs):
        w = rng.uniform(0.05, 0.2)
        r = rng.uniform(0, 0.8 - w)
        ang = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0.2, 1.0) * np.exp(
            -((x - r * np.cos(ang)) ** 2 + (y - r * np.sin(ang)) ** 2) / (2 * w * w)
        )
    img[np.hypot(x, y) > 1] = 0
    return img / img.max()


def mask_init_image(m: int, rng) -> np.ndarray:
    """Uniform random pixels inside the ball."""
    t = (np.arange(m) - m // 2) * (2.0 / m)
    y, x = np.meshgrid(t, t, indexing="ij")
    img = rng.uniform(0, 1, size=(m, m))
    img[np.hypot(x, y) > 1] = 0
    return img


@dataclass
class EMResult:
    a: FBCoefficients
    p: np.ndarray
    trace: list = field(default_factory=list)
    pcg: list = field(default_factory=list)

    @property
    def c(self) -> HBCoefficients:
        return HBCoefficients(fb_to_hb(self.a).real, self.a.spec)


def smooth_pmf(p: np.ndarray, width: float) -> np.ndarray:
    """Circular Gaussian smoothing of a PMF (``width`` in bins)."""
    if width <= 0:
        return p
    out = ndimage.gaussian_filter1d(p, width, mode="wrap")
    return out / out.sum()


def em_run(dataset: ProjectionDataset, init, p0=None, iters: int = 50,
           sigma_inflation: float = 1.0, sigma: float | None = None, n_theta: int = 240,
           pcg_tol: float = 1e-10, pcg_max_iter: int = 500, callback=None,
           fl: FourierLines | None = None, march: tuple[float, int] | None = None,
           pmf_smoothing: float = 0.0) -> EMResult:
    """Alternate E-steps and M-steps from ``init`` for ``iters`` iterations.

    Parameters
    ----------
    dataset : ProjectionDataset
    init : FBCoefficients or HBCoefficients
    p0 : array, optional
        Initial PMF over ``n_theta`` bins on ``[0, 2 pi)``; uniform if omitted.
    sigma_inflation : float
        Factor applied to the noise level inside the E-step.
    sigma : float, optional
        Noise level used by the model; defaults to ``dataset.sigma``. Clean
        data needs an explicit positive value.
    callback : callable, optional
        Called as ``callback(iteration, a, p, loglik)``.
    march : (float, int), optional
        Frequency marching ``(rho0, n)``. At iteration ``t`` only
        coefficients with ``R_{k,q} <= rho_t max R`` are active and the
        E-step compares lines up to ``xi <= rho_t s``, where ``rho_t`` grows
        linearly from ``rho0`` to 1 over ``n`` iterations. Low-resolution
        angle assignment first keeps random starts out of poor local optima.
    pmf_smoothing : float
        Width (bins) of a circular Gaussian applied after each PMF update.

    With ``march`` and ``pmf_smoothing`` off this is plain EM and the trace
    is non-decreasing. The trace holds the log marginal likelihood at the
    un-inflated ``sigma`` (full band) for the start and after each iteration.
    """
    if isinstance(init, HBCoefficients):
        init = hb_to_fb(init)
    spec = init.spec
    sigma = dataset.sigma if sigma is None else float(sigma)
    if not sigma > 0:
        raise ValueError("EM needs a positive noise level; pass sigma for clean data")
    if sigma_inflation < 1:
        raise ValueError("sigma_inflation must be >= 1")
    fl = FourierLines(spec, dataset.m) if fl is None else fl
    gram = GramCache(fl)
    F = fl.from_hartley(dataset.lines)
    thetas = _grid(n_theta)
    p = np.full(n_theta, 1.0 / n_theta) if p0 is None else np.asarray(getattr(p0, "probs", p0), float)
    if p.size != n_theta:
        raise ValueError("p0 length must equal n_theta")
    mir = mirror_index(spec)
    r_max = spec.roots.max()
    a = _symmetrize(init.values, mir)
    out = EMResult(FBCoefficients(a, spec), p)
    out.trace.append(log_marginal_likelihood(F, a, p, sigma, fl, thetas))
    for it in range(iters):
        e_sigma = sigma * sigma_inflation
        fe = fl
        active = None
        if march is not None:
            rho0, n = march
            rho = min(1.0, rho0 + (1.0 - rho0) * it / max(n, 1))
            if rho < 1.0:
                active = spec.roots <= rho * r_max
                a = a * active
                fe = fl.band_limited(rho * spec.s + 1.5 / fl.m)
                # keep the per-sample noise level, not the total residual scale
                e_sigma *= np.sqrt(fe.w.sum() / fl.w.sum())
        if active is None:
            project = lambda v: _symmetrize(v, mir)  # noqa: E731
        else:
            project = lambda v, act=active: _symmetrize(v, mir) * act  # noqa: E731
        r = e_step(F, a, p, e_sigma, fe, thetas)
        p = smooth_pmf(m_step_pmf(r), pmf_smoothing)
        A, b = build_system(r, p, F, gram, thetas)
        sol = pcg_solve(A, b, tol=pcg_tol, max_iter=pcg_max_iter, x0=a, project=project)
        a = sol.x
        out.pcg.append(sol)
        ll = log_marginal_likelihood(F, a, p, sigma, fl, thetas)
        out.trace.append(ll)
        if callback is not None:
            callback(it, a, p, ll)
    out.a = FBCoefficients(a, spec)
    out.p = p
    return out


def _em_job(args):
    dataset, init, spec, kw = args
    return em_run(dataset, init, fl=FourierLines(spec, dataset.m), **kw)


def em_best_of(dataset: ProjectionDataset, spec: BasisSpec, n_init: int = 3, seed: int = 0,
               scheme: str = "blobs", workers: int = 1, **kw) -> tuple[EMResult, list]:
    """Run EM from ``n_init`` random initialisations; keep the highest likelihood.

    Starting images are drawn up front from ``seed``, so ``workers > 1``
    (one process per start) returns the same runs as a serial call.
    """
    rng = np.random.default_rng(seed)
    inits = []
    for _ in range(n_init):
        if scheme == "blobs":
            img = blob_init_image(dataset.m, rng)
        elif scheme == "mask":
            img = mask_init_image(dataset.m, rng)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        inits.append(hb_to_fb(expand_image(img, spec)))
    if workers > 1 and n_init > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(workers, n_init)) as pool:
            runs = list(pool.map(_em_job, [(dataset, a, spec, kw) for a in inits]))
    else:
        fl = FourierLines(spec, dataset.m)
        runs = [em_run(dataset, a, fl=fl, **kw) for a in inits]
    best = max(runs, key=lambda r: r.trace[-1])
    return best, runs
