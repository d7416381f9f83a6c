"""Graph-Laplacian angle ordering and known-angle least-squares reconstruction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from .em_solver import FourierLines, GramCache, build_system, fb_to_hb, mirror_index, pcg_solve
from .hb_basis import BasisSpec, HBCoefficients
from .projection import ProjectionDataset

__all__ = [
    "GraphDisconnectedError",
    "WeightMatrix",
    "circular_diffs_deg",
    "laplacian_embed",
    "reconstruct_known_angles",
    "weight_matrix",
]


class GraphDisconnectedError(ValueError):
    pass


@dataclass(frozen=True)
class WeightMatrix:
    E: np.ndarray
    epsilon: float
    cutoff_deg: float


def circular_diffs_deg(angles_rad) -> np.ndarray:
    """Pairwise angular distances on the circle, in degrees."""
    a = np.asarray(angles_rad, dtype=float)
    d = np.abs(a[:, None] - a[None, :]) % (2 * np.pi)
    return np.rad2deg(np.minimum(d, 2 * np.pi - d))


def weight_matrix(angle_diffs, epsilon: float = 20.0, cutoff: float = 5.0) -> WeightMatrix:
    """Gaussian kernel ``exp(-d^2 / epsilon)`` truncated at ``cutoff`` degrees."""
    d = np.asarray(angle_diffs, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError("angle differences must be a square matrix")
    if np.any(d < 0):
        raise ValueError("angle differences must be nonnegative")
    if not np.allclose(d, d.T):
        raise ValueError("angle differences must be symmetric")
    E = np.where(d <= cutoff, np.exp(-(d**2) / epsilon), 0.0)
    E = 0.5 * (E + E.T)
    return WeightMatrix(E, float(epsilon), float(cutoff))


def laplacian_embed(E) -> np.ndarray:
    """Angles in ``(-pi, pi]`` from the two leading non-trivial eigenvectors.

    Uses ``D^{-1/2} E D^{-1/2}``; its top eigenvector is ``D^{1/2} 1``.
    The next two, mapped back by ``D^{-1/2}``, give planar coordinates.
    """
    E = np.asarray(getattr(E, "E", E), dtype=float)
    n_comp, _ = connected_components(E > 0, directed=False)
    if n_comp != 1:
        raise GraphDisconnectedError(f"weight graph has {n_comp} connected components")
    deg = E.sum(axis=1)
    dinv = 1.0 / np.sqrt(deg)
    S = dinv[:, None] * E * dinv[None, :]
    # eigh returns ascending eigenvalues; ties keep LAPACK's deterministic order
    _, vecs = np.linalg.eigh(S)
    psi = dinv[:, None] * vecs[:, -3:-1][:, ::-1]
    return np.arctan2(psi[:, 1], psi[:, 0])


def reconstruct_known_angles(dataset: ProjectionDataset, angles, spec: BasisSpec,
                             tol: float = 1e-10, max_iter: int = 2000) -> HBCoefficients:
    """Least-squares HB coefficients for lines with given angles.

    The normal equations are the EM M-step system with one-hot
    responsibilities and one bin per line; a ridge of
    ``1e-8 trace(A) / dim`` guards against rank deficiency.
    """
    angles = np.asarray(angles, dtype=float)
    if angles.shape != (dataset.L,):
        raise ValueError("need one angle per line")
    fl = FourierLines(spec, dataset.m)
    F = fl.from_hartley(dataset.lines)
    L = dataset.L
    A, b = build_system(np.eye(L), np.full(L, 1.0 / L), F, GramCache(fl), thetas=angles)
    ridge = 1e-8 * A.diagonal().sum() / spec.size

    class _Ridged:
        def matvec(self, x):
            return A.matvec(x) + ridge * x

        def diagonal(self):
            return A.diagonal() + ridge

    mir = mirror_index(spec)
    sol = pcg_solve(_Ridged(), b, tol=tol, max_iter=max_iter,
                    project=lambda v: 0.5 * (v + np.conj(v[mir])))
    from .em_solver import FBCoefficients

    return HBCoefficients(fb_to_hb(FBCoefficients(sol.x, spec)).real, spec)
