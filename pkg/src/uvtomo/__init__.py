"""Unknown-view tomography: Hartley-Bessel basis, adversarial and EM reconstruction."""

from .hb_basis import BasisSpec, HBCoefficients, build_basis_spec, render_spatial
from .projection import AnglePMF, HBProjector, ProjectionDataset, hartley_1d, synthesize_dataset

__all__ = [
    "AnglePMF",
    "BasisSpec",
    "HBCoefficients",
    "HBProjector",
    "ProjectionDataset",
    "build_basis_spec",
    "hartley_1d",
    "render_spatial",
    "synthesize_dataset",
]

__version__ = "0.1.0"
