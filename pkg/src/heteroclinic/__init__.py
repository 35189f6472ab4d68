"""Heteroclinic connections between center manifolds of L1 and L2 in the spatial RTBP.

Modules
-------
dynamics      RTBP field, libration points, eigen-frames
polyalg       truncated multivariate power series
parameterize  parameterization method for center-(un)stable manifolds
slicing       iso-energetic slices and the error in the orbit
propagate     RKF7(8) integration, variational equations, Poincare sections
connect       section matching and multiple-shooting refinement
cli           pipeline driver
"""
from .dynamics import (
    CENTER_STABLE,
    CENTER_UNSTABLE,
    MU_EARTH_MOON,
    LibrationContext,
    eigenstructure,
    libration_context,
    locate_libration,
    rtbp_field,
    rtbp_hamiltonian,
)
from .parameterize import (
    Parameterization,
    StyleConfig,
    build_parameterization,
    invariance_residual,
    load_parameterization,
    save_parameterization,
)
from .polyalg import TruncatedSeries, monomial_index
from .propagate import SectionSpec, StopPolicy, integrate, integrate_with_stm, poincare_map
from .slicing import SliceMesh, error_in_orbit, mesh_slice, solve_s3
from .connect import (
    CandidatePair,
    ConnectionRecord,
    SectionCloud,
    match_candidates,
    newton_minnorm,
    propagate_cloud,
    refine_candidate,
    refine_with_fixed,
)

__version__ = "0.1.0"
