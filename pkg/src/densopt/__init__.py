"""Data-optimal radial bases for atom-density representations.

Expands atom-centered neighbor densities on primitive (GTO/DVR) radial
bases, learns dataset-adapted contracted bases by PCA or PCovR, evaluates
them through splined radial integrals, and builds invariant/equivariant
density-correlation features (powerspectrum, NICE) with linear and kernel
regression models on top.
"""

from .contraction import (
    ContractionMap,
    CovarianceSet,
    covariance,
    explained_variance,
    optimal_basis_values,
    pca_contraction,
    pcovr_contraction,
    retained_variance_curve,
)
from .correlations import (
    CGTable,
    EquivariantBlock,
    block_norm,
    cg_table,
    nice_iterate,
    nice_seed,
    powerspectrum,
    variance_truncation,
    weighted_covariance,
)
from .density import (
    CoeffGradients,
    DensityCoeffs,
    density_coeff_gradients,
    density_coeffs,
    spherical_harmonics,
)
from .radial import (
    BasisSpec,
    RadialScaling,
    RadialTable,
    build_table,
    cutoff_fn,
    primitive_functions,
    radial_integral,
    radial_integral_delta,
)
from .regression import (
    Model,
    aggregate_structure_features,
    joint_energy_force_fit,
    krr_fit,
    krr_predict,
    predict_forces,
    ridge_fit,
    ridge_predict,
)
from .selection import SelectionResult, cur_select, fps_select, gfre
from .structures import (
    Environment,
    Structure,
    apply_rotation,
    neighbor_list,
    neighbor_lists,
    parse_extxyz,
    write_extxyz,
)

__version__ = "0.1.0"
