"""Spectra of periodic lattice operators perturbed by defects of smaller
dimension: bulk bands, guided branches along the defects, localized modes,
all through one certified step procedure, validated against brute-force
truncations."""

from .model import (
    DefectLayer,
    GridConfig,
    ProblemSpec,
    Stencil,
    ToleranceSet,
    ValidationReport,
    defect_stencil_to_symbol,
    stencil_to_symbol,
    validate,
)
from .oracle import (
    TruncatedOperator,
    assemble_truncated,
    boundary_mass,
    compare_spectra,
    oracle_eigenpairs,
    oracle_eigenvalues,
    periodic_box_check,
)
from .quadrature import (
    AveragedFunction,
    KGrid,
    NonConvergence,
    adaptive_bracket,
    bracket,
    grid_nodes,
)
from .spectrum import (
    BChain,
    Branch,
    Chain,
    ExclusionSet,
    MembershipCertificate,
    OmegaComponent,
    SpectralResult,
    StepCheckResult,
    UncertifiedLevel,
    bands,
    build_b0,
    dispersion_branch,
    exclusion_set,
    extend_chain,
    forward_apply,
    full_spectrum,
    membership,
    resolvent_apply,
    step_check,
    trig_vector,
)
from .symbol import (
    InputError,
    OmegaSymbol,
    SingularMatrix,
    TrigMatrixPolynomial,
    as_complex_matrix,
    det,
    eval_k,
    eval_omega_k,
    hermitian_eigenvalues,
    inverse,
    is_hermitian,
    smallest_singular_value,
)

__version__ = "0.1.0"
