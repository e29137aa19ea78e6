"""Spectral Galerkin simulator and verification harness for the stochastic
alpha-Navier-Stokes (LANS-alpha) equation with additive trace-class noise
on a 2D periodic box."""

from .basis import (
    Basis,
    SpectralField,
    WaveVector,
    build_basis,
    dump_snapshot,
    eval_field,
    inner_product,
    leray_project,
    load_snapshot,
    save_snapshot,
    sobolev_norms,
)
from .integrator import (
    BlowUpError,
    IntegratorConfig,
    StepKernel,
    TrajectoryRecord,
    integrate,
    run_ensemble,
    step,
    step_variation,
)
from .noise import (
    AdmissibilityReport,
    NoiseSpec,
    SingularOperatorError,
    make_noise,
    q_apply,
    sample_increment,
    substream,
)
from .operators import (
    PhysicalParams,
    alpha_dissipation,
    alpha_energy,
    apply_stokes,
    b_form,
    b_tilde,
    b_tilde_convolution,
    b_tilde_matrix,
    drift,
    helmholtz,
    linearized_drift,
)

__version__ = "0.1.0"
