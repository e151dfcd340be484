"""Spectral covariance estimation from partitioned compressive measurements,
with a learned diffusion denoiser preconditioning the projected gradient
descent updates.
"""

from .datamodel import (
    CovarianceSpec,
    PartitionPlan,
    load_cube,
    make_partitions,
    sample_gaussian_data,
    synth_covariance,
    write_cube,
)
from .denoiser import (
    TrainHyper,
    TrainingSet,
    gaussian_filter_precondition,
    load_params,
    loss_simple,
    save_params,
    train,
)
from .diffusion import (
    DiffusionSchedule,
    ErrorStats,
    NoisyGradient,
    build_schedule,
    calibrate_schedule,
    forward_marginal,
    forward_step,
    load_schedule,
    reverse_sample,
    save_schedule,
    symmetric_unit_noise,
    with_sigma,
)
from .evalreport import aligned_eigenvector_count, emit_heatmap, mse, run_comparison
from .linalg import (
    Spectrum,
    cholesky_factor,
    frobenius_norm,
    principal_angle_cosines,
    project_psd,
    sym_eigendecompose,
    symmetrize,
)
from .objective import (
    GradientSample,
    ObjectiveConfig,
    clean_gradient,
    gradient,
    gradient_error,
    objective_value,
)
from .optimizer import (
    ArmijoConfig,
    PreconditionerConfig,
    SolverConfig,
    armijo_step,
    backprojection_init,
    pgd_run,
    precondition,
)
from .sensing import (
    MeasurementSet,
    ProjectionEnsemble,
    SensingConfig,
    compressed_sample_cov,
    draw_projections,
    exact_measurements,
    measure_dataset,
    measure_partition,
)
from .unet import UNetSpec, init_params, sinusoidal_embed, unet_forward

__version__ = "0.1.0"
