"""Feedback delay network design, optimization, and analysis."""

__version__ = "0.1.0"

from .core import FdnConfig, TransferSample, eval_transfer, eval_transfer_householder, render_ir
from .errors import (
    ConfigurationError,
    ConvergenceError,
    DesignError,
    FdnError,
    InsufficientDecayError,
    SingularResolventError,
)
from .geq import AttenuationSpec, BiquadCascade, design_attenuation_filter, design_level_eq, render_fd_ir
from .metrics import (
    comb_energy,
    echo_density_profile,
    estimate_t60_bands,
    magnitude_report,
    operation_count,
)
from .modal import (
    ExcitationStats,
    ModalDecomposition,
    excitation_stats,
    gcp_eval,
    modal_decomposition,
    residues,
    solve_poles,
)
from .optim import (
    PRESET_DELAYS,
    Adam,
    LossBreakdown,
    TrainConfig,
    TrainReport,
    adam_step,
    batch_sampler,
    design_delays,
    frequency_grid,
    init_params,
    initial_config,
    loss_gradients,
    sparsity_loss,
    spectral_loss,
    total_loss,
    train,
)
from .param import (
    AbsorptionSpec,
    HouseholderParam,
    OrthogonalParam,
    ScatteringParam,
    gamma_from_t60,
    householder_from,
    min_training_t60,
    realize_feedback,
    scattering_response,
    skew_expm,
    t60_from_gamma,
)

__all__ = [name for name in dir() if not name.startswith("_")]
