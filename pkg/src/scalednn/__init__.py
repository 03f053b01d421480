"""Numerical laboratory for normalization-scaled feed-forward networks.

Networks of depth m with explicit layer normalizations N_i^{-gamma_i},
gamma_i in [1/2, 1], trained by SGD under layer-wise learning-rate schedules;
their wide limit solves a linear kernel ODE, and finite-width corrections
form an inductive expansion in powers of the top width. The package trains
the finite models, integrates the limit systems, and checks one against the
other at desk scale.
"""

from .core_model import (
    ActivationSpec,
    DomainError,
    ForwardTrace,
    ScalingConfig,
    Theta,
    forward,
    forward_batch,
    init_params,
)
from .experiments import (
    Dataset,
    EnsembleResult,
    NormalityReport,
    ScalingFitReport,
    accuracy_eval,
    interp_path,
    load_mnist,
    mc_ensemble,
    mnist_sweep,
    normality_check,
    scaling_fit,
    synth_dataset,
    synth_image_set,
    write_idx,
)
from .kernels import (
    DerivativeOrderError,
    FunctionSpace,
    InitLaw,
    KernelTables,
    Law1D,
    TestFunction,
    assemble_A,
    expect,
    initial_fluctuation_cov,
    kernel_B,
    lambda_sq,
    operator_C,
    operators_Cf1_Cf2_C3,
)
from .limit_ode import (
    ExpansionState,
    LBundle,
    OdeState,
    RegimeInfo,
    classify_regime,
    expansion_recursion,
    integrate_h,
    integrate_K,
    integrate_l,
    integrate_L,
    integrate_Psi,
    kernel_L_paths,
    kernel_l_paths,
    reconstruct,
    sample_initial_fluctuation,
)
from .rates import RateSchedule, rates_general, rates_three_layer, rates_two_layer
from .trainer import (
    TrainConfig,
    Trajectory,
    one_step_decomposition_check,
    sgd_step_three_layer,
    sgd_step_two_layer,
    train,
)

__version__ = "0.1.0"
