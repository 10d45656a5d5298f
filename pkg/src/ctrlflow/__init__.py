"""ctrlflow: measure transport and set stabilization for control-affine systems.

The package builds feedback laws in three steps: construct trajectory/control
ensembles between two sample clouds (exact steering primitives or noising
runs), regress the conditional-mean control on (time, state), and integrate
the resulting closed loop forward (transport) or reversed (stabilization).
"""

from .config import SCHEMA_VERSION, ExperimentConfig, config_hash, load_config
from .errors import (
    BlowUpError,
    ConfigurationError,
    CtrlFlowError,
    EmptyDatasetError,
    InfeasibleTargetError,
    StageError,
    TrainingDivergedError,
    UncontrollablePairError,
    UnknownSystemError,
    UnstableGainError,
    UnsupportedSystemError,
)
from .flow import (
    FlowInfo,
    integrate_closed_loop,
    integrate_closed_loop_batch,
    marginal_snapshots,
    resample_and_reverse,
    save_snapshot_csv,
    snapshots_from_arrays,
)
from .interpolants import (
    Gramian,
    brockett_steer_pair,
    brockett_steer_pair_batch,
    equilibrium_control,
    feedback_steer_pair,
    feedback_steer_pair_batch,
    gramian,
    min_energy_pair,
    min_energy_pair_batch,
    place_poles,
)
from .measures import (
    Coupling,
    EmpiricalMeasure,
    build_coupling,
    pushforward,
    sample_measure,
    sliced_wasserstein2,
    support_inclusion_score,
    wasserstein2,
)
from .noising import (
    BrownianControlPath,
    NoisingConfig,
    NoisingReport,
    PmpState,
    QuadraticCost,
    endpoint_map,
    endpoint_map_batch,
    exp_map,
    exp_map_batch,
    generate_noising_dataset,
    hamiltonian,
    hamiltonian_drift,
    pmp_extremal,
    pmp_extremal_batch,
    pmp_optimal_control,
    sample_brownian_control,
)
from .regression import (
    FeedbackLaw,
    RegressionDataset,
    constant_predictor_loss,
    crossval_loss,
    dataset_from_pairs,
    fit_feedback,
    load_dataset,
    predict,
    save_dataset,
)
from .systems import (
    ControlAffineSystem,
    LinearSystem,
    builtin_names,
    builtin_system,
    check_sublinear_growth,
    eval_dynamics,
    hormander_rank,
    lie_bracket,
    negate_system,
    six_state_matrices,
    six_state_output,
)
from .trajectory import (
    TrajectoryControlPair,
    load_pair_csv,
    save_pair_bundle,
    save_pair_csv,
)

__version__ = "0.1.0"

__all__ = [
    "SCHEMA_VERSION",
    "ExperimentConfig",
    "config_hash",
    "load_config",
    "BlowUpError",
    "ConfigurationError",
    "CtrlFlowError",
    "EmptyDatasetError",
    "InfeasibleTargetError",
    "StageError",
    "TrainingDivergedError",
    "UncontrollablePairError",
    "UnknownSystemError",
    "UnstableGainError",
    "UnsupportedSystemError",
    "FlowInfo",
    "integrate_closed_loop",
    "integrate_closed_loop_batch",
    "marginal_snapshots",
    "resample_and_reverse",
    "save_snapshot_csv",
    "snapshots_from_arrays",
    "Gramian",
    "brockett_steer_pair",
    "brockett_steer_pair_batch",
    "equilibrium_control",
    "feedback_steer_pair",
    "feedback_steer_pair_batch",
    "gramian",
    "min_energy_pair",
    "min_energy_pair_batch",
    "place_poles",
    "Coupling",
    "EmpiricalMeasure",
    "build_coupling",
    "pushforward",
    "sample_measure",
    "sliced_wasserstein2",
    "support_inclusion_score",
    "wasserstein2",
    "BrownianControlPath",
    "NoisingConfig",
    "NoisingReport",
    "PmpState",
    "QuadraticCost",
    "endpoint_map",
    "endpoint_map_batch",
    "exp_map",
    "exp_map_batch",
    "generate_noising_dataset",
    "hamiltonian",
    "hamiltonian_drift",
    "pmp_extremal",
    "pmp_extremal_batch",
    "pmp_optimal_control",
    "sample_brownian_control",
    "FeedbackLaw",
    "RegressionDataset",
    "constant_predictor_loss",
    "crossval_loss",
    "dataset_from_pairs",
    "fit_feedback",
    "load_dataset",
    "predict",
    "save_dataset",
    "ControlAffineSystem",
    "LinearSystem",
    "builtin_names",
    "builtin_system",
    "check_sublinear_growth",
    "eval_dynamics",
    "hormander_rank",
    "lie_bracket",
    "negate_system",
    "six_state_matrices",
    "six_state_output",
    "TrajectoryControlPair",
    "load_pair_csv",
    "save_pair_bundle",
    "save_pair_csv",
    "run_experiment",
    "emit_plot_data",
    "verify",
    "ExperimentReport",
]


def __getattr__(name):
    # experiments pulls in most of the package; import lazily to keep
    # `import ctrlflow` cheap and cycle-free
    if name in ("run_experiment", "emit_plot_data", "verify", "ExperimentReport"):
        from . import experiments

        return getattr(experiments, name)
    raise AttributeError(f"module 'ctrlflow' has no attribute '{name}'")
