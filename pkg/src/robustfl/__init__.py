"""Federated learning with worst-case protection regularizers.

Simulates FedAvg-style and proximal-point training over per-user datasets,
adds dual-norm protection functions to the local objectives, and provides
variational-inequality diagnostics for the gap between federated and
centralized solutions.
"""

__version__ = "0.1.0"

from .costs import (
    CostModel,
    FAMILIES,
    HINGE_SVM,
    LINEAR_REGRESSION,
    LOGISTIC_BINARY,
    LOGISTIC_MULTICLASS,
    LabeledDataset,
    ShapeError,
    UnsupportedModelError,
    global_cost,
    gradient,
    hessian_block,
    local_cost,
    pool,
)
from .protection import (
    NumericError,
    ProtectionSpec,
    UncertainFunction,
    dual_norm_gradient,
    dual_norm_order,
    inner_maximizer,
    project_p_ball,
    protection_gradient,
    protection_term,
    robust_local_cost,
    robust_local_gradient,
    worst_case_value,
)
from .solvers import (
    SolveTrace,
    SolverConfig,
    gd_step,
    initial_weights,
    proximal_response,
    solve_centralized,
)
from .federation import (
    FederationConfig,
    FederationState,
    RoundMetrics,
    aggregate_weights,
    initial_state,
    run_federation,
    run_round,
)
from .diagnostics import (
    DiagnosticsReport,
    GapReport,
    MatrixSizeError,
    UpsilonMatrix,
    build_upsilon,
    estimate_c_sm,
    gap_report,
    is_p_matrix,
    run_diagnostics,
    vi_mapping,
    weight_grid,
)
from .data import (
    IdxFormatError,
    PartitionPlan,
    inspect_idx,
    load_csv,
    load_idx,
    partition,
    subsample,
    synth_blobs,
    synth_quadratic,
)
from .harness import (
    ExperimentConfig,
    RunRecord,
    emit_outputs,
    evaluate_accuracy,
    load_config,
    run_experiment,
)
