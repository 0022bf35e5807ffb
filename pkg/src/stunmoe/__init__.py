"""Structured-then-unstructured pruning for mixture-of-experts models."""

__version__ = "0.1.0"

from stunmoe.backend import backend_name, get_backend
from stunmoe.calibration import (
    CalibrationSet,
    CoactivationStats,
    collect_coactivations,
    generate_calibration,
)
from stunmoe.model import (
    Activation,
    ExpertParams,
    MoeLayer,
    MoeModel,
    forward_layer,
    forward_layer_batch,
    forward_model,
    forward_model_batch,
)
from stunmoe.oracle import (
    CostLedger,
    PairedSummary,
    RecoveryScore,
    adjusted_rand_index,
    cluster_recovery,
    config_hash,
    greedy_rows_to_csv,
    greedy_vs_oracle,
    paired_comparison,
    subset_count,
)
from stunmoe.pipeline import (
    SparsityReport,
    StunConfig,
    SweepResult,
    interpolation_sweep,
    output_deviation,
    run_stun,
    unstructured_budget,
)
from stunmoe.rng import SeededRng
from stunmoe.serialization import (
    inspect_header,
    load_calibration,
    load_model,
    save_calibration,
    save_model,
)
from stunmoe.structured import (
    ClusterMap,
    DistanceMatrix,
    GreedyConfig,
    PruningPlan,
    agglomerative_cluster,
    apply_expert_prune,
    behavioral_distance,
    combinatorial_prune,
    dsatur_cluster,
    greedy_prune_o1,
    greedy_prune_on,
    reconstruction_loss,
    threshold_search,
)
from stunmoe.synth import SynthSpec, generate_synthetic
from stunmoe.tensor import frobenius_norm, matmul, softmax, topk
from stunmoe.unstructured import (
    ActivationNorms,
    OwlConfig,
    SparsityMask,
    apply_masks,
    collect_activation_norms,
    kurtosis,
    kurtosis_report,
    magnitude_mask,
    owl_allocate,
    wanda_mask,
)

__all__ = [name for name in dir() if not name.startswith("_")]
