"""pidkit: partial information decomposition for multimodal probe data.

Exact discrete atoms by constrained convex minimization, a scalable
neural estimator for continuous features, the probe-data ingestion
pipeline, and the cross-model/layer-wise/training-dynamics analysis
suite, all behind one reproducible CLI.
"""

__version__ = "0.1.0"

from .core import JointPmf, Pmf, co_information, conditional_mi, entropy, mutual_information
from .solver import (
    AdmissibleSet,
    PidAtoms,
    SolveOptions,
    SolveResult,
    check_marginals,
    compute_atoms,
    decompose_joint,
    solve,
)
from .batch import (
    CouplingModel,
    EncoderParams,
    TrainConfig,
    build_similarity,
    estimate_atoms,
    load_model,
    save_model,
    sinkhorn_project,
    train,
)
from .pipeline import (
    Manifest,
    ModalityStats,
    RegularizedPrediction,
    SampleRecord,
    SplitSpec,
    aggregate_marginal,
    compute_modality_stats,
    length_normalized_score,
    pool_tokens,
    read_records,
    split_dataset,
    threshold_regularize,
    write_records,
)
from .analysis import (
    CorrelationResult,
    ProfileReport,
    d_vision,
    family_medians,
    pid_shares,
    scaling_deltas,
    spearman,
    trace,
)
from .synthetic import (
    ContinuousSpec,
    GateSpec,
    brute_force_pid,
    gate_joint,
    gate_records,
    gen_continuous,
)

__all__ = [name for name in dir() if not name.startswith("_")]
