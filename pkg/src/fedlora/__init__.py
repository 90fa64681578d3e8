"""Deterministic federated LoRA fine-tuning simulator.

Implements heterogeneous-client LoRA fine-tuning at desk scale: rank-1
importance scoring, truncation (italora) and freezing (ifalora) schemes,
adaptive norm-weighted aggregation with zero-padding (ifzlora) and
homogeneous (homlora) baselines, and a fully seeded round orchestrator.
"""

from .aggregation import (
    AggregationAccumulator,
    AggregationPolicy,
    accumulate,
    aggregate_adaptive,
    aggregate_fedavg,
    aggregate_zero_padding,
)
from .config import (
    ConfigError,
    ExperimentConfig,
    federation_config,
    parse_config,
    parse_config_text,
    serialize_config,
    synthetic_spec,
)
from .data import Dataset, SyntheticSpec, SyntheticTask, generate_synthetic, load_tsv, partition_iid
from .federation import (
    SCHEMES,
    FederationConfig,
    FederationData,
    RoundReport,
    ServerState,
    evaluate_distributed_clients,
    init_server_state,
    prepare_data,
    run_experiment,
    run_round,
    sample_clients,
)
from .importance import (
    ImportanceTracker,
    combined_score,
    fresh_tracker,
    rank1_scores,
    raw_sensitivity,
    update_tracker,
)
from .lora import (
    GlobalLora,
    LoraAdapter,
    effective_delta,
    init_adapter,
    rank1_component,
    upload_size,
)
from .model import (
    AdamState,
    FrozenBase,
    TrainingConfig,
    adam_step,
    evaluate,
    forward,
    init_adam_state,
    l2_penalty,
    local_train,
    loss_and_grads,
)
from .schemes import (
    ClientCapability,
    ClientPlan,
    UploadPayload,
    apply_freezing,
    apply_truncation,
    extract_upload,
    make_plan,
    selected_count,
    topk_indices,
    trained_count,
)

__version__ = "0.1.0"
