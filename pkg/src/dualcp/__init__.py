"""Rehearsal-free domain-incremental learning on embedding files.

Builds maximally separated concept prototypes from semantic guidance
vectors (flat or grouped coarse/fine), trains per-domain coarse-to-fine
calibrators with a dual dot-regression loss, and runs the full incremental
protocol with standard accuracy/forgetting metrics.
"""

from .calibrator import (
    CalibratorArch,
    CalibratorParams,
    TrainConfig,
    TrainResult,
    ddr_loss,
    forward,
    init_params,
    load_params,
    loss_gradients,
    save_params,
    train_domain,
)
from .protocol import (
    AccuracyMatrix,
    DomainMemory,
    ProtocolResult,
    average_accuracy,
    domain_id_accuracy,
    forgetting,
    identify_domain,
    load_memory,
    predict,
    predict_batch,
    run_protocol,
    save_memory,
)
from .prototypes import (
    AngleReport,
    DualPrototypeBank,
    Grouping,
    SimilarityGraph,
    build_dual_bank,
    build_vanilla_bank,
    class_mean_guidance,
    connected_groups,
    etf_from_basis,
    group_means,
    load_bank,
    qr_decompose,
    save_bank,
    similarity_graph,
    verify_angle_separation,
)
from .store import (
    EmbeddingSet,
    GuidanceMatrix,
    Manifest,
    guidance_from_embeddings,
    guidance_to_embeddings,
    load,
    load_guidance,
    normalize_rows,
    restrict_to_domain,
    save,
    save_guidance,
)
from .synth import SynthData, SynthSpec, generate

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix",
    "AngleReport",
    "CalibratorArch",
    "CalibratorParams",
    "DomainMemory",
    "DualPrototypeBank",
    "EmbeddingSet",
    "Grouping",
    "GuidanceMatrix",
    "Manifest",
    "ProtocolResult",
    "SimilarityGraph",
    "SynthData",
    "SynthSpec",
    "TrainConfig",
    "TrainResult",
    "average_accuracy",
    "build_dual_bank",
    "build_vanilla_bank",
    "class_mean_guidance",
    "connected_groups",
    "ddr_loss",
    "domain_id_accuracy",
    "etf_from_basis",
    "forgetting",
    "forward",
    "generate",
    "group_means",
    "guidance_from_embeddings",
    "guidance_to_embeddings",
    "identify_domain",
    "init_params",
    "load",
    "load_bank",
    "load_guidance",
    "load_memory",
    "load_params",
    "loss_gradients",
    "normalize_rows",
    "predict",
    "predict_batch",
    "qr_decompose",
    "restrict_to_domain",
    "run_protocol",
    "save",
    "save_bank",
    "save_guidance",
    "save_memory",
    "save_params",
    "similarity_graph",
    "train_domain",
    "verify_angle_separation",
]
