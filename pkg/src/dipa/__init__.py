"""Screen-displayed adversarial dodging patches for face recognition:
differentiable patch optimization over a surrogate ensemble, a desk-scale
evaluation harness, and a demo job service.
"""

from .embedders import (
    DEFAULT_ENSEMBLE_IDS,
    HELD_OUT_ID,
    Embedder,
    EmbedderRegistry,
    EmbedderSpec,
    cosine_similarity,
    default_registry,
    embed,
    load_ensemble,
)
from .imaging import (
    CameraChannelConfig,
    DimensionError,
    PlacementError,
    apply_patch,
    bilinear_resize,
    median_pool,
    preprocess_for_model,
    sample_placement,
    simulate_camera_channel,
    total_variation,
)
from .optimizer import LossTrace, OptimizationError, dipa_loss, generate_patch_set, optimize_patch
from .synthetic import synthetic_face, synthetic_subjects
from .types import (
    AttackConfig,
    Embedding,
    EvaluationReport,
    ImageTensor,
    Jitter,
    Patch,
    PatchMetadata,
    Placement,
    TrialRecord,
    ValidationError,
    default_attack_config,
    export_patch,
    import_patch,
    load_image,
    save_image,
    validate_image,
)

__version__ = "0.1.0"
