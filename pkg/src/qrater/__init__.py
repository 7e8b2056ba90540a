"""Query-token models of individual annotator behavior."""

from .data import (
    AnnotationMatrix,
    FeatureSet,
    SyntheticWorld,
    WorldSpec,
    gen_synthetic_world,
    load_annotations,
    load_features,
    save_features,
    sparsify,
    split,
    standard_world_spec,
)
from .evalsuite import MetricsReport, accuracy, evaluate, macro_f1, majority_vote
from .focus import FocusMap, export_heatmap, extract_focus, focus_recovery_score
from .model import (
    AttentionRecord,
    ModelConfig,
    ModelParams,
    forward_image,
    forward_sequence,
    init_model,
    load_checkpoint,
    param_count,
    save_checkpoint,
    total_loss,
)
from .tensor import Tape, Tensor, backward, finite_diff_check
from .trainer import TrainConfig, TrainHistory, adamw_step, clip_gradients, lr_at, train

__version__ = "0.1.0"
