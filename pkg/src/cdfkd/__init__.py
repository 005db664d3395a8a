"""Desk-scale cross-domain feature knowledge distillation for detection.

A frozen teacher sees clean source images while a student trains on
corrupted, downscaled copies and imitates the teacher's backbone features
globally and per ground-truth instance. Everything runs on CPU from
scratch: hand-rolled reverse-mode autodiff, differentiable kernels,
procedural data, and directional experiments over held-out target domains.
"""

from .checkpoint import checkpoint_digest, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config, parse_config
from .corruption import (
    CORRUPTION_KINDS,
    DiversifyDraw,
    apply_corruption,
    downscale,
    replay_diversify,
    sample_diversify,
)
from .detector import (
    Detection,
    DetectorModel,
    DensePredictions,
    assign_targets,
    decode,
    detection_loss,
    nms,
)
from .distill import (
    DistillBatch,
    DistillConfig,
    DistillSample,
    LossBreakdown,
    distill_step,
    diversify_sample,
    global_distill_loss,
    instance_distill_loss,
)
from .evaluation import (
    EvalReport,
    ap_by_size,
    average_precision,
    evaluate_domains,
    evaluate_scenes,
    export_feature_heatmap,
    iou,
)
from .gradcheck import check_gradients
from .kernels import (
    FeatureMap,
    RoiBox,
    bce_with_logits,
    bilinear_resize,
    conv2d,
    cosine_loss,
    max_pool2d,
    pad2d,
    relu,
    roi_align,
    smooth_l1,
    softmax_ce,
)
from .scenes import (
    CLASS_NAMES,
    VARIANTS,
    Annotation,
    DomainVariant,
    Scene,
    SceneConfig,
    generate_scene,
    generate_scenes,
    read_dataset,
    render_domain_variant,
    write_dataset,
)
from .tensor import (
    NonFiniteError,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    sgd_step,
)
from .training import build_datasets, run_ablation, run_distillation, train_teacher

__version__ = "0.1.0"
