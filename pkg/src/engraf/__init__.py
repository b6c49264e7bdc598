"""Hierarchical fine/coarse multi-branch image classifier.

A shared convolutional trunk feeds fine, coarse, and graft branches; the
graft branch separates its mid-level features into two differently
supervised patterns which are recombined, with every other branch feature,
into a final classifier. Training minimizes one cross-entropy term per
head. See the README for the CLI and file formats.
"""

from .errors import EngrafError
from .taxonomy import (
    LabelPair,
    Taxonomy,
    Violation,
    derive_coarse,
    generate_synthetic_taxonomy,
    load_taxonomy,
    save_taxonomy,
    validate_taxonomy,
)
from .data import (
    AugmentPolicy,
    Batch,
    ImageDataset,
    ImageRecord,
    augment,
    batch_iter,
    generate_synthetic_dataset,
    load_cifar100,
    load_dataset_dir,
    save_dataset_dir,
    take_fine_subset,
)
from .loss import HEAD_LABEL_KIND, VARIANT_HEADS, LossBreakdown, softmax_cross_entropy, total_loss
from .model import (
    BranchOutputs,
    EngrafConfig,
    EngrafNet,
    HeadLogits,
    build_model,
    param_count,
)
from .train import (
    AblationRow,
    EpochRecord,
    EvalMetrics,
    TrainConfig,
    evaluate,
    fit,
    format_coarse_fine,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
)
from .cam import Heatmap, grad_cam, render_overlay

__version__ = "0.1.0"
