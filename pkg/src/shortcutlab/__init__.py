"""shortcutlab: desk-scale study of shortcut learning in image classifiers.

Build label-attribute-skewed datasets, inject preprocessing bias, train
encoder/head models under transfer and fine-tuning schemes, and measure how
much a model leans on the shortcut instead of the real signal.
"""

from .core import (
    ImageRecord,
    Manifest,
    DatasetSplit,
    CorrelationSpec,
    ManifestError,
    compute_phi,
    contingency_counts,
    phi_from_cells,
    partition_by_patient,
    load_manifest,
    save_manifest,
    split_stats,
)
from .blur import gaussian_kernel, gaussian_filter
from .preprocess import preprocess, equalize_histogram, trim_border
from .generator import GeneratorConfig, generate, write_dataset
from .bias import FilterBiasSpec, FILTER_PRESETS, inject_filter_bias, feasible_phi_interval
from .skew import (
    ResamplePlan,
    InfeasiblePlanError,
    plan_cells,
    execute_plan,
    SkewPair,
    make_skew_pair,
    source_phi_grid,
)
from .model import (
    ModelSpec,
    ModelState,
    init_state,
    forward,
    features,
    set_trainable,
    attach_head,
    attach_multitask_heads,
    drop_head,
    gradcam,
    params_hash,
    save_checkpoint,
    load_checkpoint,
)
from .train import (
    OptimizerConfig,
    SchemeConfig,
    ArrayDataset,
    TrainingDiverged,
    SCHEME_NAMES,
    bce_loss,
    masked_multilabel_loss,
    train_stage,
    run_scheme,
    grid_select,
    default_sgd_grid,
)
from .eval import (
    auroc,
    PredictionSet,
    aggregate_by_patient,
    bootstrap_ci,
    auroc_with_ci,
    paired_test,
    EvalReport,
    shortcut_report,
    predictions_for,
)

__version__ = "0.1.0"
