"""Masked self-supervised MLP pre-training for tabular prediction under
missing data, with the full evaluation protocol: grouped cross-validation,
missing-value strategies, metrics, paired tests, ablations, and feature
importance."""

from .data import (
    Dataset,
    DatasetSchema,
    FeatureMatrix,
    LabeledView,
    Scaler,
    SynthConfig,
    Variable,
    apply_scaler,
    compute_missing_rate,
    derive_labels,
    ecri_schema,
    fit_scaler,
    generate_synthetic,
    load_csv,
    write_csv,
)
from .errors import (
    ConfigError,
    ContractError,
    DegenerateTestError,
    DerivationError,
    IntegrityError,
    MaskMlpError,
    NumericError,
    ParseError,
    SchemaError,
    ShapeError,
    StateError,
    TrainingError,
)
from .evaluation import (
    EvalReport,
    FoldPlan,
    confusion_metrics,
    evaluate,
    feature_importance,
    make_folds,
    paired_t_test,
    pr_auc,
    quantile_breakdown,
    roc_auc,
    subgroup_breakdown,
)
from .missing import FillPolicy, MaskSpec, mask_augment, materialize
from .models import (
    Classifier,
    TrainConfig,
    export_embeddings,
    finetune,
    load_classifier,
    predict_proba,
    save_classifier,
    train_baseline,
)
from .nn import AdamState, Layer, Mlp, adam_step, backward, forward, grad_check, init_mlp
from .pipeline import RunConfig, run_benchmark, run_feature_importance, run_loss_ablation
from .pretrain import (
    PretextConfig,
    contrastive_loss,
    cosine_embedding_loss,
    mse_embedding_loss,
    pretrain,
    triplet_loss,
    vime_pretext_loss,
)

__version__ = "0.1.0"
