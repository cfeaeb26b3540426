"""Bilevel sample re-weighting for unbalanced pairwise verification.

A small meta-miner network learns per-sample weights for unbalanced train
batches (1 positive : C negatives) under the guidance of balanced meta
batches; the kinship relation model is then trained on the re-weighted loss.
Everything runs on a deterministic float64 autodiff substrate with a
finite-difference oracle, verified on synthetic pair data against a
closed-form Bayes classifier.
"""

from .metrics import EvalReport, accuracy, positive_weight_ratio, roc_auc
from .models import (
    KinshipConfig,
    KinshipParams,
    MinerConfig,
    MinerParams,
    bce_per_sample,
    encode,
    init_kinship,
    init_miner,
    kinship_batch,
    kinship_forward,
    load_checkpoint,
    miner_forward,
    save_checkpoint,
)
from .numerics import (
    AdamState,
    ContractError,
    GradSet,
    NumericError,
    ParamSet,
    Rng,
    Tensor,
    adam_step,
    finite_diff_grad,
    sgd_step,
    value_and_grad,
)
from .pairdata import (
    Batch,
    Entity,
    FoldSpec,
    GeneratorMeta,
    PairDataset,
    PairSample,
    SamplerConfig,
    balanced_eval_pairs,
    bayes_llr,
    bayes_scores,
    generate_synthetic,
    load_dataset,
    make_folds,
    negative_count,
    sample_balanced_batch,
    sample_unbalanced_batch,
    save_dataset,
)
from .training import (
    EpochRecord,
    FoldResult,
    OptState,
    TrainConfig,
    TrainState,
    WeightVector,
    actual_step,
    baseline_loss,
    cross_validate,
    meta_gradient,
    meta_loss,
    meta_step,
    normalize_weights,
    run_fold,
    train,
    virtual_step,
    weighted_train_loss,
)

__version__ = "0.1.0"
