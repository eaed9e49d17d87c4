"""synertab: unsupervised synergy loop between a black-box annotator and
a small tabular model.

A noisy annotator soft-labels an unlabeled binary-classification table,
a small network pair is taught from those labels with loss-partitioned
semi-supervised training, and the annotator is reverse-tuned on the
student's sharpened outputs, iterating under a quality-control policy.
"""

__version__ = "0.1.0"

from .annotator import (
    FinetuneCorpus,
    NetworkProvider,
    SimulatedOracle,
    SimulatedOracleConfig,
    SoftLabelSet,
    annotate_dataset,
    build_finetune_corpus,
    build_prompt,
    finetune,
    parse_confidence,
)
from .data import (
    Column,
    Dataset,
    FeatureSchema,
    Split,
    load_csv,
    load_schema,
    standardize,
    stratified_split,
)
from .errors import (
    ConfigError,
    ParseError,
    ProviderError,
    ProviderUnreachable,
    StateError,
    SynertabError,
    TrainingError,
)
from .loop import (
    LoopRecord,
    LoopResult,
    LoopState,
    QualityControlPolicy,
    evaluate_policy,
    run_loop,
)
from .metrics import (
    EvalReport,
    ShapleyEstimate,
    auc,
    build_eval_report,
    confidence_bin_report,
    mc_shapley,
    random_guessing_baseline,
)
from .model import MLPClassifier, predict_proba, soft_cross_entropy
from .teaching import (
    GmmFit,
    ModelPair,
    TeachReport,
    TrainConfig,
    clean_posterior,
    co_guess,
    co_refine,
    fit_gmm_1d,
    mixup,
    partition,
    per_sample_losses,
    sharpen,
    teach,
)
