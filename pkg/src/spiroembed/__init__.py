"""Self-supervised spirogram embeddings for right heart failure screening.

Flow-volume curves are embedded by a BYOL-trained convolutional encoder,
fused with demographics and classified by an ensemble of boosted trees.
"""

from .augment import AugmentDistribution, AugmentSpec, AugmentTemplate, sample_pair
from .byol import EncoderCheckpoint, EncoderSpec, SlseConfig, byol_loss, embed, ema_update, pretrain, train_step
from .cohort import DemographicVector, SubjectRecord, derive_labels
from .config import RunConfig, load_config
from .evaluation import EvalReport, auroc, characteristics_table, ranksum_pvalue, subgroup_analysis
from .gbdt import GbdtModel, GbdtParams, tree_shap
from .pipeline import (
    EnsembleBundle,
    PipelineConfig,
    fuse,
    predict,
    run_ablation,
    run_experiment,
    split_dataset,
    train_ensemble,
    train_probe,
)
from .spiro import FlowVolumeCurve, VolumeTimeSeries, check_blow_validity, derive_features, make_flow_volume
from .synth import CohortConfig, generate_cohort

__version__ = "0.1.0"

__all__ = [
    "AugmentDistribution",
    "AugmentSpec",
    "AugmentTemplate",
    "sample_pair",
    "EncoderCheckpoint",
    "EncoderSpec",
    "SlseConfig",
    "byol_loss",
    "embed",
    "ema_update",
    "pretrain",
    "train_step",
    "DemographicVector",
    "SubjectRecord",
    "derive_labels",
    "RunConfig",
    "load_config",
    "EvalReport",
    "auroc",
    "characteristics_table",
    "ranksum_pvalue",
    "subgroup_analysis",
    "GbdtModel",
    "GbdtParams",
    "tree_shap",
    "EnsembleBundle",
    "PipelineConfig",
    "fuse",
    "predict",
    "run_ablation",
    "run_experiment",
    "split_dataset",
    "train_ensemble",
    "train_probe",
    "FlowVolumeCurve",
    "VolumeTimeSeries",
    "check_blow_validity",
    "derive_features",
    "make_flow_volume",
    "CohortConfig",
    "generate_cohort",
]
