"""Mixture of interpretable experts distilled from a blackbox classifier."""

from .blackbox import Blackbox, BlackboxConfig, Projection, ProjectionConfig, train_blackbox, train_projection
from .config import ExperimentConfig, load_experiment_config
from .datagen import ConceptTriplet, SynthConfig, generate_synthetic, split
from .experts import EntropyLogicExpert, extract_fol
from .logic import FOLExplanation, Formula
from .metrics import MetricsReport, auroc, evaluate_moie
from .pipeline import DistillConfig, MoIEModel, predict, run_moie
from .selectors import CoveragePlan, Selector
from .transfer import FlopLedger, TransferConfig, finetune_blackbox, finetune_moie

__all__ = [
    "Blackbox", "BlackboxConfig", "Projection", "ProjectionConfig", "train_blackbox",
    "train_projection", "ExperimentConfig", "load_experiment_config", "ConceptTriplet",
    "SynthConfig", "generate_synthetic", "split", "EntropyLogicExpert", "extract_fol",
    "FOLExplanation", "Formula", "MetricsReport", "auroc", "evaluate_moie", "DistillConfig",
    "MoIEModel", "predict", "run_moie", "CoveragePlan", "Selector", "FlopLedger",
    "TransferConfig", "finetune_blackbox", "finetune_moie",
]
