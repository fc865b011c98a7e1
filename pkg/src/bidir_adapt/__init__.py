"""Bidirectional adversarial domain adaptation.

Two image-translation GANs (source -> target and target -> source) are trained
jointly with two classifiers, self-labeling of translated target images and a
class-consistency constraint on the source -> target -> source round trip.
"""

from .config import ExperimentConfig, TrainingSchedule, desk_preset, load_config
from .datasets import DomainPair, ImageBatch, LabelBatch, load_domain_pair, synthetic_pair
from .estimator import BidirectionalAdaptationClassifier
from .inference import EnsembleWeights, ensemble_predict, select_sigma
from .losses import LossReport, LossWeights, total_loss
from .metrics import SsimConfig, accuracy, embed_2d, mean_intra_class_ssim, ssim
from .models import ArchConfig, Networks
from .trainer import Trainer, train

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "BidirectionalAdaptationClassifier", "DomainPair", "EnsembleWeights", "ExperimentConfig",
    "ImageBatch", "LabelBatch", "LossReport", "LossWeights", "Networks", "SsimConfig", "Trainer",
    "TrainingSchedule", "accuracy", "desk_preset", "embed_2d", "ensemble_predict", "load_config",
    "load_domain_pair", "mean_intra_class_ssim", "select_sigma", "ssim", "synthetic_pair", "total_loss", "train",
]
