"""Template-based defect segmentation with spectral registration.

A defect-free template and an inspected image are aligned by Fourier-Mellin
phase correlation, then a small encoder-decoder network splits their
difference into two streams and a masking head fuses them into a defect map.
"""

from .diffnet import ArchConfig, SegmenterNet, full_forward, init_params, load_params, save_params
from .estimators import DefectSegmenter, Sim2Registration
from .evalkit import average_precision, evaluate_dataset, max_f1, pr_curve
from .losses import defect_loss, irrelevance_loss, target_one_peak, total_loss
from .registration import PoseSim2, RegistrationResult, register, warp_sim2
from .simgen import GenConfig, SamplePair, gen_dataset, gen_pair, gen_template, read_dataset, write_dataset
from .training import TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "DefectSegmenter",
    "GenConfig",
    "PoseSim2",
    "RegistrationResult",
    "SamplePair",
    "SegmenterNet",
    "Sim2Registration",
    "TrainConfig",
    "Trainer",
    "average_precision",
    "defect_loss",
    "evaluate_dataset",
    "full_forward",
    "gen_dataset",
    "gen_pair",
    "gen_template",
    "init_params",
    "irrelevance_loss",
    "load_params",
    "max_f1",
    "pr_curve",
    "read_dataset",
    "register",
    "save_params",
    "target_one_peak",
    "total_loss",
    "train",
    "warp_sim2",
]
