"""Semantic-aware exposure correction with vision-language pseudo ground truth."""

__version__ = "0.1.0"

from .encoders import PromptSet, StubSegmenter, StubVisionLanguageEncoder, build_encoder, build_segmenter, cosine_sim
from .estimator import ExposureCorrector, PromptTuner, PseudoGTGenerator, check_images
from .exceptions import (
    BackendError,
    ContractError,
    FormatError,
    IntegrityError,
    NoEntriesError,
    NumericError,
    SemexpError,
)
from .imaging import DatasetManifest, build_manifest, gamma_transform, load_image, psnr, save_image, ssim
from .losses import LossWeights, total_loss
from .network import ExposureNet, NetworkConfig, network_forward
from .pseudogt import classify_exposure, generate_pseudo_gt, tune_gamma, tune_prompts
from .training import EvalReport, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__all__ = [
    "BackendError",
    "ContractError",
    "DatasetManifest",
    "EvalReport",
    "ExposureCorrector",
    "ExposureNet",
    "FormatError",
    "IntegrityError",
    "LossWeights",
    "NetworkConfig",
    "NoEntriesError",
    "NumericError",
    "PromptSet",
    "PromptTuner",
    "PseudoGTGenerator",
    "SemexpError",
    "StubSegmenter",
    "StubVisionLanguageEncoder",
    "TrainConfig",
    "build_encoder",
    "build_manifest",
    "build_segmenter",
    "check_images",
    "classify_exposure",
    "cosine_sim",
    "evaluate",
    "gamma_transform",
    "generate_pseudo_gt",
    "load_checkpoint",
    "load_image",
    "network_forward",
    "psnr",
    "save_checkpoint",
    "save_image",
    "ssim",
    "total_loss",
    "train",
    "tune_gamma",
    "tune_prompts",
]
