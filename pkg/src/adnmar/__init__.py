"""Unsupervised CT metal artifact reduction toolkit.

Synthesizes physically motivated metal artifacts (polychromatic projection
plus filtered back-projection), trains a disentanglement network on
unpaired artifact/clean images, and evaluates corrections with PSNR/SSIM
and qualitative montages.
"""

from .arrays import (
    CTImage,
    HUWindow,
    NormalizedImage,
    denormalize_hu,
    normalize_hu,
    read_array,
    read_image,
    write_array,
    write_image,
)
from .curation import (
    ClinicalClass,
    GroupedDataset,
    ImageRef,
    UnpairedBatch,
    classify_clinical,
    largest_connected_component,
    sample_unpaired,
    split_unsupervised,
)
from .evaluation import EvalPair, MetricsRow, artifact_transfer, evaluate_dataset, psnr, render_montage, ssim
from .losses import LossReport, LossWeights
from .networks import AdnModel, NetworkConfig, build_model, infer_correction_image
from .synthesis import (
    MaterialModel,
    MetalMask,
    ProjectionGeometry,
    Sinogram,
    Spectrum,
    fbp,
    make_metal_mask,
    make_phantom,
    polychromatic_project,
    radon,
    synthesize_pair,
)
from .training import TrainConfig, forward_graph, train, train_step

__version__ = "0.1.0"
