"""Conditional multimodal autoencoder with a from-scratch autodiff tape."""

from .data import GlyphConfig, MultimodalDataset, attribute_oracle, generate_dataset, render_glyph
from .gaussian import GaussianDiag, kl_diag, make_rng, parzen_log_density, reparam_sample
from .model import (
    BoundConfig,
    CmmaParams,
    CvaeParams,
    cmma_bound,
    cvae_bound,
    generate_from_attributes,
    infer_attributes,
    modify,
    reconstruct,
)
from .train import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
