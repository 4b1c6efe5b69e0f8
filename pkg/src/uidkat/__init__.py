"""Unpaired image dehazing with group-rational KAN transformer blocks."""

__version__ = "0.1.0"

from .audit import AuditReport, audit_model
from .estimator import UnpairedDehazer
from .grkan import GRKANLayer, fit_silu_coefficients, rational_eval
from .kat_block import BlockConfig, KATBlock
from .losses import LossWeights, patch_nce_loss
from .metrics import eval_folder, psnr, ssim
from .networks import (Discriminator, Generator, GeneratorConfig,
                       build_variant, generator_config)
from .training import (TrainConfig, Trainer, UnpairedDataset, lr_at,
                       substream, synthesize_haze)

__all__ = [
    "AuditReport", "audit_model", "UnpairedDehazer", "GRKANLayer",
    "fit_silu_coefficients", "rational_eval", "BlockConfig", "KATBlock",
    "LossWeights", "patch_nce_loss", "eval_folder", "psnr", "ssim",
    "Discriminator", "Generator", "GeneratorConfig", "build_variant",
    "generator_config", "TrainConfig", "Trainer", "UnpairedDataset",
    "lr_at", "substream", "synthesize_haze", "__version__",
]
