"""Multiple-in-one image restoration conditioned on language-model priors.

A degraded image is described by a multimodal provider, the descriptions are
embedded, a clean reference is synthesized, and a U-shaped restoration
network consumes all three priors: degradation tokens modulate the encoder,
content tokens steer the bottleneck, and the reference image guides the
decoder.
"""

from .bundles import BundleStore, PriorBuilder, PriorBundle, build_bundle
from .errors import LmdirError
from .estimator import RestorationEstimator
from .evaluation import EvalReport, export_embeddings, psnr, run_suite, ssim
from .network import NetworkConfig, RestorationNetwork, load_model, save_model
from .providers import PriorTexts, ProviderConfig, TextEmbedding, providers_for
from .training import TrainConfig, desk_profile, paper_profile, train

__version__ = "0.1.0"

__all__ = [
    "BundleStore",
    "EvalReport",
    "LmdirError",
    "NetworkConfig",
    "PriorBuilder",
    "PriorBundle",
    "PriorTexts",
    "ProviderConfig",
    "RestorationEstimator",
    "RestorationNetwork",
    "TextEmbedding",
    "TrainConfig",
    "__version__",
    "build_bundle",
    "desk_profile",
    "export_embeddings",
    "load_model",
    "paper_profile",
    "providers_for",
    "psnr",
    "run_suite",
    "save_model",
    "ssim",
    "train",
]
