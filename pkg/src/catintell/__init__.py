"""Two-stage cataract fundus pipeline: an unpaired degradation-synthesis GAN
and a paired restoration GAN trained on its output."""

from .generator import GeneratorConfig, build_generator
from .discriminator import DiscriminatorConfig, build_discriminator
from .trainer import TrainConfig, lr_at

__version__ = "0.1.0"

__all__ = [
    "DiscriminatorConfig",
    "GeneratorConfig",
    "TrainConfig",
    "build_discriminator",
    "build_generator",
    "lr_at",
]
