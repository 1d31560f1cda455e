"""Color portrait reconstruction from antique black-and-white photographs."""

from .generator import (
    ExtendedLatentCode,
    Generator,
    LatentCode,
    broadcast,
    load_weights,
    save_weights,
    synthesize,
    toy_generator,
)
from .imagecore import CRFParams, DegradationConfig, FilmModel, degrade, psnr
from .losses import EyeRegions, LossWeights
from .pipeline import ProjectionConfig, film_for_year, run
from .projector import ProjectionSettings, default_stages, project
from .sibling import (
    EncoderTrainConfig,
    SiblingEncoder,
    generate_training_set,
    load_encoder,
    predict_sibling,
    save_encoder,
    train_encoder,
)

__version__ = "0.1.0"

__all__ = [
    "CRFParams",
    "DegradationConfig",
    "EncoderTrainConfig",
    "ExtendedLatentCode",
    "EyeRegions",
    "FilmModel",
    "Generator",
    "LatentCode",
    "LossWeights",
    "ProjectionConfig",
    "ProjectionSettings",
    "SiblingEncoder",
    "broadcast",
    "default_stages",
    "degrade",
    "film_for_year",
    "generate_training_set",
    "load_encoder",
    "load_weights",
    "predict_sibling",
    "project",
    "psnr",
    "run",
    "save_encoder",
    "save_weights",
    "synthesize",
    "toy_generator",
    "__version__",
]
