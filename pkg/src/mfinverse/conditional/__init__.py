from .dataset import (
    ChannelStats,
    TrainingSet,
    feature_image,
    sample_training_inputs,
    velocity_image,
)
from .model import ConditionalModel, TrainingDiverged, NUGGET
from .network import GaussianFieldNet

__all__ = [
    "ChannelStats",
    "TrainingSet",
    "feature_image",
    "sample_training_inputs",
    "velocity_image",
    "ConditionalModel",
    "TrainingDiverged",
    "NUGGET",
    "GaussianFieldNet",
]
