"""Ball trajectory, ball state and possessor inference from player-centric inputs."""

from .datamodel import BallState, PitchSpec, Sequence
from .masking import MaskSpec
from .model import BallTransformer, ModelConfig, build_model
from .synthgen import GenParams, generate_dataset
from .training import TrainConfig, train

__version__ = "0.1.0"
