"""Discriminative proposal sampling for weakly-supervised object localization."""

from dips.backbones import (
    AttentionStack,
    BackboneConfig,
    ClassifierOutput,
    PretrainedAttentionProvider,
    SyntheticAttentionProvider,
    SyntheticClassifier,
    softmax_with_temperature,
)
from dips.errors import (
    CheckpointError,
    ConfigurationError,
    DegenerateInputError,
    InvalidInputError,
    InvalidParameterError,
    TrainingAbortedError,
    UndefinedLossError,
)
from dips.harvest import HarvestConfig, Proposal, harvest_proposals
from dips.losses import LossWeights, AffinityParams, total_loss
from dips.model import LocalizationMap, ModelConfig, UNet
from dips.sampling import PseudoLabelMap, SamplerConfig, build_pseudo_labels

__version__ = "0.1.0"
