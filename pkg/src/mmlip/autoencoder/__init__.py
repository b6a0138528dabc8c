from .mlp import Mlp, MlpSpec
from .model import ModelFusion, ModelSpec, MultimodalAutoencoder, default_spec
from .train import AdamState, EpochRecord, TrainConfig, TrainLog, adam_step, summarize, train, train_trials

__all__ = [
    "Mlp",
    "MlpSpec",
    "ModelFusion",
    "ModelSpec",
    "MultimodalAutoencoder",
    "default_spec",
    "AdamState",
    "EpochRecord",
    "TrainConfig",
    "TrainLog",
    "adam_step",
    "summarize",
    "train",
    "train_trials",
]
