"""Self-supervised spatiotemporal representation learning with a linear-cost encoder."""

from .data import SeriesTensor, SynthConfig, load_container, save_container, synth_generate
from .model import ModelConfig, STReP, parameter_census
from .trainer import TrainConfig, encode_dataset, load_checkpoint, pretrain, save_checkpoint

__version__ = "0.1.0"
