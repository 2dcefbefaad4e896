"""Anomaly expert for zero-shot visual anomaly detection over frozen-encoder tokens."""

from .features import CropLayout, FeatureBundle, anyres_layout, load_bundle, save_bundle
from .model import forward, predict
from .params import ExpertConfig, ExpertParams, init_params, load_checkpoint, save_checkpoint
from .scoring import PromptLayout, SelectionResult, assemble_prompt, select_adverb
from .synth import SynthConfig, synth_generate
from .training import TrainConfig, train, train_stage1

__all__ = [
    "CropLayout",
    "ExpertConfig",
    "ExpertParams",
    "FeatureBundle",
    "PromptLayout",
    "SelectionResult",
    "SynthConfig",
    "TrainConfig",
    "anyres_layout",
    "assemble_prompt",
    "forward",
    "init_params",
    "load_bundle",
    "load_checkpoint",
    "predict",
    "save_bundle",
    "save_checkpoint",
    "select_adverb",
    "synth_generate",
    "train",
    "train_stage1",
]

__version__ = "0.1.0"
