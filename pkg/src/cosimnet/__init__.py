"""Siamese change detection with learned feature metrics, on a numpy autodiff core."""

from .data import Dataset, ImagePair, ScenePair, SynthConfig, generate_synthetic, load_dataset, split_dataset
from .encoder import EncoderConfig, encode, encode_pair, init_encoder
from .errors import DataError, DivergenceError, InvalidArgument, InvariantViolation, PreconditionError
from .evalsuite import EvalReport, evaluate
from .losses import ChangeMask, LossConfig
from .pipeline import (
    CosimNet,
    InferenceConfig,
    TrainConfig,
    evaluate_model,
    infer,
    load_model,
    save_model,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ChangeMask", "CosimNet", "DataError", "Dataset", "DivergenceError", "EncoderConfig", "EvalReport",
    "ImagePair", "InferenceConfig", "InvalidArgument", "InvariantViolation", "LossConfig",
    "PreconditionError", "ScenePair", "SynthConfig", "TrainConfig", "encode", "encode_pair", "evaluate",
    "evaluate_model", "generate_synthetic", "infer", "init_encoder", "load_dataset", "load_model",
    "save_model", "split_dataset", "train",
]
