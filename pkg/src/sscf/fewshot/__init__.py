"""Episodic data pipeline and train/evaluate loops."""

from .data import (
    Dataset,
    DatasetError,
    NoiseSpec,
    SplitSpec,
    add_gaussian_noise,
    load_event_dataset,
    load_image_dataset,
    make_synthetic_glyphs,
    read_spk,
    write_spk,
)
from .episodes import Episode, sample_episode
from .training import EvalResult, SGD, TrainConfig, TrainingDiverged, evaluate, train

__all__ = [
    "Dataset", "DatasetError", "NoiseSpec", "SplitSpec", "add_gaussian_noise",
    "load_event_dataset", "load_image_dataset", "make_synthetic_glyphs", "read_spk", "write_spk",
    "Episode", "sample_episode", "EvalResult", "SGD", "TrainConfig", "TrainingDiverged",
    "evaluate", "train",
]
