"""Time-interval token fusion for two synchronized modalities.

The package turns a pair of synchronized streams (video frames and a
multichannel signal) into per-interval verb and action predictions:

* :mod:`timefuse.timeline` - window/query schedules and label assignment
  on a shared clock,
* :mod:`timefuse.preprocessing` - filtering, decimation and window
  encoders that produce per-window feature vectors,
* :mod:`timefuse.model` - interval-aware token fusion and a small
  transformer classifier,
* :mod:`timefuse.autodiff` - the reverse-mode tape the model trains on,
* :mod:`timefuse.data` - synthetic session generation, splits and the
  binary session container,
* :mod:`timefuse.training` / :mod:`timefuse.evaluation` - optimization,
  metrics, seed sweeps and the ablation grid,
* :mod:`timefuse.estimators` - scikit-learn style wrappers around the
  pipeline.
"""

from .timeline import (
    ACTION_NAMES,
    ACTION_VERB_IDS,
    BACKGROUND_ID,
    N_ACTIONS,
    N_VERBS,
    VERB_NAMES,
    LabelSpan,
    LabelTrack,
    QuerySchedule,
    TimelineSpec,
    WindowSchedule,
    assign_query_labels,
    frame_timestamps,
    window_count,
)
from .preprocessing import EncoderSpec, FeatureConfig, bandpass_filter, downsample, extract_features
from .model import ModelConfig, ModelParams
from .data import ConfusablePair, GeneratorSpec, Session, generate_dataset, generate_session, make_splits
from .training import RunResult, TrainConfig, run_seed_sweep, train_run
from .evaluation import EvalReport, evaluate_params, run_ablation_grid
from .estimators import BandpassFilter, Decimator, IntervalFusionClassifier, WindowFeatureExtractor

__version__ = "0.1.0"

__all__ = [
    "ACTION_NAMES",
    "ACTION_VERB_IDS",
    "BACKGROUND_ID",
    "BandpassFilter",
    "ConfusablePair",
    "Decimator",
    "EncoderSpec",
    "EvalReport",
    "FeatureConfig",
    "GeneratorSpec",
    "IntervalFusionClassifier",
    "LabelSpan",
    "LabelTrack",
    "ModelConfig",
    "ModelParams",
    "N_ACTIONS",
    "N_VERBS",
    "QuerySchedule",
    "RunResult",
    "Session",
    "TimelineSpec",
    "TrainConfig",
    "VERB_NAMES",
    "WindowFeatureExtractor",
    "WindowSchedule",
    "assign_query_labels",
    "bandpass_filter",
    "downsample",
    "evaluate_params",
    "extract_features",
    "frame_timestamps",
    "generate_dataset",
    "generate_session",
    "make_splits",
    "run_ablation_grid",
    "run_seed_sweep",
    "train_run",
    "window_count",
]
