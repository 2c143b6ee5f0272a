"""Estimator-style wrappers around the signal, feature and model layers.

These follow the familiar fit/transform/predict conventions: flat keyword
constructors whose arguments are stored verbatim (so ``get_params`` /
``set_params`` and grid-search tooling work), validation deferred to
``fit``, and learned state stored on trailing-underscore attributes.

Samples here are :class:`~timefuse.data.Session` objects, not feature
matrices: a session carries two synchronized streams plus its label track,
so ``y`` is never passed separately.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from . import model as m
from .autodiff import no_grad
from .data import Session
from .model import ModelConfig
from .preprocessing import FeatureConfig, RawSignal, bandpass_filter, downsample, extract_features
from .training import TrainConfig, fit_params, prepare_session

__all__ = [
    "BandpassFilter",
    "Decimator",
    "IntervalFusionClassifier",
    "WindowFeatureExtractor",
]


def _as_signal_list(X):
    if isinstance(X, RawSignal):
        return [X], True
    if isinstance(X, (list, tuple)) and all(isinstance(x, RawSignal) for x in X):
        return list(X), False
    raise TypeError("expected a RawSignal or a sequence of RawSignal objects")


def _as_session_list(X) -> list[Session]:
    if isinstance(X, Session):
        return [X]
    if isinstance(X, (list, tuple)) and X and all(isinstance(x, Session) for x in X):
        return list(X)
    raise TypeError("expected a Session or a non-empty sequence of Session objects")


class BandpassFilter(TransformerMixin, BaseEstimator):
    """Zero-phase band-pass for multichannel signals.

    Stateless: ``fit`` only validates the band. ``transform`` accepts a
    :class:`RawSignal` (returned as one) or a sequence of them (returned as
    a list), never mutating its input.
    """

    def __init__(self, low_hz: float = 0.5, high_hz: float = 50.0, order: int = 4):
        self.low_hz = low_hz
        self.high_hz = high_hz
        self.order = order

    def fit(self, X=None, y=None):
        if not 0 < self.low_hz < self.high_hz:
            raise ValueError(f"need 0 < low_hz < high_hz, got {self.low_hz}, {self.high_hz}")
        if self.order < 1:
            raise ValueError(f"order must be >= 1, got {self.order}")
        return self

    def transform(self, X):
        self.fit()
        signals, single = _as_signal_list(X)
        out = [
            bandpass_filter(s, low_hz=self.low_hz, high_hz=self.high_hz, order=self.order)
            for s in signals
        ]
        return out[0] if single else out


class Decimator(TransformerMixin, BaseEstimator):
    """Integer-ratio downsampling of multichannel signals to ``target_hz``."""

    def __init__(self, target_hz: float = 64.0):
        self.target_hz = target_hz

    def fit(self, X=None, y=None):
        if self.target_hz <= 0:
            raise ValueError(f"target_hz must be positive, got {self.target_hz}")
        return self

    def transform(self, X):
        self.fit()
        signals, single = _as_signal_list(X)
        out = [downsample(s, self.target_hz) for s in signals]
        return out[0] if single else out


class WindowFeatureExtractor(TransformerMixin, BaseEstimator):
    """Attach per-window feature matrices to sessions.

    ``transform`` returns new sessions whose ``features_visual`` /
    ``features_brain`` fields are filled from their raw streams (band-pass,
    optional decimation, then windowed encoding), leaving inputs untouched.
    """

    def __init__(
        self,
        window_s: float = 2.0,
        step_s: float = 2.0,
        frames_per_window: int = 4,
        visual_dim: int = 32,
        brain_dim: int = 16,
        encoder_seed: int = 7,
        band_low_hz: float = 0.5,
        band_high_hz: float = 50.0,
        downsample_to_hz: float | None = 64.0,
    ):
        self.window_s = window_s
        self.step_s = step_s
        self.frames_per_window = frames_per_window
        self.visual_dim = visual_dim
        self.brain_dim = brain_dim
        self.encoder_seed = encoder_seed
        self.band_low_hz = band_low_hz
        self.band_high_hz = band_high_hz
        self.downsample_to_hz = downsample_to_hz

    def _feature_config(self) -> FeatureConfig:
        return FeatureConfig(
            window_s=self.window_s,
            step_s=self.step_s,
            frames_per_window=self.frames_per_window,
            visual_dim=self.visual_dim,
            brain_dim=self.brain_dim,
            encoder_seed=self.encoder_seed,
            band_low_hz=self.band_low_hz,
            band_high_hz=self.band_high_hz,
            downsample_to_hz=self.downsample_to_hz,
        )

    def fit(self, X=None, y=None):
        self._feature_config()
        return self

    def transform(self, X):
        features = self._feature_config()
        out = []
        for session in _as_session_list(X):
            schedule = features.schedule_for(session.duration_s)
            visual, brain = extract_features(
                session,
                schedule,
                features.frames_per_window,
                features.visual_encoder(),
                features.brain_encoder(),
                band=(features.band_low_hz, features.band_high_hz),
                downsample_to=features.downsample_to_hz,
            )
            out.append(replace(session, features_visual=visual, features_brain=brain))
        return out


class IntervalFusionClassifier(ClassifierMixin, BaseEstimator):
    """Two-stream interval-token transformer as a classifier over sessions.

    ``fit(sessions)`` trains on the label tracks the sessions carry;
    ``predict(sessions)`` returns one label per query interval, shape
    ``(n_sessions, query_count)``.
    """

    def __init__(
        self,
        token_dim: int = 16,
        encoder_layers: int = 2,
        attention_heads: int = 4,
        ffn_dim: int = 64,
        query_count: int = 4,
        fusion: str = "temporal",
        use_embedding_layer: bool = True,
        use_interval_mlp: bool = True,
        use_modality_embedding: bool = True,
        epochs: int = 50,
        batch_size: int = 4,
        learning_rate: float = 1e-3,
        optimizer: str = "adam",
        brain_loss_weight: float = 1.0,
        seed: int = 0,
        window_s: float = 2.0,
        step_s: float = 2.0,
        frames_per_window: int = 4,
        visual_dim: int = 32,
        brain_dim: int = 16,
        encoder_seed: int = 7,
        task: str = "action",
    ):
        self.token_dim = token_dim
        self.encoder_layers = encoder_layers
        self.attention_heads = attention_heads
        self.ffn_dim = ffn_dim
        self.query_count = query_count
        self.fusion = fusion
        self.use_embedding_layer = use_embedding_layer
        self.use_interval_mlp = use_interval_mlp
        self.use_modality_embedding = use_modality_embedding
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.brain_loss_weight = brain_loss_weight
        self.seed = seed
        self.window_s = window_s
        self.step_s = step_s
        self.frames_per_window = frames_per_window
        self.visual_dim = visual_dim
        self.brain_dim = brain_dim
        self.encoder_seed = encoder_seed
        self.task = task

    # -- config assembly ---------------------------------------------------

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            token_dim=self.token_dim,
            encoder_layers=self.encoder_layers,
            attention_heads=self.attention_heads,
            ffn_dim=self.ffn_dim,
            query_count=self.query_count,
            visual_feature_dim=self.visual_dim,
            brain_feature_dim=self.brain_dim,
            fusion=self.fusion,
            use_embedding_layer=self.use_embedding_layer,
            use_interval_mlp=self.use_interval_mlp,
            use_modality_embedding=self.use_modality_embedding,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            optimizer=self.optimizer,
            brain_loss_weight=self.brain_loss_weight,
            seed=self.seed,
        )

    def _feature_config(self) -> FeatureConfig:
        return FeatureConfig(
            window_s=self.window_s,
            step_s=self.step_s,
            frames_per_window=self.frames_per_window,
            visual_dim=self.visual_dim,
            brain_dim=self.brain_dim,
            encoder_seed=self.encoder_seed,
        )

    def _headline_branch(self) -> str:
        return "brain" if self.fusion == "brain_only" else "visual"

    # -- estimator API -----------------------------------------------------

    def fit(self, X, y=None):
        if y is not None:
            raise ValueError(
                "labels are read from each session's label track; pass y=None"
            )
        if self.task not in m.TASKS:
            raise ValueError(f"task must be one of {m.TASKS}, got {self.task!r}")
        sessions = _as_session_list(X)
        self.model_config_ = self._model_config()
        self.feature_config_ = self._feature_config()
        train_config = self._train_config()
        prepared = [
            prepare_session(s, self.feature_config_, self.model_config_.query_count)
            for s in sessions
        ]
        self.params_ = fit_params(prepared, self.model_config_, train_config)
        self.classes_ = np.arange(self.model_config_.class_count(self.task), dtype=np.int64)
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise RuntimeError("this classifier is not fitted yet; call fit first")

    def predict_proba(self, X) -> np.ndarray:
        """Per-query class probabilities, shape (n_sessions, query_count, n_classes)."""
        self._check_fitted()
        sessions = _as_session_list(X)
        prepared = [
            prepare_session(s, self.feature_config_, self.model_config_.query_count)
            for s in sessions
        ]
        branch = self._headline_branch()
        chunks = []
        with no_grad():
            for start in range(0, len(prepared), 8):
                chunk = prepared[start : start + 8]
                _, logits_map = m.forward_batch(
                    self.model_config_,
                    self.params_,
                    [(p.visual, p.brain, p.windows, p.queries) for p in chunk],
                )
                chunks.append(logits_map[branch][self.task]["probs"])
        return np.concatenate(chunks, axis=0)

    def predict(self, X) -> np.ndarray:
        """Per-query labels, shape (n_sessions, query_count)."""
        return self.predict_proba(X).argmax(axis=-1)

    def score(self, X, y=None) -> float:
        """Mean accuracy over non-background queries of the sessions' own labels."""
        if y is not None:
            raise ValueError("labels are read from each session's label track; pass y=None")
        self._check_fitted()
        sessions = _as_session_list(X)
        predictions = self.predict(sessions)
        correct = 0
        total = 0
        for row, session in enumerate(sessions):
            prepared = prepare_session(session, self.feature_config_, self.model_config_.query_count)
            labels = prepared.labels[self.task]
            mask = labels >= 0
            correct += int((predictions[row][mask] == labels[mask]).sum())
            total += int(mask.sum())
        if total == 0:
            raise ValueError("no non-background queries to score")
        return correct / total
