"""Synthetic sessions, dataset splits and the binary session container.

The generator produces paired streams with *controlled complementarity*:
each action has a fixed signature per modality, and a confusable pair
(a, b, rho_v, rho_b) makes each instance of ``a`` or ``b`` draw, with the
per-modality overlap probability, a signature shared by the whole pair
instead of its own.  With rho = 1 the two classes are indistinguishable in
that stream by construction; with rho = 0 they are cleanly separable.

Container layout (little-endian) - all multi-byte integers little-endian,
float payloads float32:

====================  =======================================================
magic                 4 bytes ``EGBR``
version               u16 (currently 1)
subject/scene/sess    u32 each
duration_ms           u64
video rate            u32 numerator, u32 denominator
signal rate           u32 numerator, u32 denominator
channels, H, W        u16 each
label count           u32
labels                per record: u64 start_ms, u64 end_ms, u8 verb, u8 action
blocks                tag (``RAWV``/``RAWB``/``FETV``/``FETB``), u64 byte
                      length, payload; feature blocks start with a 24-byte
                      sub-header (u32 rows, u32 dim, u32 window_ms,
                      u32 step_ms, u64 fingerprint)
====================  =======================================================
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .preprocessing import FeatureSequence, RawSignal, RawVideo
from .timeline import (
    CONSUME_ACTION_IDS,
    N_ACTIONS,
    LabelSpan,
    LabelTrack,
    TimelineSpec,
    verb_of_action,
)

__all__ = [
    "BadMagicError",
    "ConfusablePair",
    "ContainerFormatError",
    "GeneratorSpec",
    "Session",
    "SplitSpec",
    "TruncatedStreamError",
    "UnsupportedVersionError",
    "generate_dataset",
    "generate_session",
    "load_dataset",
    "make_splits",
    "read_session",
    "save_dataset",
    "session_filename",
    "split_sessions",
    "write_session",
]


class ContainerFormatError(ValueError):
    """Base class for malformed session containers."""


class BadMagicError(ContainerFormatError):
    """The stream does not start with the session-container magic."""


class UnsupportedVersionError(ContainerFormatError):
    """The container declares a format version this reader does not speak."""


class TruncatedStreamError(ContainerFormatError):
    """Declared counts or block lengths disagree with the available bytes."""


_MAGIC = b"EGBR"
_VERSION = 1
_BLOCK_TAGS = (b"RAWV", b"RAWB", b"FETV", b"FETB")


# ---------------------------------------------------------------------------
# Session value type.
# ---------------------------------------------------------------------------


@dataclass
class Session:
    """One recorded session: identity, timeline, labels and (optional) streams."""

    subject_id: int
    scene_id: int
    session_index: int
    timeline: TimelineSpec
    labels: LabelTrack
    channels: int
    frame_height: int
    frame_width: int
    video: RawVideo | None = None
    signal: RawSignal | None = None
    features_visual: FeatureSequence | None = None
    features_brain: FeatureSequence | None = None

    def __post_init__(self):
        for name in ("subject_id", "scene_id", "session_index"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("channels", "frame_height", "frame_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.labels.spans and self.labels.end_ms() > self.timeline.duration_ms:
            raise ValueError("label track extends past the session duration")
        if self.video is not None:
            if self.video.frame_count != self.timeline.frame_count():
                raise ValueError(
                    f"video has {self.video.frame_count} frames, timeline expects "
                    f"{self.timeline.frame_count()}"
                )
            if self.video.frames.shape[1:3] != (self.frame_height, self.frame_width):
                raise ValueError("video frame geometry does not match the session header")
            if self.video.rate != self.timeline.video_rate:
                raise ValueError("video rate does not match the timeline")
        if self.signal is not None:
            if self.signal.channels != self.channels:
                raise ValueError("signal channel count does not match the session header")
            if self.signal.length != self.timeline.sample_count():
                raise ValueError(
                    f"signal has {self.signal.length} samples, timeline expects "
                    f"{self.timeline.sample_count()}"
                )
            if self.signal.rate != self.timeline.signal_rate:
                raise ValueError("signal rate does not match the timeline")

    @property
    def duration_s(self) -> float:
        return self.timeline.duration_s


def session_filename(session: Session) -> str:
    return f"subject{session.subject_id}_scene{session.scene_id}_sess{session.session_index}.egbr"


# ---------------------------------------------------------------------------
# Synthetic generator.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfusablePair:
    """Two actions whose class-conditional stream distributions overlap.

    ``visual_overlap`` / ``brain_overlap`` are the probabilities that an
    instance of either action emits the pair-shared signature instead of its
    own in that modality.
    """

    action_a: int
    action_b: int
    visual_overlap: float
    brain_overlap: float

    def __post_init__(self):
        for name in ("action_a", "action_b"):
            value = getattr(self, name)
            if not 0 <= value < N_ACTIONS:
                raise ValueError(f"{name} out of range: {value}")
        if self.action_a == self.action_b:
            raise ValueError("a confusable pair needs two distinct actions")
        for name in ("visual_overlap", "brain_overlap"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class GeneratorSpec:
    """Knobs of the synthetic world.

    Subjects carry amplitude/latency/pace idiosyncrasies derived from their
    id; scenes set background statistics.  ``brain_lag_s`` shifts every brain
    signature by a fixed amount relative to its labeled interval, which
    places the disambiguating evidence in a different window than the visual
    evidence once the lag reaches the window length.
    """

    seed: int = 0
    subjects: int = 20
    scenes: int = 2
    sessions_per_subject: int = 1
    actions_per_session: int | None = None
    min_action_s: float = 2.0
    max_action_s: float = 8.0
    gap_s: float = 0.25
    consume_repeats: int = 3
    action_pool: tuple[int, ...] | None = None
    confusable_pairs: tuple[ConfusablePair, ...] = ()
    video_noise: float = 0.04
    brain_noise: float = 0.5
    video_rate_hz: float = 4.0
    brain_rate_hz: float = 128.0
    channels: int = 8
    frame_height: int = 8
    frame_width: int = 8
    subject_jitter: float = 0.1
    subject_latency_s: float = 0.05
    brain_lag_s: float = 0.0

    def __post_init__(self):
        if self.subjects < 1 or self.scenes < 1 or self.sessions_per_subject < 1:
            raise ValueError("subjects, scenes and sessions_per_subject must be >= 1")
        if not 0.1 <= self.min_action_s <= self.max_action_s:
            raise ValueError("need 0.1 <= min_action_s <= max_action_s")
        if self.gap_s < 0 or self.video_noise < 0 or self.brain_noise < 0:
            raise ValueError("noise and gap levels must be >= 0")
        if self.consume_repeats < 1:
            raise ValueError("consume_repeats must be >= 1")
        if self.action_pool is not None:
            if not self.action_pool:
                raise ValueError("action_pool must not be empty")
            for action in self.action_pool:
                if not 0 <= action < N_ACTIONS:
                    raise ValueError(f"action_pool id out of range: {action}")
        if self.actions_per_session is not None and self.actions_per_session < 1:
            raise ValueError("actions_per_session must be >= 1")
        seen: set[frozenset] = set()
        for pair in self.confusable_pairs:
            key = frozenset((pair.action_a, pair.action_b))
            if key in seen:
                raise ValueError(f"duplicate confusable pair {tuple(sorted(key))}")
            seen.add(key)

    def pool(self) -> tuple[int, ...]:
        return self.action_pool if self.action_pool is not None else tuple(range(N_ACTIONS))


# Signal amplitudes of the synthetic world.  Patterns are unit-RMS, so these
# are straight SNR knobs against the configured noise levels.
_VIDEO_BG_LEVEL = 0.5
_VIDEO_BG_VARIATION = 0.06
_VIDEO_PATTERN_AMP = 0.16
_BRAIN_BASE_AMP = 0.3
_BRAIN_PATTERN_AMP = 1.0

# Stream ids mixed into RNG seeds so every deterministic draw has its own lane.
_LANE_VIDEO_SIG = 11
_LANE_VIDEO_SHARED = 12
_LANE_BRAIN_SIG = 21
_LANE_BRAIN_SHARED = 22
_LANE_BRAIN_WAVE = 23
_LANE_BRAIN_WAVE_SHARED = 24
_LANE_SCENE = 31
_LANE_SUBJECT = 41
_LANE_SESSION = 51

# Class-specific oscillation band for the brain stream.  Kept inside the
# default band-pass range and below the Nyquist rate of the default
# decimation target, so the rhythm survives preprocessing.  Slow enough
# that per-subject latency (tens of milliseconds) barely moves its phase.
_BRAIN_WAVE_LOW_HZ = 0.8
_BRAIN_WAVE_HIGH_HZ = 2.2


def _seed_key(spec_seed: int) -> int:
    return int(spec_seed) & (2**63 - 1)


def _unit_rms(pattern: np.ndarray) -> np.ndarray:
    rms = math.sqrt(float(np.mean(pattern**2)))
    return pattern / rms if rms > 0 else pattern


def _video_signature(spec: GeneratorSpec, action: int, shared_with: int | None = None) -> np.ndarray:
    if shared_with is None:
        rng = np.random.default_rng([_seed_key(spec.seed), _LANE_VIDEO_SIG, action])
    else:
        a, b = sorted((action, shared_with))
        rng = np.random.default_rng([_seed_key(spec.seed), _LANE_VIDEO_SHARED, a, b])
    return _unit_rms(rng.standard_normal((spec.frame_height, spec.frame_width, 3)))


def _brain_signature(spec: GeneratorSpec, action: int, shared_with: int | None = None) -> np.ndarray:
    if shared_with is None:
        rng = np.random.default_rng([_seed_key(spec.seed), _LANE_BRAIN_SIG, action])
    else:
        a, b = sorted((action, shared_with))
        rng = np.random.default_rng([_seed_key(spec.seed), _LANE_BRAIN_SHARED, a, b])
    return _unit_rms(rng.standard_normal(spec.channels))


def _brain_wave(spec: GeneratorSpec, action: int, shared_with: int | None = None) -> tuple[float, float]:
    """Class-specific common-mode rhythm, as (frequency_hz, phase).

    The cross-channel signature averages toward zero under channel-mean
    pooling in the window encoder; the rhythm rides on every channel
    identically, so class identity also survives pooled features.
    """
    if shared_with is None:
        rng = np.random.default_rng([_seed_key(spec.seed), _LANE_BRAIN_WAVE, action])
    else:
        a, b = sorted((action, shared_with))
        rng = np.random.default_rng([_seed_key(spec.seed), _LANE_BRAIN_WAVE_SHARED, a, b])
    frequency = float(rng.uniform(_BRAIN_WAVE_LOW_HZ, _BRAIN_WAVE_HIGH_HZ))
    phase = float(rng.uniform(0.0, 2.0 * math.pi))
    return frequency, phase


def _scene_statistics(spec: GeneratorSpec, scene_id: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([_seed_key(spec.seed), _LANE_SCENE, scene_id])
    background = _VIDEO_BG_LEVEL + _VIDEO_BG_VARIATION * rng.standard_normal(
        (spec.frame_height, spec.frame_width, 3)
    )
    brain_baseline = _BRAIN_BASE_AMP * rng.standard_normal(spec.channels)
    return background, brain_baseline


def _subject_traits(spec: GeneratorSpec, subject_id: int) -> dict:
    rng = np.random.default_rng([_seed_key(spec.seed), _LANE_SUBJECT, subject_id])
    return {
        "video_gain": 1.0 + spec.subject_jitter * rng.uniform(-1.0, 1.0),
        "brain_gain": 1.0 + spec.subject_jitter * rng.uniform(-1.0, 1.0),
        "latency_s": spec.subject_latency_s * rng.uniform(-1.0, 1.0),
        "pace": 1.0 + 0.5 * spec.subject_jitter * rng.uniform(-1.0, 1.0),
    }


def _pair_lookup(spec: GeneratorSpec) -> dict[int, tuple[int, float, float]]:
    table: dict[int, tuple[int, float, float]] = {}
    for pair in spec.confusable_pairs:
        table[pair.action_a] = (pair.action_b, pair.visual_overlap, pair.brain_overlap)
        table[pair.action_b] = (pair.action_a, pair.visual_overlap, pair.brain_overlap)
    return table


def _session_script(spec: GeneratorSpec, rng: np.random.Generator) -> list[int]:
    base: list[int] = []
    for action in spec.pool():
        repeats = spec.consume_repeats if action in CONSUME_ACTION_IDS else 1
        base.extend([action] * repeats)
    if spec.actions_per_session is None:
        return [int(a) for a in rng.permutation(base)]
    script: list[int] = []
    while len(script) < spec.actions_per_session:
        script.extend(int(a) for a in rng.permutation(base))
    return script[: spec.actions_per_session]


def generate_session(spec: GeneratorSpec, subject_id: int, scene_id: int, session_index: int = 0) -> Session:
    """Deterministically synthesize one labeled two-stream session."""
    rng = np.random.default_rng(
        [_seed_key(spec.seed), _LANE_SESSION, subject_id, scene_id, session_index]
    )
    traits = _subject_traits(spec, subject_id)
    background, brain_baseline = _scene_statistics(spec, scene_id)
    pairs = _pair_lookup(spec)

    script = _session_script(spec, rng)
    durations_ms = []
    for _ in script:
        seconds = rng.uniform(spec.min_action_s, spec.max_action_s) * traits["pace"]
        durations_ms.append(max(100, int(round(seconds * 1000))))
    gaps_ms = [int(round(rng.uniform(0.0, 2.0 * spec.gap_s) * 1000)) for _ in range(len(script) + 1)]

    spans: list[LabelSpan] = []
    cursor = 0
    for action, duration, gap in zip(script, durations_ms, gaps_ms[:-1]):
        cursor += gap
        spans.append(
            LabelSpan(
                start_ms=cursor,
                end_ms=cursor + duration,
                verb_id=verb_of_action(action),
                action_id=action,
            )
        )
        cursor += duration
    duration_ms = cursor + gaps_ms[-1] + 1  # keep the last span strictly inside
    timeline = TimelineSpec.create(
        duration_ms / 1000.0, spec.video_rate_hz, spec.brain_rate_hz
    )

    # Per-instance signature choice: with probability rho the instance emits
    # the pair-shared signature in that modality.  Two draws per instance keep
    # the stream independent of whether the action belongs to a pair.
    instance_video: list[np.ndarray] = []
    instance_brain: list[np.ndarray] = []
    for span in spans:
        draw_v, draw_b = rng.random(), rng.random()
        partner = pairs.get(span.action_id)
        if partner is not None and draw_v < partner[1]:
            instance_video.append(_video_signature(spec, span.action_id, shared_with=partner[0]))
        else:
            instance_video.append(_video_signature(spec, span.action_id))
        if partner is not None and draw_b < partner[2]:
            instance_brain.append(
                (
                    _brain_signature(spec, span.action_id, shared_with=partner[0]),
                    _brain_wave(spec, span.action_id, shared_with=partner[0]),
                )
            )
        else:
            instance_brain.append(
                (_brain_signature(spec, span.action_id), _brain_wave(spec, span.action_id))
            )

    # Video stream: scene background + active signature + noise, clipped to [0, 1].
    frame_count = timeline.frame_count()
    frame_times = (np.arange(frame_count) + 0.5) / float(timeline.video_rate)
    frames = np.broadcast_to(background, (frame_count,) + background.shape).copy()
    for span, signature in zip(spans, instance_video):
        active = (frame_times >= span.start_s) & (frame_times < span.end_s)
        frames[active] += _VIDEO_PATTERN_AMP * traits["video_gain"] * signature
    frames += spec.video_noise * rng.standard_normal(frames.shape)
    video = RawVideo(rate=timeline.video_rate, frames=np.clip(frames, 0.0, 1.0).astype(np.float32))

    # Brain stream: per-channel baseline + (lagged) signature and rhythm + noise.
    sample_count = timeline.sample_count()
    sample_times = np.arange(sample_count) / float(timeline.signal_rate)
    samples = np.tile(brain_baseline[:, None], (1, sample_count))
    lag = traits["latency_s"] + spec.brain_lag_s
    for span, (signature, (wave_hz, wave_phase)) in zip(spans, instance_brain):
        onset = span.start_s + lag
        active = (sample_times >= onset) & (sample_times < span.end_s + lag)
        # Rhythm phase is locked to the action onset (an evoked response),
        # so every instance of a class emits the same waveform.
        wave = np.sin(2.0 * math.pi * wave_hz * (sample_times[active] - onset) + wave_phase)
        samples[:, active] += (
            _BRAIN_PATTERN_AMP
            * traits["brain_gain"]
            * (signature[:, None] + wave[None, :])
        )
    samples += spec.brain_noise * rng.standard_normal(samples.shape)
    signal = RawSignal(rate=timeline.signal_rate, samples=samples.astype(np.float32))

    return Session(
        subject_id=subject_id,
        scene_id=scene_id,
        session_index=session_index,
        timeline=timeline,
        labels=LabelTrack(spans=tuple(spans)),
        channels=spec.channels,
        frame_height=spec.frame_height,
        frame_width=spec.frame_width,
        video=video,
        signal=signal,
    )


def scene_of_subject(spec: GeneratorSpec, subject_id: int) -> int:
    """Block assignment of subjects to scenes (contiguous, covers all scenes)."""
    return min(spec.scenes - 1, subject_id * spec.scenes // spec.subjects)


def generate_dataset(spec: GeneratorSpec) -> list[Session]:
    """All sessions of the synthetic world, ordered by (subject, session index)."""
    sessions = []
    for subject in range(spec.subjects):
        scene = scene_of_subject(spec, subject)
        for index in range(spec.sessions_per_subject):
            sessions.append(generate_session(spec, subject, scene, index))
    return sessions


# ---------------------------------------------------------------------------
# Splits.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint subject lists (and held-out scenes in cross-scene mode)."""

    mode: str
    train_subjects: tuple[int, ...]
    val_subjects: tuple[int, ...]
    test_subjects: tuple[int, ...]
    test_scenes: tuple[int, ...] = ()

    def __post_init__(self):
        groups = (set(self.train_subjects), set(self.val_subjects), set(self.test_subjects))
        if groups[0] & groups[1] or groups[0] & groups[2] or groups[1] & groups[2]:
            raise ValueError("split subject lists must be pairwise disjoint")


def _largest_remainder(total: int, weights: tuple[int, ...]) -> list[int]:
    """Proportional integer allocation, largest remainder, minimum one each."""
    if total < len(weights):
        raise ValueError(f"cannot split {total} items into {len(weights)} non-empty groups")
    denom = sum(weights)
    quotas = [total * w / denom for w in weights]
    counts = [int(math.floor(q)) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    leftover = total - sum(counts)
    for index in sorted(range(len(weights)), key=lambda i: (-remainders[i], i))[:leftover]:
        counts[index] += 1
    # Guarantee non-empty groups by taking from the largest.
    while min(counts) == 0:
        counts[counts.index(max(counts))] -= 1
        counts[counts.index(min(counts))] += 1
    return counts


def make_splits(sessions: list[Session], mode: str, test_scenes: tuple[int, ...] | None = None) -> SplitSpec:
    """Partition subjects 22:6:6 (cross_subject) or hold out scenes for test
    and split the remaining subjects 28:6 (cross_subject_scene)."""
    if not sessions:
        raise ValueError("cannot split an empty dataset")
    subjects = sorted({s.subject_id for s in sessions})
    if mode == "cross_subject":
        if len(subjects) < 5:
            raise ValueError(f"cross_subject split needs >= 5 subjects, got {len(subjects)}")
        n_train, n_val, n_test = _largest_remainder(len(subjects), (22, 6, 6))
        return SplitSpec(
            mode=mode,
            train_subjects=tuple(subjects[:n_train]),
            val_subjects=tuple(subjects[n_train : n_train + n_val]),
            test_subjects=tuple(subjects[n_train + n_val :]),
        )
    if mode == "cross_subject_scene":
        scenes = sorted({s.scene_id for s in sessions})
        if len(scenes) < 2:
            raise ValueError("cross_subject_scene split needs at least 2 scenes")
        held_out = tuple(sorted(test_scenes)) if test_scenes else (scenes[-1],)
        for scene in held_out:
            if scene not in scenes:
                raise ValueError(f"held-out scene {scene} has no sessions")
        test_subjects = sorted({s.subject_id for s in sessions if s.scene_id in held_out})
        remaining = [s for s in subjects if s not in set(test_subjects)]
        if not test_subjects:
            raise ValueError("held-out scenes contain no subjects")
        n_train, n_val = _largest_remainder(len(remaining), (28, 6))
        return SplitSpec(
            mode=mode,
            train_subjects=tuple(remaining[:n_train]),
            val_subjects=tuple(remaining[n_train:]),
            test_subjects=tuple(test_subjects),
            test_scenes=held_out,
        )
    raise ValueError(f"unknown split mode {mode!r}")


def split_sessions(sessions: list[Session], split: SplitSpec) -> tuple[list[Session], list[Session], list[Session]]:
    """Materialize (train, val, test) session lists for a split."""
    train = [s for s in sessions if s.subject_id in set(split.train_subjects)]
    val = [s for s in sessions if s.subject_id in set(split.val_subjects)]
    if split.mode == "cross_subject_scene":
        test = [s for s in sessions if s.scene_id in set(split.test_scenes)]
        scenes = set(split.test_scenes)
        if any(s.scene_id in scenes for s in train + val):
            raise ValueError("train/val sessions leak a held-out scene")
    else:
        test = [s for s in sessions if s.subject_id in set(split.test_subjects)]
    if not train or not val or not test:
        raise ValueError("every split part needs at least one session")
    return train, val, test


# ---------------------------------------------------------------------------
# Binary container.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sHIIIQIIIIHHHI")
_LABEL = struct.Struct("<QQBB")
_BLOCK_HEAD = struct.Struct("<4sQ")
_FEATURE_SUBHEADER = struct.Struct("<IIIIQ")


def _rate_pair(rate: Fraction) -> tuple[int, int]:
    if rate.numerator > 0xFFFFFFFF or rate.denominator > 0xFFFFFFFF:
        raise ValueError(f"rate {rate} does not fit in u32/u32")
    return rate.numerator, rate.denominator


def session_to_bytes(session: Session) -> bytes:
    fv_num, fv_den = _rate_pair(session.timeline.video_rate)
    fb_num, fb_den = _rate_pair(session.timeline.signal_rate)
    out = bytearray()
    out += _HEADER.pack(
        _MAGIC,
        _VERSION,
        session.subject_id,
        session.scene_id,
        session.session_index,
        session.timeline.duration_ms,
        fv_num,
        fv_den,
        fb_num,
        fb_den,
        session.channels,
        session.frame_height,
        session.frame_width,
        len(session.labels.spans),
    )
    for span in session.labels.spans:
        out += _LABEL.pack(span.start_ms, span.end_ms, span.verb_id, span.action_id)
    if session.video is not None:
        payload = np.ascontiguousarray(session.video.frames, dtype="<f4").tobytes()
        out += _BLOCK_HEAD.pack(b"RAWV", len(payload))
        out += payload
    if session.signal is not None:
        payload = np.ascontiguousarray(session.signal.samples, dtype="<f4").tobytes()
        out += _BLOCK_HEAD.pack(b"RAWB", len(payload))
        out += payload
    for tag, features in ((b"FETV", session.features_visual), (b"FETB", session.features_brain)):
        if features is None:
            continue
        payload = _FEATURE_SUBHEADER.pack(
            features.count,
            features.dim,
            features.window_ms,
            features.step_ms,
            features.fingerprint,
        ) + np.ascontiguousarray(features.vectors, dtype="<f4").tobytes()
        out += _BLOCK_HEAD.pack(tag, len(payload))
        out += payload
    return bytes(out)


def session_from_bytes(blob: bytes) -> Session:
    if len(blob) >= 4 and blob[:4] != _MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedStreamError("header truncated")
    (
        _,
        version,
        subject_id,
        scene_id,
        session_index,
        duration_ms,
        fv_num,
        fv_den,
        fb_num,
        fb_den,
        channels,
        height,
        width,
        label_count,
    ) = _HEADER.unpack_from(blob, 0)
    if version != _VERSION:
        raise UnsupportedVersionError(f"container version {version} is not supported (reader speaks {_VERSION})")
    if fv_den == 0 or fb_den == 0 or fv_num == 0 or fb_num == 0:
        raise ContainerFormatError("zero rate numerator or denominator")
    offset = _HEADER.size
    spans = []
    for _ in range(label_count):
        if offset + _LABEL.size > len(blob):
            raise TruncatedStreamError(
                f"label table declares {label_count} records but the stream ends early"
            )
        start_ms, end_ms, verb_id, action_id = _LABEL.unpack_from(blob, offset)
        offset += _LABEL.size
        spans.append(LabelSpan(start_ms=start_ms, end_ms=end_ms, verb_id=verb_id, action_id=action_id))

    timeline = TimelineSpec(
        duration_ms=duration_ms,
        video_rate=Fraction(fv_num, fv_den),
        signal_rate=Fraction(fb_num, fb_den),
    )
    video = None
    signal = None
    features: dict[bytes, FeatureSequence] = {}
    while offset < len(blob):
        if offset + _BLOCK_HEAD.size > len(blob):
            raise TruncatedStreamError("block header truncated")
        tag, length = _BLOCK_HEAD.unpack_from(blob, offset)
        offset += _BLOCK_HEAD.size
        if tag not in _BLOCK_TAGS:
            raise ContainerFormatError(f"unknown block tag {tag!r}")
        if offset + length > len(blob):
            raise TruncatedStreamError(f"block {tag.decode()} declares {length} bytes but the stream ends early")
        payload = blob[offset : offset + length]
        offset += length
        if tag == b"RAWV":
            expected = timeline.frame_count() * height * width * 3 * 4
            if length != expected:
                raise TruncatedStreamError(
                    f"RAWV payload is {length} bytes, header geometry implies {expected}"
                )
            frames = np.frombuffer(payload, dtype="<f4").astype(np.float32)
            video = RawVideo(
                rate=timeline.video_rate,
                frames=frames.reshape(timeline.frame_count(), height, width, 3),
            )
        elif tag == b"RAWB":
            expected = channels * timeline.sample_count() * 4
            if length != expected:
                raise TruncatedStreamError(
                    f"RAWB payload is {length} bytes, header geometry implies {expected}"
                )
            samples = np.frombuffer(payload, dtype="<f4").astype(np.float32)
            signal = RawSignal(
                rate=timeline.signal_rate,
                samples=samples.reshape(channels, timeline.sample_count()),
            )
        else:
            if length < _FEATURE_SUBHEADER.size:
                raise TruncatedStreamError(f"feature block {tag.decode()} too short for its sub-header")
            rows, dim, window_ms, step_ms, fingerprint = _FEATURE_SUBHEADER.unpack_from(payload, 0)
            expected = _FEATURE_SUBHEADER.size + rows * dim * 4
            if length != expected:
                raise TruncatedStreamError(
                    f"feature block {tag.decode()} is {length} bytes, sub-header implies {expected}"
                )
            vectors = np.frombuffer(payload, dtype="<f4", offset=_FEATURE_SUBHEADER.size)
            features[tag] = FeatureSequence(
                modality="visual" if tag == b"FETV" else "brain",
                vectors=vectors.astype(np.float32).reshape(rows, dim),
                window_ms=window_ms,
                step_ms=step_ms,
                fingerprint=fingerprint,
            )

    return Session(
        subject_id=subject_id,
        scene_id=scene_id,
        session_index=session_index,
        timeline=timeline,
        labels=LabelTrack(spans=tuple(spans)),
        channels=channels,
        frame_height=height,
        frame_width=width,
        video=video,
        signal=signal,
        features_visual=features.get(b"FETV"),
        features_brain=features.get(b"FETB"),
    )


def write_session(session: Session, path) -> None:
    Path(path).write_bytes(session_to_bytes(session))


def read_session(path) -> Session:
    return session_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Dataset directories: one file per session plus a comma-separated manifest.
# ---------------------------------------------------------------------------

_MANIFEST_COLUMNS = (
    "file",
    "subject_id",
    "scene_id",
    "session_index",
    "duration_ms",
    "video_rate_num",
    "video_rate_den",
    "signal_rate_num",
    "signal_rate_den",
    "channels",
    "height",
    "width",
    "label_count",
)


def save_dataset(sessions: list[Session], directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [",".join(_MANIFEST_COLUMNS)]
    for session in sessions:
        name = session_filename(session)
        write_session(session, directory / name)
        fv_num, fv_den = _rate_pair(session.timeline.video_rate)
        fb_num, fb_den = _rate_pair(session.timeline.signal_rate)
        lines.append(
            ",".join(
                str(v)
                for v in (
                    name,
                    session.subject_id,
                    session.scene_id,
                    session.session_index,
                    session.timeline.duration_ms,
                    fv_num,
                    fv_den,
                    fb_num,
                    fb_den,
                    session.channels,
                    session.frame_height,
                    session.frame_width,
                    len(session.labels.spans),
                )
            )
        )
    manifest = directory / "manifest.csv"
    manifest.write_text("\n".join(lines) + "\n", encoding="ascii")
    return manifest


def load_dataset(directory) -> list[Session]:
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest.csv under {directory}")
    lines = manifest.read_text(encoding="ascii").strip().splitlines()
    if not lines or lines[0].split(",") != list(_MANIFEST_COLUMNS):
        raise ContainerFormatError("manifest header does not match the expected columns")
    sessions = []
    for line in lines[1:]:
        name = line.split(",")[0]
        sessions.append(read_session(directory / name))
    return sessions
