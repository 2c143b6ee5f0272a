"""Shared-clock arithmetic for windows, queries, frames and labels.

Every schedule quantity is quantized to a 1 ms grid and kept as integer
milliseconds (rates as exact rationals), so boundary-sensitive counts such
as ``floor((T - window) / step) + 1`` are exact integer arithmetic rather
than float guesswork.  Seconds-valued accessors are derived views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

__all__ = [
    "ACTION_NAMES",
    "ACTION_VERB_IDS",
    "BACKGROUND_ID",
    "CONSUME_ACTION_IDS",
    "MAJOR_CLASSES",
    "N_ACTIONS",
    "N_VERBS",
    "VERB_MAJOR_CLASS",
    "VERB_NAMES",
    "LabelSpan",
    "LabelTrack",
    "QuerySchedule",
    "TimelineSpec",
    "WindowSchedule",
    "assign_query_labels",
    "frame_timestamps",
    "verb_of_action",
    "window_count",
]

MS_PER_S = 1000

# ---------------------------------------------------------------------------
# Label catalog: 29 actions grouped under 10 verbs and 4 major classes.
# The catalog is fixed; class ids are 0-based and stable across the package.
# ---------------------------------------------------------------------------

MAJOR_CLASSES = ("work", "play", "learn", "consume")

# (verb name, major class)
_VERBS = (
    ("operate", "work"),
    ("watch", "work"),
    ("play_screen", "play"),
    ("play_puzzle", "play"),
    ("play_object", "play"),
    ("write", "learn"),
    ("read", "learn"),
    ("draw", "learn"),
    ("eat", "consume"),
    ("drink", "consume"),
)

# (action name, verb name)
_ACTIONS = (
    ("operate_writer", "operate"),
    ("operate_slides", "operate"),
    ("operate_sheets", "operate"),
    ("operate_paint", "operate"),
    ("watch_video", "watch"),
    ("watch_tutorial", "watch"),
    ("play_pc_game", "play_screen"),
    ("play_mobile_game", "play_screen"),
    ("play_jigsaw", "play_puzzle"),
    ("play_crossword", "play_puzzle"),
    ("play_cube", "play_object"),
    ("play_blocks", "play_object"),
    ("write_notes", "write"),
    ("write_journal", "write"),
    ("write_letter", "write"),
    ("read_textbook", "read"),
    ("read_article", "read"),
    ("read_novel", "read"),
    ("draw_sketch", "draw"),
    ("draw_diagram", "draw"),
    ("eat_snack", "eat"),
    ("eat_fruit", "eat"),
    ("eat_candy", "eat"),
    ("drink_water", "drink"),
    ("drink_soda", "drink"),
    ("drink_juice", "drink"),
    ("drink_tea", "drink"),
    ("drink_coffee", "drink"),
    ("drink_milk", "drink"),
)

VERB_NAMES = tuple(name for name, _ in _VERBS)
VERB_MAJOR_CLASS = tuple(cls for _, cls in _VERBS)
ACTION_NAMES = tuple(name for name, _ in _ACTIONS)
ACTION_VERB_IDS = np.array([VERB_NAMES.index(verb) for _, verb in _ACTIONS], dtype=np.int64)
ACTION_VERB_IDS.setflags(write=False)

N_VERBS = len(VERB_NAMES)
N_ACTIONS = len(ACTION_NAMES)

#: Reserved id for query intervals that overlap no labeled span.
BACKGROUND_ID = -1

CONSUME_ACTION_IDS = frozenset(
    a for a in range(N_ACTIONS) if VERB_MAJOR_CLASS[ACTION_VERB_IDS[a]] == "consume"
)


def verb_of_action(action_id: int) -> int:
    """Verb id of an action id under the fixed catalog."""
    if not 0 <= action_id < N_ACTIONS:
        raise ValueError(f"action_id out of range: {action_id}")
    return int(ACTION_VERB_IDS[action_id])


# ---------------------------------------------------------------------------
# Quantization helpers.
# ---------------------------------------------------------------------------


def _to_ms(seconds: float, name: str) -> int:
    """Snap a seconds value to the 1 ms grid, rejecting off-grid inputs."""
    ms = float(seconds) * MS_PER_S
    snapped = round(ms)
    if not math.isfinite(ms) or abs(ms - snapped) > 1e-3:
        raise ValueError(f"{name} must lie on the 1 ms grid, got {seconds!r}")
    return int(snapped)


def _to_rate(rate, name: str) -> Fraction:
    """Exact rational view of a sampling rate in Hz."""
    if isinstance(rate, Fraction):
        frac = rate
    elif isinstance(rate, int):
        frac = Fraction(rate)
    else:
        value = float(rate)
        if not math.isfinite(value):
            raise ValueError(f"{name} must be finite, got {rate!r}")
        frac = Fraction(value).limit_denominator(10**6)
    if frac <= 0:
        raise ValueError(f"{name} must be positive, got {rate!r}")
    return frac


# ---------------------------------------------------------------------------
# Timeline and schedules.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimelineSpec:
    """Duration and stream rates of one recorded session."""

    duration_ms: int
    video_rate: Fraction
    signal_rate: Fraction

    def __post_init__(self):
        if self.duration_ms <= 0:
            raise ValueError(f"duration_ms must be positive, got {self.duration_ms}")
        for name in ("video_rate", "signal_rate"):
            rate = getattr(self, name)
            if not isinstance(rate, Fraction) or rate <= 0:
                raise ValueError(f"{name} must be a positive Fraction, got {rate!r}")

    @classmethod
    def create(cls, duration_s: float, video_hz, signal_hz) -> "TimelineSpec":
        return cls(
            duration_ms=_to_ms(duration_s, "duration_s"),
            video_rate=_to_rate(video_hz, "video_hz"),
            signal_rate=_to_rate(signal_hz, "signal_hz"),
        )

    @property
    def duration_s(self) -> float:
        return self.duration_ms / MS_PER_S

    def frame_count(self) -> int:
        """ceil(T * video_rate), evaluated exactly."""
        return math.ceil(Fraction(self.duration_ms, MS_PER_S) * self.video_rate)

    def sample_count(self) -> int:
        """ceil(T * signal_rate), evaluated exactly."""
        return math.ceil(Fraction(self.duration_ms, MS_PER_S) * self.signal_rate)


@dataclass(frozen=True)
class WindowSchedule:
    """Sliding windows of length ``window_ms`` advanced by ``step_ms``.

    Window i (1-based) covers ``[(i - 1) * step, (i - 1) * step + window)``
    seconds; the count is ``floor((T - window) / step) + 1``.
    """

    duration_ms: int
    window_ms: int
    step_ms: int

    def __post_init__(self):
        if self.window_ms <= 0:
            raise ValueError(f"window_ms must be positive, got {self.window_ms}")
        if self.step_ms <= 0:
            raise ValueError(f"step_ms must be positive, got {self.step_ms}")
        if self.duration_ms < self.window_ms:
            raise ValueError(
                f"window ({self.window_ms} ms) does not fit in duration ({self.duration_ms} ms)"
            )

    @classmethod
    def create(cls, duration_s: float, window_s: float, step_s: float) -> "WindowSchedule":
        return cls(
            duration_ms=_to_ms(duration_s, "duration_s"),
            window_ms=_to_ms(window_s, "window_s"),
            step_ms=_to_ms(step_s, "step_s"),
        )

    @property
    def count(self) -> int:
        return (self.duration_ms - self.window_ms) // self.step_ms + 1

    @property
    def window_s(self) -> float:
        return self.window_ms / MS_PER_S

    @property
    def step_s(self) -> float:
        return self.step_ms / MS_PER_S

    @property
    def duration_s(self) -> float:
        return self.duration_ms / MS_PER_S

    def interval(self, i: int) -> tuple[float, float]:
        """(start, end) of window ``i`` (1-based) in seconds."""
        if not 1 <= i <= self.count:
            raise IndexError(f"window index {i} outside 1..{self.count}")
        start_ms = (i - 1) * self.step_ms
        return start_ms / MS_PER_S, (start_ms + self.window_ms) / MS_PER_S

    def intervals(self) -> np.ndarray:
        """All window intervals as an (N, 2) float array."""
        starts = np.arange(self.count, dtype=np.float64) * self.step_ms
        return np.stack([starts, starts + self.window_ms], axis=1) / MS_PER_S


@dataclass(frozen=True)
class QuerySchedule:
    """Q equal query intervals tiling ``[0, T]`` without gaps."""

    query_count: int
    duration_ms: int

    def __post_init__(self):
        if self.query_count < 1:
            raise ValueError(f"query_count must be >= 1, got {self.query_count}")
        if self.duration_ms <= 0:
            raise ValueError(f"duration_ms must be positive, got {self.duration_ms}")

    @classmethod
    def create(cls, query_count: int, duration_s: float) -> "QuerySchedule":
        return cls(query_count=query_count, duration_ms=_to_ms(duration_s, "duration_s"))

    @property
    def duration_s(self) -> float:
        return self.duration_ms / MS_PER_S

    def _edge(self, j: int) -> float:
        # The last edge is pinned to the exact duration: j * T / Q can land
        # one ulp off T, which would break the no-gap tiling contract.
        if j == self.query_count:
            return self.duration_s
        return j * self.duration_s / self.query_count

    def interval(self, j: int) -> tuple[float, float]:
        """(start, end) of query ``j`` (1-based); end of j is bitwise the start of j+1."""
        if not 1 <= j <= self.query_count:
            raise IndexError(f"query index {j} outside 1..{self.query_count}")
        return self._edge(j - 1), self._edge(j)

    def intervals(self) -> np.ndarray:
        edges = np.arange(self.query_count + 1, dtype=np.float64) * self.duration_s / self.query_count
        edges[-1] = self.duration_s
        return np.stack([edges[:-1], edges[1:]], axis=1)


def window_count(duration_s: float, window_s: float, step_s: float) -> int:
    """Number of sliding windows of ``window_s`` advanced by ``step_s`` in ``duration_s``."""
    return WindowSchedule.create(duration_s, window_s, step_s).count


def frame_timestamps(start_s: float, window_s: float, frame_count: int) -> np.ndarray:
    """K timestamps centered in the K equal subdivisions of one window.

    tau_k = start + (2k - 1) / (2K) * window for k = 1..K.
    """
    if frame_count < 1:
        raise ValueError(f"frame_count must be >= 1, got {frame_count}")
    if window_s <= 0:
        raise ValueError(f"window_s must be positive, got {window_s}")
    k = np.arange(1, frame_count + 1, dtype=np.float64)
    return start_s + (2.0 * k - 1.0) / (2.0 * frame_count) * window_s


# ---------------------------------------------------------------------------
# Labels.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelSpan:
    """One labeled action occurrence, in integer milliseconds."""

    start_ms: int
    end_ms: int
    verb_id: int
    action_id: int

    def __post_init__(self):
        if self.start_ms < 0 or self.end_ms <= self.start_ms:
            raise ValueError(f"bad span bounds: [{self.start_ms}, {self.end_ms})")
        if not 0 <= self.action_id < N_ACTIONS:
            raise ValueError(f"action_id out of range: {self.action_id}")
        if self.verb_id != ACTION_VERB_IDS[self.action_id]:
            raise ValueError(
                f"verb_id {self.verb_id} does not match action {self.action_id} "
                f"({ACTION_NAMES[self.action_id]} belongs to {VERB_NAMES[ACTION_VERB_IDS[self.action_id]]})"
            )

    @property
    def start_s(self) -> float:
        return self.start_ms / MS_PER_S

    @property
    def end_s(self) -> float:
        return self.end_ms / MS_PER_S


@dataclass(frozen=True)
class LabelTrack:
    """Chronologically sorted, non-overlapping labeled spans."""

    spans: tuple[LabelSpan, ...]

    def __post_init__(self):
        object.__setattr__(self, "spans", tuple(self.spans))
        prev_end = 0
        for span in self.spans:
            if span.start_ms < prev_end:
                raise ValueError(f"spans overlap or are unsorted near t={span.start_ms} ms")
            prev_end = span.end_ms

    @classmethod
    def from_seconds(cls, entries) -> "LabelTrack":
        """Build from (start_s, end_s, action_id) triples; verbs come from the catalog."""
        spans = []
        for start_s, end_s, action_id in entries:
            spans.append(
                LabelSpan(
                    start_ms=_to_ms(start_s, "start_s"),
                    end_ms=_to_ms(end_s, "end_s"),
                    verb_id=verb_of_action(action_id),
                    action_id=action_id,
                )
            )
        return cls(spans=tuple(spans))

    def __len__(self) -> int:
        return len(self.spans)

    def end_ms(self) -> int:
        return self.spans[-1].end_ms if self.spans else 0


def assign_query_labels(track: LabelTrack, queries: QuerySchedule) -> list[tuple[int, int]]:
    """Majority-overlap (verb_id, action_id) per query interval.

    Overlap is accumulated per action id, so splitting a span into adjacent
    pieces with the same label never changes the result.  Queries with zero
    overlap get ``(BACKGROUND_ID, BACKGROUND_ID)``; exact ties go to the
    action whose earliest contributing span starts first.
    """
    labels: list[tuple[int, int]] = []
    for j in range(1, queries.query_count + 1):
        q_start, q_end = queries.interval(j)
        totals: dict[int, float] = {}
        earliest: dict[int, int] = {}
        for span in track.spans:
            overlap = min(q_end, span.end_s) - max(q_start, span.start_s)
            if overlap <= 0.0:
                continue
            totals[span.action_id] = totals.get(span.action_id, 0.0) + overlap
            if span.action_id not in earliest:
                earliest[span.action_id] = span.start_ms
        if not totals:
            labels.append((BACKGROUND_ID, BACKGROUND_ID))
            continue
        # Max total overlap; ties resolved by earliest span start, then id.
        action = min(totals, key=lambda a: (-totals[a], earliest[a], a))
        labels.append((int(ACTION_VERB_IDS[action]), action))
    return labels
