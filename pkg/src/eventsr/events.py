"""Event data model, validation, and stacking into frame tensors.

An event is a single asynchronous brightness-change record (t, x, y, p) with
t in integer microseconds and polarity p in {-1, +1}. Streams keep events in
a packed numpy record array (see formats.EVENT_DTYPE) sorted by timestamp.

Stacks render groups of events into n frames: either a fixed count per frame
(stack_by_number) or a fixed time window per frame (stack_by_time). Rendering
accumulates signed polarity per pixel, clips the sum to +-clip events, and
maps it affinely to [0, 1] with 0.5 as the no-event gray level.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .errors import InsufficientEventsError
from .formats import EVENT_DTYPE

DEFAULT_RENDER_CLIP = 3.0


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


@dataclass(frozen=True)
class EventStream:
    """Time-sorted events plus the sensor geometry they live on."""

    events: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        if self.events.dtype != EVENT_DTYPE:
            raise ValueError(f"events dtype must be {EVENT_DTYPE}")

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[Event]:
        for t, x, y, p in self.events:
            yield Event(int(t), int(x), int(y), int(p))


@dataclass(frozen=True)
class EventStack:
    """n rendered event frames plus bookkeeping about their source slices.

    frames: (n, height, width) float array with values in [0, 1].
    frame_event_ranges: per frame, the [start, end) index range into the
        source stream that it rendered.
    events_per_frame: fixed event count per frame (0 for time-based stacks).
    t_span: (first, last) microsecond timestamp covered by the stack.
    """

    frames: np.ndarray
    frame_event_ranges: tuple[tuple[int, int], ...]
    events_per_frame: int
    t_span: tuple[int, int]

    def __post_init__(self):
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be (n, H, W), got shape {self.frames.shape}")
        if len(self.frame_event_ranges) != self.frames.shape[0]:
            raise ValueError("one event range per frame required")

    @property
    def n(self) -> int:
        return int(self.frames.shape[0])


def _as_columns(raw) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Coerce events given as records, (N,4) arrays, or tuples into columns."""
    if isinstance(raw, np.ndarray) and raw.dtype == EVENT_DTYPE:
        return (raw["t"].astype(np.int64), raw["x"].astype(np.int64),
                raw["y"].astype(np.int64), raw["p"].astype(np.int64))
    arr = np.asarray(list(raw) if not isinstance(raw, np.ndarray) else raw)
    if arr.size == 0:
        z = np.zeros(0, dtype=np.int64)
        return z, z, z, z
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected (N, 4) event rows (t, x, y, p), got shape {arr.shape}")
    arr = arr.astype(np.int64)
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]


def validate_stream(raw_events, width: int, height: int) -> EventStream:
    """Check bounds and polarity, then stable-sort by timestamp.

    Accepts an iterable of (t, x, y, p) tuples, an (N, 4) integer array, or a
    packed record array. Raises ValueError naming the first offending index
    (in input order) on any out-of-bounds coordinate, bad polarity, or
    negative timestamp.
    """
    if width <= 0 or height <= 0:
        raise ValueError(f"sensor size must be positive, got {width}x{height}")
    t, x, y, p = _as_columns(raw_events)

    for name, bad in (("t", t < 0),
                      ("x", (x < 0) | (x >= width)),
                      ("y", (y < 0) | (y >= height))):
        if bad.any():
            i = int(np.argmax(bad))
            vals = {"t": t, "x": x, "y": y}[name]
            raise ValueError(f"event {i}: {name}={vals[i]} out of bounds for "
                             f"{width}x{height} sensor")
    bad_p = (p != 1) & (p != -1)
    if bad_p.any():
        i = int(np.argmax(bad_p))
        raise ValueError(f"event {i}: polarity {p[i]} not in {{-1, +1}}")

    order = np.argsort(t, kind="stable")
    packed = np.zeros(len(t), dtype=EVENT_DTYPE)
    packed["t"] = t[order]
    packed["x"] = x[order]
    packed["y"] = y[order]
    packed["p"] = p[order]
    return EventStream(packed, width, height)


def render_frame(events: np.ndarray, width: int, height: int,
                 clip: float = DEFAULT_RENDER_CLIP) -> np.ndarray:
    """Render an event slice to an (H, W) float32 image in [0, 1].

    Per pixel: v = 0.5 + clamp(sum of polarities, -clip, +clip) / (2 clip),
    so pixels with no events sit at neutral 0.5.
    """
    if clip <= 0:
        raise ValueError("clip must be positive")
    acc = np.zeros((height, width), dtype=np.float64)
    if len(events):
        np.add.at(acc, (events["y"].astype(np.intp), events["x"].astype(np.intp)),
                  events["p"].astype(np.float64))
    np.clip(acc, -clip, clip, out=acc)
    return (0.5 + acc / (2.0 * clip)).astype(np.float32)


def stack_by_number(stream: EventStream, events_per_frame: int, n_frames: int,
                    start: int = 0, cumulative: bool = False,
                    clip: float = DEFAULT_RENDER_CLIP) -> EventStack:
    """Stack the n_frames * events_per_frame events from ``start`` onward.

    Frame k (1-based) renders the k-th consecutive slice of events_per_frame
    events; with ``cumulative`` each frame instead renders the union of
    slices 1..k (a growing prefix). Raises InsufficientEventsError carrying
    the shortfall when the stream is too short.
    """
    if events_per_frame < 1 or n_frames < 1:
        raise ValueError("events_per_frame and n_frames must be >= 1")
    if start < 0:
        raise ValueError("start must be >= 0")
    needed = start + events_per_frame * n_frames
    if needed > len(stream):
        raise InsufficientEventsError(needed - len(stream))

    frames = np.empty((n_frames, stream.height, stream.width), dtype=np.float32)
    ranges = []
    for k in range(n_frames):
        lo = start if cumulative else start + k * events_per_frame
        hi = start + (k + 1) * events_per_frame
        frames[k] = render_frame(stream.events[lo:hi], stream.width, stream.height, clip)
        ranges.append((lo, hi))
    t = stream.events["t"]
    span = (int(t[start]), int(t[needed - 1]))
    return EventStack(frames, tuple(ranges), events_per_frame, span)


def stack_by_time(stream: EventStream, window_dt: int, n_frames: int,
                  t0: int | None = None, clip: float = DEFAULT_RENDER_CLIP) -> EventStack:
    """Stack by fixed observation window: frame k covers t in
    [t0 + (k-1) dt, t0 + k dt). Frames may be empty."""
    if window_dt <= 0:
        raise ValueError("window_dt must be positive")
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if t0 is None:
        t0 = int(stream.events["t"][0]) if len(stream) else 0

    t = stream.events["t"].astype(np.int64)
    edges = t0 + window_dt * np.arange(n_frames + 1, dtype=np.int64)
    bounds = np.searchsorted(t, edges, side="left")
    frames = np.empty((n_frames, stream.height, stream.width), dtype=np.float32)
    ranges = []
    for k in range(n_frames):
        lo, hi = int(bounds[k]), int(bounds[k + 1])
        frames[k] = render_frame(stream.events[lo:hi], stream.width, stream.height, clip)
        ranges.append((lo, hi))
    return EventStack(frames, tuple(ranges), 0, (int(t0), int(t0 + n_frames * window_dt)))


def focus_variance(frame: np.ndarray) -> float:
    """Variance of the rendered frame's pixel values; higher means sharper
    (more contrast) after event accumulation."""
    frame = np.asarray(frame)
    if frame.size == 0:
        raise ValueError("frame must be non-empty")
    return float(np.var(frame.astype(np.float64)))


def stack_focus_score(stack: EventStack) -> float:
    """Mean per-frame focus variance; the score used by the stack filter."""
    return float(np.mean([focus_variance(f) for f in stack.frames]))


def normalize_stack(stack: EventStack) -> EventStack:
    """Rescale frame values into [0, 1]. Idempotent: a stack already inside
    [0, 1] is returned unchanged; otherwise the values are affinely mapped
    from their global min/max (constant stacks map to 0.5)."""
    lo = float(stack.frames.min()) if stack.frames.size else 0.0
    hi = float(stack.frames.max()) if stack.frames.size else 1.0
    if lo >= 0.0 and hi <= 1.0:
        return stack
    if hi == lo:
        frames = np.full_like(stack.frames, 0.5)
    else:
        frames = ((stack.frames - lo) / (hi - lo)).astype(stack.frames.dtype)
    return EventStack(frames, stack.frame_event_ranges, stack.events_per_frame, stack.t_span)


def iter_stacks(stream: EventStream, events_per_frame: int, n_frames: int,
                stride: int | None = None, cumulative: bool = False,
                min_variance: float = 0.0,
                clip: float = DEFAULT_RENDER_CLIP) -> Iterator[EventStack]:
    """Walk a stream emitting stacks whose starts advance by ``stride``
    (default n_frames * events_per_frame, i.e. non-overlapping). Stacks whose
    focus score falls below ``min_variance`` are dropped."""
    if stride is None:
        stride = events_per_frame * n_frames
    if stride < 1:
        raise ValueError("stride must be >= 1")
    span = events_per_frame * n_frames
    start = 0
    while start + span <= len(stream):
        stack = stack_by_number(stream, events_per_frame, n_frames, start,
                                cumulative=cumulative, clip=clip)
        if stack_focus_score(stack) >= min_variance:
            yield stack
        start += stride
