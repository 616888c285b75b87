"""Event-camera simulation from image sequences, plus image degradation.

The generation model is the classic per-pixel threshold crossing: each pixel
tracks L = log(I + eps) and a reference level. Between consecutive frames L
is treated as linear in time; every time it moves a full contrast threshold C
away from the reference, an event fires at the linearly interpolated crossing
time and the reference steps by +-C.

Boundary semantics (shared with the test oracles): a change that lands
exactly on a threshold emits the event. Crossing counts are computed as
floor(|dL|/C + 1e-9) so exact multiples survive float rounding, and crossing
times are rounded half-up to integer microseconds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .events import EventStream, validate_stream
from .formats import EVENT_DTYPE

BOUNDARY_EPS = 1e-9


@dataclass(frozen=True)
class SimConfig:
    """Event-generation knobs.

    contrast_threshold: log-intensity change per event (C > 0).
    log_eps: offset inside log(I + eps) bounding the log dynamic range.
    seed: drives per-pixel threshold noise when threshold_sigma > 0.
    threshold_sigma: stddev of per-pixel threshold perturbation (0 = off).
    refractory_us: dead time per pixel after an emitted event (0 = off).
    """

    contrast_threshold: float = 0.2
    log_eps: float = 1e-3
    seed: int = 0
    threshold_sigma: float = 0.0
    refractory_us: int = 0

    def __post_init__(self):
        if self.contrast_threshold <= 0:
            raise ValueError("contrast_threshold must be positive")
        if self.log_eps <= 0:
            raise ValueError("log_eps must be positive")
        if self.threshold_sigma < 0 or self.refractory_us < 0:
            raise ValueError("noise parameters must be non-negative")


@dataclass(frozen=True)
class VideoSequence:
    """Frames of identical shape with strictly increasing microsecond stamps."""

    frames: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        ts = np.asarray(self.timestamps, dtype=np.int64)
        if frames.ndim != 3:
            raise ValueError(f"frames must be (T, H, W), got shape {frames.shape}")
        if frames.shape[0] < 2:
            raise ValueError("a video needs at least 2 frames")
        if ts.shape != (frames.shape[0],):
            raise ValueError("one timestamp per frame required")
        if ts[0] < 0:
            raise ValueError("timestamps must be non-negative")
        if not (np.diff(ts) > 0).all():
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "timestamps", ts)

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.frames.shape[1]), int(self.frames.shape[2])


def _per_pixel_thresholds(cfg: SimConfig, shape: tuple[int, int]) -> np.ndarray:
    c = np.full(shape, cfg.contrast_threshold, dtype=np.float64)
    if cfg.threshold_sigma > 0:
        rng = np.random.default_rng(cfg.seed)
        c = c + rng.normal(0.0, cfg.threshold_sigma, size=shape)
        np.clip(c, 0.01, None, out=c)
    return c


def simulate_events(video: VideoSequence, cfg: SimConfig) -> EventStream:
    """Run the threshold-crossing model over a video.

    Returns a stream sorted by (t, y, x, p). Pixels are processed in
    parallel-friendly vector form per frame interval; the result is
    independent of that layout because of the final deterministic sort.
    """
    height, width = video.frames.shape[1:]
    log_frames = np.log(video.frames + cfg.log_eps)
    thresholds = _per_pixel_thresholds(cfg, (height, width))
    ref = log_frames[0].copy()
    ys, xs = np.mgrid[0:height, 0:width]

    last_emit = np.full((height, width), -np.inf) if cfg.refractory_us > 0 else None

    chunks: list[np.ndarray] = []
    for s in range(len(log_frames) - 1):
        lo, hi = log_frames[s], log_frames[s + 1]
        t0, t1 = int(video.timestamps[s]), int(video.timestamps[s + 1])
        delta = hi - ref
        sign = np.where(delta >= 0, 1.0, -1.0)
        count = np.floor(np.abs(delta) / thresholds + BOUNDARY_EPS).astype(np.int64)
        kmax = int(count.max()) if count.size else 0
        if kmax == 0:
            continue

        denom = hi - lo
        safe_denom = np.where(denom == 0.0, 1.0, denom)
        for j in range(1, kmax + 1):
            mask = count >= j
            if not mask.any():
                break
            target = ref[mask] + sign[mask] * j * thresholds[mask]
            ratio = (target - lo[mask]) / safe_denom[mask]
            np.clip(ratio, 0.0, 1.0, out=ratio)
            t_cross = np.floor(t0 + (t1 - t0) * ratio + 0.5).astype(np.int64)

            ev = np.zeros(int(mask.sum()), dtype=EVENT_DTYPE)
            ev["t"] = t_cross
            ev["x"] = xs[mask]
            ev["y"] = ys[mask]
            ev["p"] = sign[mask].astype(np.int8)
            if last_emit is not None:
                keep = t_cross.astype(np.float64) >= last_emit[mask] + cfg.refractory_us
                ev = ev[keep]
                em = last_emit[mask]
                em[keep] = t_cross[keep]
                last_emit[mask] = em
            chunks.append(ev)
        ref += sign * count * thresholds

    if chunks:
        events = np.concatenate(chunks)
    else:
        events = np.zeros(0, dtype=EVENT_DTYPE)
    order = np.lexsort((events["p"], events["x"], events["y"], events["t"]))
    return EventStream(events[order], width, height)


def _keys_kernel(u: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Cubic convolution kernel (Keys), support [-2, 2]."""
    u = np.abs(u)
    out = np.zeros_like(u)
    near = u <= 1.0
    far = (u > 1.0) & (u < 2.0)
    out[near] = (a + 2) * u[near] ** 3 - (a + 3) * u[near] ** 2 + 1
    out[far] = a * (u[far] ** 3 - 5 * u[far] ** 2 + 8 * u[far] - 4)
    return out


def _bicubic_matrix(n_in: int, factor: int) -> np.ndarray:
    """Row-normalized 1D resampling matrix (n_in/factor, n_in): scaled Keys
    kernel with edge-clamped taps."""
    n_out = n_in // factor
    mat = np.zeros((n_out, n_in))
    support = 2 * factor
    for i in range(n_out):
        center = (i + 0.5) * factor - 0.5
        j0 = int(np.floor(center)) - support + 1
        taps = np.arange(j0, j0 + 2 * support)
        weights = _keys_kernel((taps - center) / factor)
        clamped = np.clip(taps, 0, n_in - 1)
        np.add.at(mat[i], clamped, weights)
        mat[i] /= mat[i].sum()
    return mat


def downsample_bicubic(image: np.ndarray, factor: int) -> np.ndarray:
    """Bicubic (a = -0.5) anti-aliased downsampling by an integer factor.

    Dimensions must be divisible by the factor; taps beyond the border are
    clamped to the edge pixel.
    """
    image = np.asarray(image)
    if factor < 2:
        raise ValueError("factor must be >= 2")
    if image.ndim != 2:
        raise ValueError(f"expected 2D image, got shape {image.shape}")
    h, w = image.shape
    if h % factor or w % factor:
        raise ValueError(f"image {h}x{w} not divisible by factor {factor}")
    rows = _bicubic_matrix(h, factor)
    cols = _bicubic_matrix(w, factor)
    out = rows @ image.astype(np.float64) @ cols.T
    return out.astype(image.dtype) if image.dtype.kind == "f" else out


def degrade_aps(image: np.ndarray, blur_sigma: float, noise_sigma: float,
                seed: int) -> np.ndarray:
    """Gaussian blur followed by additive Gaussian noise, clipped to [0, 1].

    Deterministic given the seed; (0, 0) returns the image unchanged.
    """
    if blur_sigma < 0 or noise_sigma < 0:
        raise ValueError("sigmas must be non-negative")
    image = np.asarray(image, dtype=np.float32)
    if blur_sigma == 0 and noise_sigma == 0:
        return image.copy()
    out = image.astype(np.float64)
    if blur_sigma > 0:
        out = ndimage.gaussian_filter(out, blur_sigma, mode="nearest")
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        out = out + rng.normal(0.0, noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def video_from_frames(frames, timestamps) -> VideoSequence:
    """Stack per-frame arrays (or an existing (T,H,W) array) into a video."""
    arr = np.stack([np.asarray(f, dtype=np.float64) for f in frames]) \
        if not isinstance(frames, np.ndarray) else frames
    return VideoSequence(arr, np.asarray(timestamps, dtype=np.int64))
