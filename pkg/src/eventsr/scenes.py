"""Procedural grayscale scenes for demos and tests.

A scene is an analytic intensity field sampled on a pixel grid: a diagonal
shading ramp, a drifting sinusoidal grating, and two orbiting Gaussian blobs.
Rendering at 128x128 and bicubic-downsampling to 32x32 gives a consistent
HR/LR pair; simulated events come from the LR sequence. Intensities stay
inside [0.05, 0.95] so the log-intensity range (and thus the event rate) is
bounded.
"""

from __future__ import annotations

import numpy as np

from .simulator import VideoSequence


def render_scene_frame(size: int, phase: float, seed: int = 0) -> np.ndarray:
    """Sample the analytic scene at ``phase`` (one motion cycle = 1.0)."""
    rng = np.random.default_rng(seed)
    grating_angle = rng.uniform(0, np.pi)
    grating_freq = rng.uniform(2.5, 4.0)
    blob_phase = rng.uniform(0, 2 * np.pi, size=2)
    blob_radius = rng.uniform(0.18, 0.3, size=2)

    coords = (np.arange(size) + 0.5) / size
    x, y = np.meshgrid(coords, coords, indexing="xy")

    img = 0.5 + 0.08 * (x - y)
    u = x * np.cos(grating_angle) + y * np.sin(grating_angle)
    img = img + 0.18 * np.sin(2 * np.pi * (grating_freq * u + 2.0 * phase))
    for b in range(2):
        ang = blob_phase[b] + 2 * np.pi * phase * (1.0 + 0.5 * b)
        cx = 0.5 + blob_radius[b] * np.cos(ang)
        cy = 0.5 + blob_radius[b] * np.sin(ang)
        d2 = (x - cx) ** 2 + (y - cy) ** 2
        amp = 0.25 if b == 0 else -0.2
        img = img + amp * np.exp(-d2 / (2 * 0.05 ** 2))
    return np.clip(img, 0.05, 0.95)


def make_scene_video(n_frames: int, size: int, frame_dt_us: int = 2000,
                     seed: int = 0) -> VideoSequence:
    """Render a moving scene as a VideoSequence with uniform frame spacing."""
    if n_frames < 2:
        raise ValueError("need at least 2 frames")
    frames = np.stack([render_scene_frame(size, k / n_frames, seed)
                       for k in range(n_frames)])
    timestamps = np.arange(n_frames, dtype=np.int64) * frame_dt_us
    return VideoSequence(frames, timestamps)
