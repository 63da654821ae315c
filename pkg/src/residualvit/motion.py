"""Per-patch motion scores for the motion drop strategy."""
from __future__ import annotations

import numpy as np

from .autodiff import DimensionError
from .teacher import EncoderConfig, Frame

DEFAULT_WINDOW = 11
MOTION_DOWNSCALE = 4
MOTION_CHANNELS = 4  # (dx, dy) w.r.t. previous and following frame


def aggregate_motion(fields: np.ndarray, t: int, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Mean per-cell L1 motion magnitude over a centred temporal window.

    ``fields`` is ``n_frames x H' x W' x C'``. Near either end of the video the
    window is truncated to the frames that exist; nothing is padded.
    """
    fields = np.asarray(fields, dtype=np.float64)
    if fields.ndim != 4 or fields.shape[0] == 0:
        raise ValueError("motion field must be a non-empty n_frames x H' x W' x C' array")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"motion window must be odd and >= 1, got {window}")
    n = fields.shape[0]
    if not 0 <= t < n:
        raise ValueError(f"frame index {t} outside [0, {n})")
    half = window // 2
    lo, hi = max(0, t - half), min(n, t + half + 1)
    return np.abs(fields[lo:hi]).sum(axis=-1).mean(axis=0)


def patch_scores(grid: np.ndarray, cfg: EncoderConfig, upsample: str = "nearest") -> np.ndarray:
    """Upsample a H/4 x W/4 magnitude grid to frame size and average each patch."""
    grid = np.asarray(grid, dtype=np.float64)
    hp, wp = cfg.H // MOTION_DOWNSCALE, cfg.W // MOTION_DOWNSCALE
    if grid.shape != (hp, wp):
        raise DimensionError(f"motion grid shape {grid.shape} != expected {(hp, wp)}")
    if upsample == "nearest":
        full = np.repeat(np.repeat(grid, cfg.H // hp, axis=0), cfg.W // wp, axis=1)
    elif upsample == "bilinear":
        full = _bilinear(grid, cfg.H, cfg.W)
    else:
        raise ValueError(f"unknown upsampling kernel {upsample!r}")
    gh, gw = cfg.grid
    return full.reshape(gh, cfg.P, gw, cfg.P).mean(axis=(1, 3)).reshape(-1)


def _bilinear(grid: np.ndarray, H: int, W: int) -> np.ndarray:
    # half-pixel centres, edge-clamped
    def axis_weights(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = x - lo
        A = np.zeros((n_out, n_in))
        A[np.arange(n_out), lo] += 1 - frac
        A[np.arange(n_out), hi] += frac
        return A

    return axis_weights(grid.shape[0], H) @ grid @ axis_weights(grid.shape[1], W).T


def frame_diff_proxy(frames: list[Frame], t: int) -> np.ndarray:
    """Stand-in for codec motion: channel-mean |x_t - x_{t-1}| pooled to H/4 x W/4.

    Returns a zero grid at t == 0.
    """
    H, W, _ = frames[t].pixels.shape
    hp, wp = H // MOTION_DOWNSCALE, W // MOTION_DOWNSCALE
    if t == 0:
        return np.zeros((hp, wp))
    diff = np.abs(frames[t].pixels.astype(np.float64) - frames[t - 1].pixels.astype(np.float64))
    diff = diff.mean(axis=-1)
    return diff.reshape(hp, MOTION_DOWNSCALE, wp, MOTION_DOWNSCALE).mean(axis=(1, 3))


def proxy_fields(frames: list[Frame]) -> np.ndarray:
    """Frame-difference proxy packed as a single-channel motion field."""
    return np.stack([frame_diff_proxy(frames, t) for t in range(len(frames))])[..., None]


def memory_overhead_ratio(H: int, W: int, window: int = DEFAULT_WINDOW,
                          channels: int = MOTION_CHANNELS) -> float:
    """(frame bytes + motion-window bytes) / frame bytes."""
    frame = H * W * 3
    motion = (H // MOTION_DOWNSCALE) * (W // MOTION_DOWNSCALE) * channels * window
    return (frame + motion) / frame
