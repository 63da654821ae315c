"""Zero-shot temporal grounding from frame/sentence similarity profiles."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autodiff import DimensionError

THRESHOLD_MODES = ("scaled-mean", "fixed-after-minmax")


@dataclass
class SimilarityProfile:
    scores: np.ndarray
    fps: float = 1.0

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    def __len__(self) -> int:
        return self.scores.size


@dataclass(frozen=True)
class GroundingConfig:
    window: int = 15
    mode: str = "scaled-mean"
    alpha: float = 1.0
    beta: float = 0.7

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"smoothing window must be odd and >= 1, got {self.window}")
        if self.mode not in THRESHOLD_MODES:
            raise ValueError(f"unknown threshold mode {self.mode!r}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")


# regimes used for short (two settings) and long-form videos
PRESETS = {
    "charades": GroundingConfig(window=15, mode="scaled-mean", alpha=1.0),
    "activitynet": GroundingConfig(window=15, mode="scaled-mean", alpha=0.95),
    "mad": GroundingConfig(window=7, mode="fixed-after-minmax", beta=0.7),
}


@dataclass(frozen=True)
class MomentPrediction:
    start: float
    end: float
    score: float


def similarity_profile(frame_feats: np.ndarray, text_feat: np.ndarray, fps: float = 1.0) -> SimilarityProfile:
    frame_feats = np.asarray(frame_feats, dtype=np.float64)
    text_feat = np.asarray(text_feat, dtype=np.float64)
    if frame_feats.ndim != 2 or frame_feats.shape[1] != text_feat.shape[-1]:
        raise DimensionError(f"frame features {frame_feats.shape} vs text feature {text_feat.shape}")
    return SimilarityProfile(frame_feats @ text_feat, fps)


def smooth(profile: SimilarityProfile, window: int) -> SimilarityProfile:
    """Centred moving average; near the ends the window is truncated to the
    frames that exist (no padding)."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"smoothing window must be odd and >= 1, got {window}")
    s = profile.scores
    n = s.size
    if window == 1 or n == 0:
        return SimilarityProfile(s.copy(), profile.fps)
    csum = np.concatenate([[0.0], np.cumsum(s)])
    t = np.arange(n)
    half = window // 2
    lo, hi = np.maximum(t - half, 0), np.minimum(t + half + 1, n)
    return SimilarityProfile((csum[hi] - csum[lo]) / (hi - lo), profile.fps)


def normalize_minmax(profile: SimilarityProfile) -> SimilarityProfile:
    s = profile.scores
    span = s.max() - s.min()
    if span == 0:
        return SimilarityProfile(np.zeros_like(s), profile.fps)
    return SimilarityProfile((s - s.min()) / span, profile.fps)


def threshold(profile: SimilarityProfile, cfg: GroundingConfig) -> tuple[float, SimilarityProfile]:
    """Returns ``(threshold, profile_to_scan)``; the fixed mode rescales the
    profile to [0, 1] first (a constant profile maps to all zeros)."""
    if len(profile) == 0:
        raise ValueError("empty similarity profile")
    if cfg.mode == "scaled-mean":
        return cfg.alpha * float(profile.scores.mean()), profile
    return cfg.beta, normalize_minmax(profile)


def watershed_segments(profile: SimilarityProfile, thresh: float) -> list[MomentPrediction]:
    """Maximal runs with score strictly above ``thresh``, best peak first."""
    if not np.isfinite(thresh):
        raise ValueError("threshold must be finite")
    above = profile.scores > thresh
    edges = np.diff(np.concatenate([[0], above.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)  # exclusive
    preds = [MomentPrediction(float(s / profile.fps), float(e / profile.fps), float(profile.scores[s:e].max()))
             for s, e in zip(starts, ends)]
    preds.sort(key=lambda m: (-m.score, m.start))
    return preds


def ground(frame_feats: np.ndarray, text_feat: np.ndarray, cfg: GroundingConfig,
           fps: float = 1.0) -> list[MomentPrediction]:
    prof = smooth(similarity_profile(frame_feats, text_feat, fps), cfg.window)
    thresh, scan = threshold(prof, cfg)
    return watershed_segments(scan, thresh)


def iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    if a[1] < a[0] or b[1] < b[0]:
        raise ValueError("interval end precedes start")
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def recall_at_k(preds: list[MomentPrediction], gt: tuple[float, float], k: int, theta: float) -> int:
    return int(any(iou((m.start, m.end), gt) >= theta for m in preds[:k]))


def evaluate(results: list[tuple[list[MomentPrediction], tuple[float, float]]],
             thetas=(0.5, 0.7), k: int = 1) -> dict[str, float]:
    """Corpus means of R@k at each IoU threshold and of the top-1 IoU."""
    if not results:
        raise ValueError("no queries to evaluate")
    out = {}
    for theta in thetas:
        out[f"R@{k}@{theta}"] = float(np.mean([recall_at_k(p, gt, k, theta) for p, gt in results]))
    out["mIoU"] = float(np.mean([iou((p[0].start, p[0].end), gt) if p else 0.0 for p, gt in results]))
    return out


def ground_many(jobs: list[tuple[np.ndarray, np.ndarray]], cfg: GroundingConfig, fps: float = 1.0,
                workers: int = 1) -> list[list[MomentPrediction]]:
    """Ground ``(frame_feats, text_feat)`` pairs; output order follows input."""
    def one(job):
        return ground(job[0], job[1], cfg, fps)

    if workers <= 1:
        return [one(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, jobs))
