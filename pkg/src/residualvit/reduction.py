"""Token reduction: patch dropping, per-block bipartite merging and input
resolution reduction."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .teacher import Frame, TokenSequence

MODES = ("drop", "merge", "resolution", "none")
STRATEGIES = ("random", "uniform", "center", "motion")


@dataclass(frozen=True)
class ReductionConfig:
    mode: str = "drop"
    p: float = 0.85
    strategy: str = "center"
    r: int = 0
    target_resolution: tuple[int, int] | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown reduction mode {self.mode!r}")
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"drop probability must lie in [0, 1), got {self.p}")
        if self.mode == "drop" and self.strategy not in STRATEGIES:
            raise ValueError(f"unknown drop strategy {self.strategy!r}")
        if self.mode == "merge" and self.r < 1:
            raise ValueError("merge mode needs r >= 1")
        if self.mode == "resolution" and self.target_resolution is None:
            raise ValueError("resolution mode needs target_resolution")


def retained_count(K: int, p: float) -> int:
    """Patch tokens kept after dropping a fraction ``p`` of ``K``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 0.0 <= p < 1.0:
        raise ValueError(f"p must lie in [0, 1), got {p}")
    # round before ceil so (1 - 0.85) * 40 == 6.000000000000001 does not become 7
    return max(1, math.ceil(round((1.0 - p) * K, 9)))


def _row_major(positions: np.ndarray, grid_w: int) -> np.ndarray:
    return positions[:, 0] * grid_w + positions[:, 1]


def drop_indices(positions: np.ndarray, grid: tuple[int, int], k: int, strategy: str,
                 scores: np.ndarray | None = None,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Indices (into ``positions``) of the ``k`` surviving patches, ascending."""
    n = positions.shape[0]
    gh, gw = grid
    order = _row_major(positions, gw)
    if k >= n:
        return np.arange(n)
    if strategy == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        keep = rng.choice(n, size=k, replace=False)
    elif strategy == "uniform":
        stride = n // k
        keep = stride // 2 + stride * np.arange(k)
        keep = np.argsort(order, kind="stable")[keep]
    elif strategy == "center":
        dy = positions[:, 0] + 0.5 - gh / 2.0
        dx = positions[:, 1] + 0.5 - gw / 2.0
        keep = np.lexsort((order, dy * dy + dx * dx))[:k]
    elif strategy == "motion":
        if scores is None:
            raise ValueError("motion strategy requires per-patch motion scores")
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (gh * gw,):
            raise ValueError(f"expected {gh * gw} motion scores, got shape {scores.shape}")
        keep = np.lexsort((order, -scores[order]))[:k]
    else:
        raise ValueError(f"unknown drop strategy {strategy!r}")
    return np.sort(keep)


def select_drop(tokens: TokenSequence, cfg: ReductionConfig, scores=None,
                grid: tuple[int, int] | None = None,
                rng: np.random.Generator | None = None) -> TokenSequence:
    n = tokens.n_patches
    k = retained_count(n, cfg.p)
    if cfg.strategy == "motion" and scores is None:
        raise ValueError("motion strategy requires per-patch motion scores")
    if grid is None:
        gh, gw = (tokens.positions.max(axis=0) + 1).tolist()
        grid = (int(gh), int(gw))
    if rng is None and cfg.strategy == "random":
        rng = np.random.default_rng(cfg.rng_seed)
    keep = drop_indices(tokens.positions, grid, k, cfg.strategy, scores, rng)
    s = tokens.n_special
    rows = np.concatenate([np.arange(s), s + keep])
    return TokenSequence(
        tokens=tokens.tokens[rows],
        positions=tokens.positions[keep],
        weights=tokens.weights[keep],
        has_cls=tokens.has_cls,
        has_residual=tokens.has_residual,
    )


def merge_plan(keys: np.ndarray, weights: np.ndarray, positions: np.ndarray, r: int):
    """Bipartite soft matching over patch tokens.

    Returns ``(M, new_weights, new_positions)`` where ``M @ patch_tokens`` is
    the merged patch set: every row is a weight-proportional average.
    """
    n = keys.shape[0]
    r_eff = min(n // 2, r)
    if r_eff <= 0:
        return np.eye(n), weights.copy(), positions.copy()
    normed = keys / np.maximum(np.linalg.norm(keys, axis=1, keepdims=True), 1e-12)
    src = np.arange(1, n, 2)  # odd indices propose
    dst = np.arange(0, n, 2)
    sim = normed[src] @ normed[dst].T
    partner = sim.argmax(axis=1)
    best = sim[np.arange(src.size), partner]
    chosen = np.argsort(-best, kind="stable")[:r_eff]
    merged_into = {}
    for c in chosen:
        merged_into[int(src[c])] = int(dst[partner[c]])

    survivors = [i for i in range(n) if i not in merged_into]
    slot = {i: row for row, i in enumerate(survivors)}
    M = np.zeros((len(survivors), n))
    new_w = weights[survivors].astype(np.float64)
    for i in survivors:
        M[slot[i], i] = weights[i]
    for s, d in merged_into.items():
        M[slot[d], s] = weights[s]
        new_w[slot[d]] += weights[s]
    M /= new_w[:, None]
    return M, new_w, positions[survivors].copy()


def merge_step(tokens: TokenSequence, keys: np.ndarray, r: int) -> TokenSequence:
    if r <= 0:
        return tokens
    s = tokens.n_special
    M, new_w, new_pos = merge_plan(np.asarray(keys)[s:], tokens.weights, tokens.positions, r)
    return TokenSequence(
        tokens=np.concatenate([tokens.tokens[:s], M @ tokens.tokens[s:]], axis=0),
        positions=new_pos,
        weights=new_w,
        has_cls=tokens.has_cls,
        has_residual=tokens.has_residual,
    )


def merge_schedule(K: int, r: int, depth: int) -> list[int]:
    """Patch-token count entering each block and after the last one."""
    counts = [K]
    for _ in range(depth):
        n = counts[-1]
        counts.append(n - min(n // 2, r))
    return counts


def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Rows average the input cells each output cell overlaps, by overlap length."""
    scale = n_in / n_out
    R = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(math.floor(lo)), min(n_in, int(math.ceil(hi)))):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                R[i, j] = overlap / scale
    return R


def downsample_frame(frame: Frame, H: int, W: int, P: int) -> Frame:
    if H % P or W % P or H < P or W < P:
        raise ValueError(f"target resolution {H}x{W} is not a positive multiple of patch size {P}")
    h0, w0, _ = frame.pixels.shape
    if (H, W) == (h0, w0):
        return Frame(frame.pixels.copy(), frame.t)
    ry, rx = area_matrix(h0, H), area_matrix(w0, W)
    out = np.einsum("ai,ijc,bj->abc", ry, frame.pixels.astype(np.float64), rx)
    return Frame(np.clip(np.rint(out), 0, 255).astype(np.uint8), frame.t)
