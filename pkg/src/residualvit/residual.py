"""ResidualViT student: residual tokenizer, P-feature encoding, the
interleaved I/P video pipeline and the two encoding-cost models."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .motion import DEFAULT_WINDOW, aggregate_motion, patch_scores, proxy_fields
from .reduction import ReductionConfig, downsample_frame, retained_count, select_drop
from .teacher import DualEncoder, Feature, Frame, TokenSequence, _MergeState


@dataclass
class ResidualTokenizer:
    """Affine map from a b-dim I-feature to one d-dim input token."""

    weight: np.ndarray  # b x d
    bias: np.ndarray  # d

    @classmethod
    def init(cls, b: int, d: int, seed: int = 0, scale: float = 0.02) -> "ResidualTokenizer":
        rng = np.random.default_rng(seed)
        return cls(scale * rng.standard_normal((b, d)), np.zeros(d))

    @classmethod
    def zeros(cls, b: int, d: int) -> "ResidualTokenizer":
        return cls(np.zeros((b, d)), np.zeros(d))

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size

    def copy(self) -> "ResidualTokenizer":
        return ResidualTokenizer(self.weight.copy(), self.bias.copy())


@dataclass(frozen=True)
class InterleaveConfig:
    N: int = 2
    reduction: ReductionConfig = field(default_factory=ReductionConfig)
    use_residual: bool = True
    motion_window: int = DEFAULT_WINDOW

    def __post_init__(self):
        if self.N < 0:
            raise ValueError("interleave factor N must be >= 0")


@dataclass
class FeatureSequence:
    features: np.ndarray  # n x b, unit rows
    kinds: list[str]  # "I" or "P"
    refs: np.ndarray  # index of the I-frame each entry used (itself for I)

    def __len__(self) -> int:
        return len(self.kinds)

    def feature(self, t: int) -> Feature:
        return Feature(self.features[t])


def residual_tokenize(f: Feature | np.ndarray, A: ResidualTokenizer) -> np.ndarray:
    values = f.values if isinstance(f, Feature) else np.asarray(f)
    if values.shape != (A.weight.shape[0],):
        raise DimensionError(f"feature of shape {values.shape} does not match tokenizer input {A.weight.shape[0]}")
    return values @ A.weight + A.bias


def frame_kinds(n_frames: int, N: int) -> tuple[list[str], np.ndarray]:
    kinds = ["I" if t % (N + 1) == 0 else "P" for t in range(n_frames)]
    refs = np.array([t - t % (N + 1) for t in range(n_frames)], dtype=np.int64)
    return kinds, refs


def reduce_tokens(model: DualEncoder, frame: Frame, rcfg: ReductionConfig,
                  scores: np.ndarray | None = None, tokens: TokenSequence | None = None) -> TokenSequence:
    """Patch tokens a P-frame actually feeds to the encoder (CLS first)."""
    if rcfg.mode == "resolution":
        h, w = rcfg.target_resolution
        return model.patchify_resized(downsample_frame(frame, h, w, model.cfg.P))
    tokens = tokens if tokens is not None else model.patchify(frame)
    if rcfg.mode == "drop":
        rng = np.random.default_rng([rcfg.rng_seed, frame.t]) if rcfg.strategy == "random" else None
        return select_drop(tokens, rcfg, scores, grid=model.cfg.grid, rng=rng)
    return tokens


def student_forward(model: DualEncoder, refs: np.ndarray | None, patch_seqs: list[TokenSequence],
                    weight=None, bias=None, merge_r: int = 0) -> Tensor:
    """Batched P-feature encoding.

    ``patch_seqs`` are CLS-led reduced sequences with equal lengths. With
    ``refs`` given (B x b I-features), a residual token ``refs @ weight + bias``
    is inserted right after CLS. ``weight``/``bias`` may be trainable tensors.
    """
    toks = np.stack([s.tokens for s in patch_seqs])
    B = toks.shape[0]
    n_special = 1
    if refs is not None:
        res = ad.matmul(Tensor(refs[:, None, :]), weight) + bias
        x = ad.concat([toks[:, :1, :], res, toks[:, 1:, :]], axis=1)
        n_special = 2
    else:
        x = Tensor(toks)
    merge = None
    if merge_r > 0:
        merge = _MergeState(merge_r, np.stack([s.weights for s in patch_seqs]),
                            np.stack([s.positions for s in patch_seqs]))
    return model.encode_batch(x, n_special=n_special, merge=merge)


def encode_p(model: DualEncoder, f_ref: Feature | None, tokens: TokenSequence,
             icfg: InterleaveConfig, A: ResidualTokenizer | None = None,
             scores: np.ndarray | None = None) -> Feature:
    if icfg.use_residual and (f_ref is None or A is None):
        raise ValueError("residual encoding needs a reference I-feature and a residual tokenizer")
    rcfg = icfg.reduction
    if rcfg.mode == "drop":
        tokens = select_drop(tokens, rcfg, scores, grid=model.cfg.grid)
    refs = f_ref.values[None] if icfg.use_residual else None
    out = student_forward(model, refs, [tokens],
                          None if A is None else A.weight, None if A is None else A.bias,
                          merge_r=rcfg.r if rcfg.mode == "merge" else 0)
    return Feature(out.data[0].copy())


def worker_count(default: int = 1) -> int:
    env = os.environ.get("RVT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"RVT_THREADS must be an integer, got {env!r}") from None
    return default


def _chunked(fn, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(items)] if items else []
    size = -(-len(items) // workers)
    chunks = [items[i:i + size] for i in range(0, len(items), size)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


def motion_scores_for(model: DualEncoder, frames: list[Frame], icfg: InterleaveConfig,
                      motion: np.ndarray | None) -> dict[int, np.ndarray]:
    fields = motion if motion is not None else proxy_fields(frames)
    cfg = model.cfg
    out = {}
    for t in range(len(frames)):
        grid = aggregate_motion(fields, t, icfg.motion_window)
        if grid.shape != (cfg.H // 4, cfg.W // 4):
            raise DimensionError(f"motion grid {grid.shape} does not match frame geometry")
        out[t] = patch_scores(grid, cfg)
    return out


def encode_i_phase(model: DualEncoder, frames: list[Frame], i_idx: list[int],
                   workers: int = 1) -> np.ndarray:
    parts = _chunked(lambda idx: model.encode_frames([frames[t] for t in idx]), i_idx, workers)
    return np.concatenate(parts) if parts else np.zeros((0, model.cfg.b))


def encode_p_phase(model: DualEncoder, frames: list[Frame], p_idx: list[int], ref_feats: np.ndarray | None,
                   icfg: InterleaveConfig, A: ResidualTokenizer | None = None,
                   motion: np.ndarray | None = None, workers: int = 1) -> np.ndarray:
    """Student features for ``p_idx``; ``ref_feats`` holds one I-feature row per entry."""
    if not p_idx:
        return np.zeros((0, model.cfg.b))
    rcfg = icfg.reduction
    scores = {}
    if rcfg.mode == "drop" and rcfg.strategy == "motion":
        scores = motion_scores_for(model, frames, icfg, motion)
    merge_r = rcfg.r if rcfg.mode == "merge" else 0
    pos = {t: i for i, t in enumerate(p_idx)}

    def run(idx):
        seqs = [reduce_tokens(model, frames[t], rcfg, scores.get(t)) for t in idx]
        refs = ref_feats[[pos[t] for t in idx]] if icfg.use_residual else None
        out = student_forward(model, refs, seqs,
                              None if A is None else A.weight,
                              None if A is None else A.bias, merge_r)
        return out.data

    return np.concatenate(_chunked(run, p_idx, workers))


def encode_video_interleaved(model: DualEncoder, frames: list[Frame], icfg: InterleaveConfig,
                             A: ResidualTokenizer | None = None, motion: np.ndarray | None = None,
                             workers: int | None = None) -> FeatureSequence:
    """I-frames every N+1 frames through the full encoder, the rest through
    the student with the preceding I-feature as residual context.

    Runs in two phases: all I-frames, then all P-frames.
    """
    if not frames:
        raise ValueError("no frames to encode")
    if icfg.use_residual and A is None:
        raise ValueError("residual encoding needs a residual tokenizer")
    workers = worker_count() if workers is None else workers
    kinds, refs = frame_kinds(len(frames), icfg.N)
    feats = np.zeros((len(frames), model.cfg.b))

    i_idx = [t for t, k in enumerate(kinds) if k == "I"]
    feats[i_idx] = encode_i_phase(model, frames, i_idx, workers)
    p_idx = [t for t, k in enumerate(kinds) if k == "P"]
    if p_idx:
        feats[p_idx] = encode_p_phase(model, frames, p_idx, feats[refs[p_idx]], icfg, A, motion, workers)
    return FeatureSequence(feats, kinds, refs)


def naive_cost(c_full: float, N: int, p: float) -> float:
    """Average per-frame cost when the student costs (1 - p) of a full pass."""
    if c_full <= 0:
        raise ValueError("full encoding cost must be positive")
    return c_full * (1.0 + (1.0 - p) * N) / (1.0 + N)


def token_ratio(K: int, p: float) -> float:
    """Student/teacher sequence-length ratio, counting CLS and the residual token."""
    return (retained_count(K, p) + 2) / (K + 1)


def extended_cost(c_full: float, K: int, N: int, p: float) -> float:
    if c_full <= 0:
        raise ValueError("full encoding cost must be positive")
    return c_full * (1.0 + N * token_ratio(K, p)) / (1.0 + N)


def savings(cost: float, c_full: float) -> float:
    return 1.0 - cost / c_full
