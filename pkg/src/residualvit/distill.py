"""Distilling the residual tokenizer against the frozen teacher.

The only trainable parameters are the residual tokenizer's weight and bias;
teacher features, text features and reduced token sets are computed once and
cached.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .reduction import ReductionConfig
from .residual import (InterleaveConfig, ResidualTokenizer, encode_video_interleaved,
                       reduce_tokens, student_forward)
from .teacher import DualEncoder, EncoderConfig, Frame

log = logging.getLogger(__name__)

N_SHAPES, N_COLORS, N_BACKGROUNDS, N_SIZES, N_DIRECTIONS = 4, 8, 4, 2, 8
SHAPES = ("square", "disc", "diamond", "cross")
PALETTE = np.array([
    [230, 40, 40], [40, 200, 60], [50, 80, 230], [240, 220, 40],
    [220, 60, 220], [40, 210, 220], [250, 140, 30], [245, 245, 245],
], dtype=np.float64)
BACKGROUNDS = np.array([[20, 20, 30], [90, 60, 40], [40, 70, 50], [110, 110, 120]], dtype=np.float64)


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


@dataclass
class Video:
    frames: np.ndarray  # T x H x W x C uint8
    text_ids: tuple[int, ...]
    params: dict = field(default_factory=dict)

    def frame_list(self) -> list[Frame]:
        return [Frame(f, t) for t, f in enumerate(self.frames)]


@dataclass
class Corpus:
    videos: list[Video]
    seed: int

    def __len__(self) -> int:
        return len(self.videos)


def caption_ids(shape: int, color: int, background: int, size: int, direction: int) -> tuple[int, ...]:
    """Synthetic caption: one word per generative attribute, disjoint id blocks."""
    return (shape,
            N_SHAPES + color,
            N_SHAPES + N_COLORS + background,
            N_SHAPES + N_COLORS + N_BACKGROUNDS + size,
            N_SHAPES + N_COLORS + N_BACKGROUNDS + N_SIZES + direction)


def _shape_mask(kind: int, cy: float, cx: float, radius: float, H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == 0:
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if kind == 1:
        return dy * dy + dx * dx <= radius * radius
    if kind == 2:
        return np.abs(dy) + np.abs(dx) <= radius * 1.3
    arm = radius / 2.5
    return ((np.abs(dy) <= radius) & (np.abs(dx) <= arm)) | ((np.abs(dx) <= radius) & (np.abs(dy) <= arm))


def render_video(params: dict, n_frames: int, H: int, W: int, texture: np.ndarray) -> np.ndarray:
    color = PALETTE[params["color"]]
    bg = BACKGROUNDS[params["background"]]
    radius = (0.16 if params["size"] == 0 else 0.28) * min(H, W)
    angle = 2 * np.pi * params["direction"] / N_DIRECTIONS
    vy, vx = params["speed"] * np.sin(angle), params["speed"] * np.cos(angle)
    cy, cx = params["y0"], params["x0"]
    out = np.empty((n_frames, H, W, 3), dtype=np.uint8)
    for t in range(n_frames):
        img = bg[None, None, :] + texture
        mask = _shape_mask(params["shape"], cy, cx, radius, H, W)
        img[mask] = color
        out[t] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        # bounce off the borders
        cy, cx = cy + vy, cx + vx
        if not radius <= cy <= H - radius:
            vy = -vy
            cy = min(max(cy, radius), H - radius)
        if not radius <= cx <= W - radius:
            vx = -vx
            cx = min(max(cx, radius), W - radius)
    return out


def gen_synthetic_corpus(n_videos: int, frames_per_video: int, seed: int,
                         cfg: EncoderConfig | None = None) -> Corpus:
    """Videos of a single drifting coloured shape over a textured background,
    each captioned by the attributes that generated it."""
    if n_videos < 1 or frames_per_video < 1:
        raise ValueError("need at least one video with at least one frame")
    cfg = cfg or EncoderConfig()
    rng = np.random.default_rng(seed)
    videos = []
    for _ in range(n_videos):
        params = {
            "shape": int(rng.integers(N_SHAPES)),
            "color": int(rng.integers(N_COLORS)),
            "background": int(rng.integers(N_BACKGROUNDS)),
            "size": int(rng.integers(N_SIZES)),
            "direction": int(rng.integers(N_DIRECTIONS)),
            "speed": float(rng.uniform(0.5, 1.5)),
            "y0": float(rng.uniform(0.3, 0.7) * cfg.H),
            "x0": float(rng.uniform(0.3, 0.7) * cfg.W),
        }
        texture = rng.normal(0.0, 6.0, size=(cfg.H, cfg.W, 1))
        frames = render_video(params, frames_per_video, cfg.H, cfg.W, texture)
        ids = caption_ids(params["shape"], params["color"], params["background"],
                          params["size"], params["direction"])
        videos.append(Video(frames, ids, params))
    return Corpus(videos, seed)


def align_text_tower(model: DualEncoder, corpus: Corpus) -> DualEncoder:
    """Calibrate the random text tower so captions land near their videos'
    mean teacher feature (see ``teacher.fit_text_embeddings``)."""
    from .teacher import fit_text_embeddings

    targets = []
    for v in corpus.videos:
        f = model.encode_frames(v.frame_list()).mean(axis=0)
        targets.append(f / np.linalg.norm(f))
    return fit_text_embeddings(model, [v.text_ids for v in corpus.videos], np.stack(targets))


# losses

def _check_unit(name: str, arr: np.ndarray, tol: float = 1e-6) -> None:
    norms = np.linalg.norm(arr, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= tol):
        raise ValueError(f"{name} must be L2-normalized (max |norm-1| = {np.abs(norms - 1).max():.3g})")


def soft_target_loss(F_S, F_V: np.ndarray, G: np.ndarray, tau: float = 1.0) -> Tensor:
    """Symmetric soft-target cross-entropy between teacher- and
    student-induced similarity distributions.

    ``F_S``/``F_V``: B x N x b student/teacher features, ``G``: B x b text
    features. Language-to-vision normalizes over the B texts for each frame;
    vision-to-language normalizes over all B*N frames for each text.
    """
    F_S = ad.as_tensor(F_S)
    F_V = np.asarray(F_V, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if F_S.shape != F_V.shape or F_S.ndim != 3 or G.shape != (F_S.shape[0], F_S.shape[2]):
        raise ValueError(f"inconsistent shapes: F_S {F_S.shape}, F_V {F_V.shape}, G {G.shape}")
    _check_unit("student features", F_S.data)
    _check_unit("teacher features", F_V)
    _check_unit("text features", G)
    B, N, b = F_S.shape
    inv_tau = 1.0 / tau

    # language -> vision
    target = ad.softmax(F_V @ G.T * inv_tau, axis=-1).data
    pred = ad.log_softmax(ad.matmul(F_S, G.T) * inv_tau, axis=-1)
    j_lv = ad.sum(pred * target) * -1.0

    # vision -> language
    flat_V = F_V.reshape(B * N, b)
    target = ad.softmax(G @ flat_V.T * inv_tau, axis=-1).data
    flat_S = ad.reshape(F_S, (B * N, b))
    pred = ad.log_softmax(ad.matmul(G, ad.swap_last(flat_S)) * inv_tau, axis=-1)
    j_vl = ad.sum(pred * target) * -1.0
    return j_lv + j_vl


def mse_loss(F_S, F_V: np.ndarray, plain_norm: bool = False) -> Tensor:
    """Sum over frames of the squared L2 distance (or plain distance)."""
    F_S = ad.as_tensor(F_S)
    if F_S.shape != np.shape(F_V):
        raise ValueError(f"shape mismatch: {F_S.shape} vs {np.shape(F_V)}")
    sq = ad.sum(ad.square(F_S - F_V), axis=-1)
    return ad.sum(ad.sqrt(sq) if plain_norm else sq)


# training

@dataclass(frozen=True)
class TrainConfig:
    n_train: int = 3
    batch_size: int = 16
    epochs: int = 5
    lr: float = 0.01
    optimizer: str = "adam"
    tau: float = 1.0
    loss: str = "ce"
    sampling: str = "all"
    plain_mse: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.n_train < 1:
            raise ValueError("n_train must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.loss not in ("ce", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.sampling not in ("all", "random-subset"):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params, grads):
        return [p - self.lr * g for p, g in zip(params, grads)]


class Adam:
    """Adam without weight decay."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            out.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


class _Cache:
    """Frozen-teacher quantities for each training excerpt."""

    def __init__(self, model: DualEncoder, corpus: Corpus, cfg: TrainConfig, icfg: InterleaveConfig):
        rng = np.random.default_rng(cfg.seed)
        self.i_feat, self.targets, self.texts, self.tokens = [], [], [], []
        for v in corpus.videos:
            T = v.frames.shape[0]
            if T < cfg.n_train + 1:
                raise ValueError(
                    f"videos need at least n_train+1 = {cfg.n_train + 1} frames to form P-frames, got {T}")
            start = int(rng.integers(0, T - cfg.n_train))
            frames = [Frame(v.frames[start + k], start + k) for k in range(cfg.n_train + 1)]
            feats = model.encode_frames(frames)
            self.i_feat.append(feats[0])
            self.targets.append(feats[1:])
            self.texts.append(model.encode_text(v.text_ids).values)
            scores = _excerpt_scores(model, frames, icfg)
            self.tokens.append([reduce_tokens(model, f, icfg.reduction, scores.get(k))
                                for k, f in enumerate(frames) if k > 0])


def _excerpt_scores(model, frames, icfg) -> dict:
    rcfg = icfg.reduction
    if rcfg.mode != "drop" or rcfg.strategy != "motion":
        return {}
    from .residual import motion_scores_for
    return motion_scores_for(model, frames, icfg, None)


@dataclass
class TrainResult:
    tokenizer: ResidualTokenizer
    history: list[dict]


def _batch_forward(model, cache, idx, ks, weight, bias, merge_r):
    refs = np.repeat(np.stack([cache.i_feat[i] for i in idx]), len(ks), axis=0)
    seqs = [cache.tokens[i][k] for i in idx for k in ks]
    out = student_forward(model, refs, seqs, weight, bias, merge_r)
    F_S = ad.reshape(out, (len(idx), len(ks), model.cfg.b))
    F_V = np.stack([cache.targets[i][ks] for i in idx])
    G = np.stack([cache.texts[i] for i in idx])
    return F_S, F_V, G


def train(corpus: Corpus, cfg: TrainConfig, model: DualEncoder, A: ResidualTokenizer,
          icfg: InterleaveConfig | None = None) -> TrainResult:
    """Fit the residual tokenizer at a constant learning rate (no decay, no warmup).

    History row 0 scores the initial tokenizer; rows 1..epochs are per-epoch
    means of the quantities observed during that epoch's steps.
    """
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    icfg = icfg or InterleaveConfig(N=cfg.n_train)
    cache = _Cache(model, corpus, cfg, icfg)
    merge_r = icfg.reduction.r if icfg.reduction.mode == "merge" else 0
    rng = np.random.default_rng(cfg.seed + 1)
    order = np.arange(len(corpus))
    batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
    all_k = np.arange(cfg.n_train)

    weight, bias = A.weight.copy(), A.bias.copy()
    opt = Adam(cfg.lr) if cfg.optimizer == "adam" else SGD(cfg.lr)
    history = [dict(epoch=0, **_score(model, cache, batches, all_k, weight, bias, merge_r, cfg))]
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        rows = []
        for idx in batches:
            ks = all_k
            if cfg.sampling == "random-subset":
                m = int(rng.integers(1, cfg.n_train + 1))
                ks = np.sort(rng.choice(cfg.n_train, size=m, replace=False))
            W = Tensor(weight, requires_grad=True)
            bb = Tensor(bias, requires_grad=True)
            with Tape() as tape:
                F_S, F_V, G = _batch_forward(model, cache, idx, ks, W, bb, merge_r)
                ce = soft_target_loss(F_S, F_V, G, cfg.tau)
                mse = mse_loss(F_S, F_V, cfg.plain_mse)
                loss = ce if cfg.loss == "ce" else mse
            if not np.isfinite(loss.data):
                raise TrainingError("non-finite loss", step)
            gW, gb = tape.gradient(loss, [W, bb])
            weight, bias = opt.step([weight, bias], [gW, gb])
            if not (np.isfinite(weight).all() and np.isfinite(bias).all()):
                raise TrainingError("non-finite parameters", step)
            rows.append(_metrics(ce, mse, F_S, F_V))
            step += 1
        history.append(dict(epoch=epoch, **{k: float(np.mean([r[k] for r in rows])) for k in rows[0]}))
        log.info("epoch %d: %s", epoch, history[-1])
    return TrainResult(ResidualTokenizer(weight, bias), history)


def _metrics(ce, mse, F_S, F_V) -> dict:
    cos = (F_S.data * F_V).sum(axis=-1).mean()
    return {"ce": float(ce.data), "mse": float(mse.data), "mean_cosine": float(cos)}


def _score(model, cache, batches, ks, weight, bias, merge_r, cfg) -> dict:
    rows = []
    for idx in batches:
        F_S, F_V, G = _batch_forward(model, cache, idx, ks, weight, bias, merge_r)
        rows.append(_metrics(soft_target_loss(F_S, F_V, G, cfg.tau),
                             mse_loss(F_S, F_V, cfg.plain_mse), F_S, F_V))
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def mean_cosine_to_teacher(model: DualEncoder, corpus: Corpus, icfg: InterleaveConfig,
                           A: ResidualTokenizer | None) -> float:
    """Mean cosine between interleaved P-features and the teacher's features
    of the same frames, over every P-frame in the corpus."""
    sims = []
    for v in corpus.videos:
        frames = v.frame_list()
        seq = encode_video_interleaved(model, frames, icfg, A)
        teacher = model.encode_frames(frames)
        p = [t for t, k in enumerate(seq.kinds) if k == "P"]
        sims.extend((seq.features[p] * teacher[p]).sum(axis=1))
    if not sims:
        raise ValueError("corpus has no P-frames under this interleave factor")
    return float(np.mean(sims))


def drop_only(icfg: InterleaveConfig) -> InterleaveConfig:
    return InterleaveConfig(icfg.N, icfg.reduction, use_residual=False,
                            motion_window=icfg.motion_window)


def default_interleave(N: int = 2, p: float = 0.85, strategy: str = "center") -> InterleaveConfig:
    return InterleaveConfig(N=N, reduction=ReductionConfig(mode="drop", p=p, strategy=strategy))


def grounding_corpus(corpus: Corpus, clips_per_video: int, seed: int = 0,
                     fps: float = 1.0) -> tuple[Corpus, list[dict]]:
    """Concatenate shuffled clips into longer videos; each clip's caption
    becomes a query whose ground truth is that clip's time span."""
    if clips_per_video < 1:
        raise ValueError("clips_per_video must be >= 1")
    if len(corpus) < clips_per_video:
        raise ValueError(f"need at least {clips_per_video} clips, got {len(corpus)}")
    order = np.random.default_rng(seed).permutation(len(corpus))
    videos, queries = [], []
    for g in range(len(order) // clips_per_video):
        clips = [corpus.videos[i] for i in order[g * clips_per_video:(g + 1) * clips_per_video]]
        t0 = 0
        for c in clips:
            T = c.frames.shape[0]
            queries.append({"query_id": f"q{len(queries):05d}", "video_id": f"v{g:05d}",
                            "text_ids": list(c.text_ids),
                            "gt_start": t0 / fps, "gt_end": (t0 + T) / fps})
            t0 += T
        videos.append(Video(np.concatenate([c.frames for c in clips]), (),
                            {"clips": [int(i) for i in order[g * clips_per_video:(g + 1) * clips_per_video]]}))
    return Corpus(videos, seed), queries
