"""Frozen toy dual encoder: a pre-norm ViT for frames and a bag-of-embeddings
text tower, both reading out unit-norm features in the same b-dim space."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    H: int = 32
    W: int = 32
    C: int = 3
    P: int = 8
    L: int = 4
    d: int = 64
    n_heads: int = 4
    b: int = 64
    vocab: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.H % self.P or self.W % self.P:
            raise ValueError(f"frame extents {self.H}x{self.W} not divisible by patch size {self.P}")
        if self.d % self.n_heads:
            raise ValueError(f"token width {self.d} not divisible by {self.n_heads} heads")
        if self.K < 1:
            raise ValueError("config yields no patches")

    @property
    def grid(self) -> tuple[int, int]:
        return self.H // self.P, self.W // self.P

    @property
    def K(self) -> int:
        return (self.H * self.W) // (self.P * self.P)

    @property
    def patch_dim(self) -> int:
        return self.P * self.P * self.C

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def patch_count(H: int, W: int, P: int) -> int:
    if H % P or W % P:
        raise ValueError(f"{H}x{W} is not divisible by patch size {P}")
    return (H * W) // (P * P)


def patch_pixels(pixels: np.ndarray, P: int) -> np.ndarray:
    """Row-major flattened P x P x C patches of an H x W x C array."""
    H, W, C = pixels.shape
    return pixels.reshape(H // P, P, W // P, P, C).transpose(0, 2, 1, 3, 4).reshape(-1, P * P * C)


@dataclass
class Frame:
    pixels: np.ndarray  # H x W x C uint8
    t: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3:
            raise DimensionError(f"frame pixels must be HxWxC, got shape {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            self.pixels = np.clip(np.rint(self.pixels), 0, 255).astype(np.uint8)


@dataclass
class TokenSequence:
    """Tokens for one frame. Special tokens (CLS, then residual) come first;
    ``positions`` and ``weights`` describe the patch tokens that follow."""

    tokens: np.ndarray  # n x d
    positions: np.ndarray  # n_patch x 2 (row, col)
    weights: np.ndarray  # n_patch
    has_cls: bool = True
    has_residual: bool = False

    @property
    def n_special(self) -> int:
        return int(self.has_cls) + int(self.has_residual)

    @property
    def n_patches(self) -> int:
        return self.tokens.shape[0] - self.n_special

    @property
    def patch_tokens(self) -> np.ndarray:
        return self.tokens[self.n_special:]


@dataclass
class Feature:
    values: np.ndarray
    normalized: bool = True

    def cosine(self, other: "Feature") -> float:
        a, b = self.values, other.values
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def weight_layout(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Tensor names and shapes in checkpoint order."""
    d, hidden = cfg.d, 4 * cfg.d
    gh, gw = cfg.grid
    layout = [
        ("patch_w", (cfg.patch_dim, d)),
        ("patch_b", (d,)),
        ("cls", (d,)),
        ("pos", (gh, gw, d)),
        ("ln_pre_g", (d,)),
        ("ln_pre_b", (d,)),
    ]
    for i in range(cfg.L):
        layout += [
            (f"blk{i}.ln1_g", (d,)), (f"blk{i}.ln1_b", (d,)),
            (f"blk{i}.qkv_w", (d, 3 * d)), (f"blk{i}.qkv_b", (3 * d,)),
            (f"blk{i}.out_w", (d, d)), (f"blk{i}.out_b", (d,)),
            (f"blk{i}.ln2_g", (d,)), (f"blk{i}.ln2_b", (d,)),
            (f"blk{i}.fc1_w", (d, hidden)), (f"blk{i}.fc1_b", (hidden,)),
            (f"blk{i}.fc2_w", (hidden, d)), (f"blk{i}.fc2_b", (d,)),
        ]
    layout += [
        ("ln_post_g", (d,)), ("ln_post_b", (d,)),
        ("head", (d, cfg.b)),
        ("txt_emb", (cfg.vocab, d)),
        ("txt_proj", (d, cfg.b)),
    ]
    return layout


def init_weights(cfg: EncoderConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    w: dict[str, np.ndarray] = {}
    for name, shape in weight_layout(cfg):
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            w[name] = np.ones(shape)
        elif leaf.endswith("_b") and not leaf.startswith("patch"):
            w[name] = 0.02 * rng.standard_normal(shape)
        elif leaf == "cls":
            w[name] = 0.02 * rng.standard_normal(shape)
        elif leaf == "pos":
            w[name] = 0.1 * rng.standard_normal(shape)
        elif leaf == "patch_b":
            w[name] = np.zeros(shape)
        elif leaf == "txt_emb":
            w[name] = rng.standard_normal(shape)
        else:
            # sharper-than-default attention keeps random-init features content-dependent
            gain = 2.0 if leaf == "qkv_w" else 1.0
            w[name] = gain * rng.standard_normal(shape) / np.sqrt(shape[0])
    return w


@dataclass
class _MergeState:
    r: int
    weights: np.ndarray  # B x n_patch
    positions: np.ndarray  # B x n_patch x 2


class DualEncoder:
    """Frozen vision/text towers. Weights are read-only once constructed."""

    def __init__(self, cfg: EncoderConfig | None = None, weights: dict[str, np.ndarray] | None = None):
        self.cfg = cfg or EncoderConfig()
        raw = weights if weights is not None else init_weights(self.cfg)
        self.w: dict[str, np.ndarray] = {}
        for name, shape in weight_layout(self.cfg):
            arr = np.array(raw[name], dtype=np.float64)
            if arr.shape != shape:
                raise DimensionError(f"weight {name} has shape {arr.shape}, expected {shape}")
            arr.flags.writeable = False
            self.w[name] = arr
        gh, gw = self.cfg.grid
        rows, cols = np.divmod(np.arange(self.cfg.K), gw)
        self._grid_positions = np.stack([rows, cols], axis=1)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, _ in weight_layout(self.cfg):
            h.update(self.w[name].tobytes())
        return h.hexdigest()

    # tokenization

    def _check_frame(self, frame: Frame, H: int, W: int) -> None:
        if frame.pixels.shape != (H, W, self.cfg.C):
            raise DimensionError(
                f"frame shape {frame.pixels.shape} does not match ({H}, {W}, {self.cfg.C})")

    def _project_patches(self, pixels: np.ndarray) -> np.ndarray:
        x = pixels.astype(np.float64) / 127.5 - 1.0
        return patch_pixels(x, self.cfg.P) @ self.w["patch_w"] + self.w["patch_b"]

    def _cls_row(self) -> np.ndarray:
        return self.w["cls"][None, :]

    def patchify(self, frame: Frame) -> TokenSequence:
        cfg = self.cfg
        self._check_frame(frame, cfg.H, cfg.W)
        patches = self._project_patches(frame.pixels) + self.w["pos"].reshape(-1, cfg.d)
        return TokenSequence(
            tokens=np.concatenate([self._cls_row(), patches], axis=0),
            positions=self._grid_positions.copy(),
            weights=np.ones(cfg.K),
        )

    def patchify_resized(self, frame: Frame) -> TokenSequence:
        """Tokenize a frame whose extents differ from the config (resolution
        reduction); the positional grid is area-resampled to the new grid."""
        from .reduction import area_matrix

        H, W, C = frame.pixels.shape
        P = self.cfg.P
        if C != self.cfg.C or H % P or W % P:
            raise DimensionError(f"frame shape {frame.pixels.shape} incompatible with patch size {P}")
        gh, gw = H // P, W // P
        pos = self.w["pos"]
        ry = area_matrix(pos.shape[0], gh)
        rx = area_matrix(pos.shape[1], gw)
        pos_small = np.einsum("ai,ijd,bj->abd", ry, pos, rx).reshape(-1, self.cfg.d)
        patches = self._project_patches(frame.pixels) + pos_small
        rows, cols = np.divmod(np.arange(gh * gw), gw)
        return TokenSequence(
            tokens=np.concatenate([self._cls_row(), patches], axis=0),
            positions=np.stack([rows, cols], axis=1),
            weights=np.ones(gh * gw),
        )

    # transformer

    def _attention(self, x: Tensor, i: int) -> tuple[Tensor, np.ndarray]:
        cfg = self.cfg
        B, n, d = x.shape
        h, dh = cfg.n_heads, d // cfg.n_heads
        w = self.w
        y = ad.layer_norm(x, w[f"blk{i}.ln1_g"], w[f"blk{i}.ln1_b"])
        qkv = ad.matmul(y, w[f"blk{i}.qkv_w"]) + w[f"blk{i}.qkv_b"]
        qkv = ad.transpose(ad.reshape(qkv, (B, n, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ad.matmul(q, ad.swap_last(k)) * (1.0 / np.sqrt(dh))
        att = ad.softmax(scores, axis=-1)
        ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, n, d))
        out = ad.matmul(ctx, w[f"blk{i}.out_w"]) + w[f"blk{i}.out_b"]
        keys = k.data.transpose(0, 2, 1, 3).reshape(B, n, d)
        return out, keys

    def _mlp(self, x: Tensor, i: int) -> Tensor:
        w = self.w
        y = ad.layer_norm(x, w[f"blk{i}.ln2_g"], w[f"blk{i}.ln2_b"])
        y = ad.gelu(ad.matmul(y, w[f"blk{i}.fc1_w"]) + w[f"blk{i}.fc1_b"])
        return ad.matmul(y, w[f"blk{i}.fc2_w"]) + w[f"blk{i}.fc2_b"]

    def forward_tokens(self, x: Tensor, n_special: int = 1,
                       merge: _MergeState | None = None) -> Tensor:
        """Run the blocks on a B x n x d batch; returns the final token states.

        With ``merge`` set, one bipartite merge step runs after each block's
        attention, reducing patch tokens by up to ``merge.r`` per block.
        """
        from .reduction import merge_plan

        w = self.w
        x = ad.layer_norm(x, w["ln_pre_g"], w["ln_pre_b"])
        for i in range(self.cfg.L):
            att, keys = self._attention(x, i)
            x = x + att
            if merge is not None and merge.r > 0:
                mats, new_w, new_pos = [], [], []
                for bi in range(x.shape[0]):
                    M, ww, pos = merge_plan(keys[bi, n_special:], merge.weights[bi],
                                            merge.positions[bi], merge.r)
                    mats.append(M)
                    new_w.append(ww)
                    new_pos.append(pos)
                M = np.stack(mats)
                merged = ad.matmul(M, x[:, n_special:, :])
                x = ad.concat([x[:, :n_special, :], merged], axis=1)
                merge.weights = np.stack(new_w)
                merge.positions = np.stack(new_pos)
            x = x + self._mlp(x, i)
        return x

    def readout(self, x: Tensor) -> Tensor:
        w = self.w
        # keep a unit middle axis so every sample hits the same matmul kernel
        # regardless of batch size (bitwise batch-invariance)
        cls = ad.layer_norm(x[:, 0:1, :], w["ln_post_g"], w["ln_post_b"])
        out = ad.matmul(cls, w["head"])
        return ad.l2_normalize(ad.reshape(out, (x.shape[0], self.cfg.b)))

    def encode_batch(self, tokens: np.ndarray | Tensor, n_special: int = 1,
                     merge: _MergeState | None = None) -> Tensor:
        x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        return self.readout(self.forward_tokens(x, n_special, merge))

    def encode_full(self, tokens: TokenSequence) -> Feature:
        if not tokens.has_cls or tokens.has_residual:
            raise ValueError("encode_full expects a CLS-led token sequence without a residual token")
        out = self.encode_batch(tokens.tokens[None], n_special=1)
        return Feature(out.data[0].copy())

    def encode_frames(self, frames: list[Frame]) -> np.ndarray:
        """Full-token features for a batch of frames, F x b."""
        if not frames:
            return np.zeros((0, self.cfg.b))
        batch = np.stack([self.patchify(f).tokens for f in frames])
        return self.encode_batch(batch).data

    # text tower

    def text_embedding(self, token_ids) -> np.ndarray:
        ids = np.asarray(list(token_ids), dtype=np.int64)
        if ids.size == 0:
            raise ValueError("text id list is empty")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab:
            raise ValueError(f"text ids must lie in [0, {self.cfg.vocab})")
        return self.w["txt_emb"][ids].mean(axis=0) @ self.w["txt_proj"]

    def encode_text(self, token_ids) -> Feature:
        v = self.text_embedding(token_ids)
        return Feature(v / np.linalg.norm(v))

    def encode_texts(self, batch) -> np.ndarray:
        return np.stack([self.encode_text(ids).values for ids in batch])

    def with_weights(self, **updates: np.ndarray) -> "DualEncoder":
        w = dict(self.w)
        w.update(updates)
        return DualEncoder(self.cfg, w)


def fit_text_embeddings(model: DualEncoder, captions: list, targets: np.ndarray,
                        ridge: float = 1e-3) -> DualEncoder:
    """Return a copy of ``model`` whose text embedding table is solved by ridge
    least squares so caption features point at ``targets`` (n x b).

    The random text tower has no relation to the random vision tower; this
    one-off calibration gives the toy model a shared space, after which all
    weights are frozen again.
    """
    cfg = model.cfg
    X = np.zeros((len(captions), cfg.vocab))
    for row, ids in enumerate(captions):
        for tok in ids:
            X[row, tok] += 1.0 / len(ids)
    proj = model.w["txt_proj"]
    # want X @ E @ proj ~= targets  ->  Z = targets @ pinv(proj), then X @ E ~= Z
    Z = targets @ np.linalg.pinv(proj)
    used = np.flatnonzero(X.sum(axis=0))
    Xu = X[:, used]
    Eu = np.linalg.solve(Xu.T @ Xu + ridge * np.eye(used.size), Xu.T @ Z)
    emb = np.array(model.w["txt_emb"])
    emb[used] = Eu
    return model.with_weights(txt_emb=emb)


def flops_ledger(cfg: EncoderConfig, n_tokens: int, n_patches: int | None = None) -> dict[str, int]:
    """Multiply-accumulate counts per term for one encoder pass over ``n_tokens``.

    ``n_patches`` defaults to ``n_tokens - 1`` (every token but CLS was
    patch-projected).
    """
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    n, d = n_tokens, cfg.d
    if n_patches is None:
        n_patches = n - 1
    return {
        "patch_projection": n_patches * cfg.patch_dim * d,
        "attention_projections": cfg.L * 4 * n * d * d,  # q, k, v, out
        "attention_mixing": cfg.L * 2 * n * n * d,  # QK^T and AV
        "mlp": cfg.L * 8 * n * d * d,  # d -> 4d -> d
        "readout": d * cfg.b,
    }


def count_flops_full(cfg: EncoderConfig, n_tokens: int, n_patches: int | None = None) -> int:
    return sum(flops_ledger(cfg, n_tokens, n_patches).values())


def model_parameter_count(cfg: EncoderConfig, vision_only: bool = False) -> int:
    total = 0
    for name, shape in weight_layout(cfg):
        if vision_only and name.startswith("txt_"):
            continue
        total += int(np.prod(shape))
    return total
