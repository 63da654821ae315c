"""Binary and CSV artifact formats. Every binary file starts with a 4-byte
magic and a little-endian uint32 version; writes are atomic."""
from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .distill import Corpus, Video
from .residual import FeatureSequence, ResidualTokenizer
from .teacher import DualEncoder, EncoderConfig, weight_layout

VERSION = 1
_CONFIG_KEYS = ("H", "W", "C", "P", "L", "d", "n_heads", "b", "vocab", "seed")


class FormatError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


class _Reader:
    def __init__(self, data: bytes, path):
        self.buf, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def array(self, dtype: str, shape) -> np.ndarray:
        dt = np.dtype(dtype)
        n = int(np.prod(shape))
        return np.frombuffer(self.take(n * dt.itemsize), dtype=dt).reshape(shape).copy()

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.path}: {len(self.buf) - self.pos} trailing bytes")


def _open(path, magic: bytes) -> _Reader:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"no such file: {path}") from None
    r = _Reader(data, path)
    got = r.take(4) if len(data) >= 4 else data
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    return r


def _header(magic: bytes, *ints: int) -> bytes:
    return magic + struct.pack(f"<{1 + len(ints)}I", VERSION, *ints)


# weights

def dump_weights(model: DualEncoder) -> bytes:
    cfg = model.cfg
    parts = [_header(b"RVTW"), struct.pack("<10i", *(getattr(cfg, k) for k in _CONFIG_KEYS))]
    for name, _ in weight_layout(cfg):
        parts.append(model.w[name].astype("<f8").tobytes())
    return b"".join(parts)


def write_weights(path, model: DualEncoder) -> None:
    atomic_write(path, dump_weights(model))


def read_weights(path) -> DualEncoder:
    r = _open(path, b"RVTW")
    cfg = EncoderConfig(**dict(zip(_CONFIG_KEYS, struct.unpack("<10i", r.take(40)))))
    weights = {name: r.array("<f8", shape) for name, shape in weight_layout(cfg)}
    r.done()
    return DualEncoder(cfg, weights)


# motion

def write_motion(path, fields: np.ndarray) -> None:
    fields = np.asarray(fields)
    if fields.ndim != 4:
        raise ValueError("motion field must be n_frames x H' x W' x C'")
    atomic_write(path, _header(b"RVTM", *fields.shape) + fields.astype("<f4").tobytes())


def read_motion(path) -> np.ndarray:
    r = _open(path, b"RVTM")
    shape = r.u32(4)
    out = r.array("<f4", shape)
    r.done()
    return out


# features

_KIND_CODE = {"I": 0, "P": 1}


def write_features(path, seq: FeatureSequence | np.ndarray, with_kinds: bool = True) -> None:
    if isinstance(seq, FeatureSequence):
        feats, kinds = seq.features, seq.kinds
    else:
        feats, kinds, with_kinds = np.asarray(seq), None, False
    count, b = feats.shape
    body = feats.astype("<f4").tobytes()
    if with_kinds:
        body += bytes(_KIND_CODE[k] for k in kinds)
    atomic_write(path, _header(b"RVTF", count, b, int(with_kinds)) + body)


def read_features(path) -> tuple[np.ndarray, list[str] | None]:
    r = _open(path, b"RVTF")
    count, b, flag = r.u32(3)
    feats = r.array("<f4", (count, b))
    kinds = None
    if flag:
        kinds = ["I" if c == 0 else "P" for c in r.take(count)]
    r.done()
    return feats, kinds


# residual tokenizer

def write_tokenizer(path, A: ResidualTokenizer) -> None:
    b, d = A.weight.shape
    data = _header(b"RVTA", b, d) + A.weight.astype("<f8").tobytes() + A.bias.astype("<f8").tobytes()
    atomic_write(path, data)


def read_tokenizer(path) -> ResidualTokenizer:
    r = _open(path, b"RVTA")
    b, d = r.u32(2)
    A = ResidualTokenizer(r.array("<f8", (b, d)), r.array("<f8", (d,)))
    r.done()
    return A


# corpus

def dump_corpus(corpus: Corpus) -> bytes:
    if not corpus.videos:
        raise ValueError("empty corpus")
    T, H, W, C = corpus.videos[0].frames.shape
    parts = [_header(b"RVTC", len(corpus.videos), T, H, W, C, corpus.seed)]
    for v in corpus.videos:
        if v.frames.shape != (T, H, W, C):
            raise ValueError("all videos in a corpus file must share extents")
        meta = json.dumps(v.params, sort_keys=True).encode()
        parts.append(struct.pack(f"<I{len(v.text_ids)}I", len(v.text_ids), *v.text_ids))
        parts.append(struct.pack("<I", len(meta)) + meta)
        parts.append(v.frames.astype(np.uint8).tobytes())
    return b"".join(parts)


def write_corpus(path, corpus: Corpus) -> None:
    atomic_write(path, dump_corpus(corpus))


def read_corpus(path) -> Corpus:
    r = _open(path, b"RVTC")
    n, T, H, W, C, seed = r.u32(6)
    videos = []
    for _ in range(n):
        n_ids = r.u32()
        ids = tuple(struct.unpack(f"<{n_ids}I", r.take(4 * n_ids)))
        meta = json.loads(r.take(r.u32()).decode())
        frames = r.array("u1", (T, H, W, C))
        videos.append(Video(frames, ids, meta))
    r.done()
    return Corpus(videos, seed)


# CSV

def _csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(path, header: list[str], rows) -> None:
    atomic_write_text(path, _csv_text(header, rows))


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_loss_history(path, history: list[dict]) -> None:
    cols = ["epoch", "ce", "mse", "mean_cosine"]
    write_csv(path, cols, ([h[c] for c in cols] for h in history))


QUERY_COLUMNS = ["query_id", "video_id", "text_ids", "gt_start", "gt_end"]
RESULT_COLUMNS = ["query_id", "rank", "start", "end", "score"]


def write_queries(path, queries: list[dict]) -> None:
    rows = ([q["query_id"], q["video_id"], " ".join(map(str, q["text_ids"])),
             float(q["gt_start"]), float(q["gt_end"])] for q in queries)
    write_csv(path, QUERY_COLUMNS, rows)


def read_queries(path) -> list[dict]:
    out = []
    for row in read_csv(path):
        missing = [c for c in QUERY_COLUMNS if c not in row]
        if missing:
            raise FormatError(f"{path}: missing query columns {missing}")
        out.append({
            "query_id": row["query_id"],
            "video_id": row["video_id"],
            "text_ids": [int(x) for x in row["text_ids"].split()],
            "gt_start": float(row["gt_start"]),
            "gt_end": float(row["gt_end"]),
        })
    return out
