"""The embedding container: schema, binary format, validation, and the
seeded synthetic generator.

A batch carries per-video frame embeddings with a pooled vector, and
per-text token embeddings with a pooled vector, plus the ground-truth
pairing (many texts may describe one video; five captions per video is
the default regime).

Binary container (bit-exact, little-endian throughout):

    offset  field
    0       magic, 8 ASCII bytes ``MSAMEMB1``
    8       u32 version (= 1)
    12      u32 D (embedding width)
    16      u32 V (video count)
    20      u32 T (text count)
    24      V video records, then T text records, back to back
    end-4   u32 CRC-32 (IEEE 802.3 polynomial, zlib convention) over
            every preceding byte

    video record: u64 id | u32 F | F*D float32 frames (row-major)
                  | D float32 pooled
    text record:  u64 id | u64 video_id | u32 L
                  | L*D float32 tokens (row-major) | D float32 pooled

Readers verify the checksum before interpreting any payload, and every
slice is bounds-checked against the actual buffer, so corrupt or
adversarial input produces a clean error rather than an overread.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Union

import numpy as np

from .errors import CorruptionError, FormatError, ValidationError
from .rng import Rng
from .tensor import Tensor

MAGIC = b"MSAMEMB1"
VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass
class VideoRecord:
    id: int
    frames: Tensor  # [F, D] float32
    pooled: Tensor  # [D] float32


@dataclass
class TextRecord:
    id: int
    video_id: int
    tokens: Tensor  # [L, D] float32
    pooled: Tensor  # [D] float32


@dataclass
class EmbeddingBatch:
    dim: int
    videos: list
    texts: list

    def video_index(self) -> dict:
        return {v.id: i for i, v in enumerate(self.videos)}


@dataclass
class SynthSpec:
    """Knobs for the synthetic generator. ``cluster_noise`` in [0, 1]
    controls how far frames/captions scatter around each video's unit
    cluster center (0 = perfectly tight)."""

    num_videos: int
    frames_per_video: int
    captions_per_video: int = 5
    token_len: int = 4
    dim: int = 32
    cluster_noise: float = 0.1
    seed: int = 0

    def check(self) -> None:
        counts = (
            self.num_videos,
            self.frames_per_video,
            self.captions_per_video,
            self.token_len,
            self.dim,
        )
        if any(c < 1 for c in counts):
            raise ValidationError(f"all synthetic counts must be >= 1, got {counts}")
        if not 0.0 <= self.cluster_noise <= 1.0:
            raise ValidationError(f"cluster_noise must be in [0, 1], got {self.cluster_noise}")


# -- validation -------------------------------------------------------------------


def validate(batch: EmbeddingBatch) -> list:
    """Every invariant violation as a human-readable diagnostic string;
    an empty list means the batch is valid. Pure, never raises."""
    diags = []
    if batch.dim < 1:
        diags.append(f"batch: dim must be positive, got {batch.dim}")
    seen = set()
    for v in batch.videos:
        if v.id in seen:
            diags.append(f"video {v.id}: duplicate id")
        seen.add(v.id)
        f = v.frames.data
        if f.ndim != 2 or f.shape[1] != batch.dim:
            diags.append(f"video {v.id}: frames shape {f.shape} does not match dim {batch.dim}")
        elif f.shape[0] < 1:
            diags.append(f"video {v.id}: needs at least one frame")
        if v.pooled.data.shape != (batch.dim,):
            diags.append(f"video {v.id}: pooled shape {v.pooled.data.shape} != ({batch.dim},)")
        if not np.isfinite(f).all() or not np.isfinite(v.pooled.data).all():
            diags.append(f"video {v.id}: non-finite embedding values")
    text_seen = set()
    for t in batch.texts:
        if t.id in text_seen:
            diags.append(f"text {t.id}: duplicate id")
        text_seen.add(t.id)
        if t.video_id not in seen:
            diags.append(f"text {t.id}: video_id {t.video_id} not present in batch")
        tok = t.tokens.data
        if tok.ndim != 2 or tok.shape[1] != batch.dim:
            diags.append(f"text {t.id}: tokens shape {tok.shape} does not match dim {batch.dim}")
        elif tok.shape[0] < 1:
            diags.append(f"text {t.id}: needs at least one token")
        if t.pooled.data.shape != (batch.dim,):
            diags.append(f"text {t.id}: pooled shape {t.pooled.data.shape} != ({batch.dim},)")
        if not np.isfinite(tok).all() or not np.isfinite(t.pooled.data).all():
            diags.append(f"text {t.id}: non-finite embedding values")
    return diags


# -- writing ----------------------------------------------------------------------


def _f32_bytes(t: Tensor) -> bytes:
    return np.ascontiguousarray(t.data, dtype="<f4").tobytes()


def write_container(batch: EmbeddingBatch, destination: Union[str, BinaryIO]) -> int:
    """Serialize a valid batch; returns the byte count written.

    Validation runs first so nothing is emitted for a broken batch."""
    diags = validate(batch)
    if diags:
        raise ValidationError("refusing to write invalid batch: " + "; ".join(diags[:5]))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_U32.pack(VERSION))
    buf.write(_U32.pack(batch.dim))
    buf.write(_U32.pack(len(batch.videos)))
    buf.write(_U32.pack(len(batch.texts)))
    for v in batch.videos:
        buf.write(_U64.pack(v.id))
        buf.write(_U32.pack(v.frames.data.shape[0]))
        buf.write(_f32_bytes(v.frames))
        buf.write(_f32_bytes(v.pooled))
    for t in batch.texts:
        buf.write(_U64.pack(t.id))
        buf.write(_U64.pack(t.video_id))
        buf.write(_U32.pack(t.tokens.data.shape[0]))
        buf.write(_f32_bytes(t.tokens))
        buf.write(_f32_bytes(t.pooled))
    payload = buf.getvalue()
    blob = payload + _U32.pack(zlib.crc32(payload) & 0xFFFFFFFF)
    if isinstance(destination, str):
        with open(destination, "wb") as fh:
            fh.write(blob)
    else:
        destination.write(blob)
    return len(blob)


# -- reading ----------------------------------------------------------------------


class _Cursor:
    """Bounds-checked reader over an in-memory buffer."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptionError(
                f"container truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos})"
            )
        out = memoryview(self.data)[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(8, what))[0]

    def f32s(self, count: int, what: str) -> np.ndarray:
        raw = self.take(count * 4, what)
        return np.frombuffer(raw, dtype="<f4").copy()


def read_container(source: Union[str, bytes, BinaryIO]) -> EmbeddingBatch:
    """Parse and fully validate a container.

    The trailing CRC is verified over the whole byte stream before any
    payload is interpreted, so any corruption (including a single
    flipped bit anywhere) surfaces as ``CorruptionError``."""
    if isinstance(source, str):
        with open(source, "rb") as fh:
            data = fh.read()
    elif isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    else:
        data = source.read()

    if len(data) < len(MAGIC) + 4 * 4 + 4:
        raise CorruptionError(f"container too short ({len(data)} bytes)")
    body, stored = data[:-4], _U32.unpack(data[-4:])[0]
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if actual != stored:
        raise CorruptionError(
            f"checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )
    if body[: len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic {body[:8]!r}, expected {MAGIC!r}")

    cur = _Cursor(body)
    cur.pos = len(MAGIC)
    version = cur.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    dim = cur.u32("dim")
    n_videos = cur.u32("video count")
    n_texts = cur.u32("text count")
    if dim < 1:
        raise FormatError(f"embedding width must be positive, got {dim}")

    videos = []
    for _ in range(n_videos):
        vid = cur.u64("video id")
        f = cur.u32("frame count")
        if f < 1:
            raise FormatError(f"video {vid}: frame count must be >= 1")
        frames = cur.f32s(f * dim, f"video {vid} frames").reshape(f, dim)
        pooled = cur.f32s(dim, f"video {vid} pooled")
        videos.append(
            VideoRecord(vid, Tensor(frames, dtype=np.float32, validate=False),
                        Tensor(pooled, dtype=np.float32, validate=False))
        )
    texts = []
    for _ in range(n_texts):
        tid = cur.u64("text id")
        vid = cur.u64("text video_id")
        l = cur.u32("token count")
        if l < 1:
            raise FormatError(f"text {tid}: token count must be >= 1")
        tokens = cur.f32s(l * dim, f"text {tid} tokens").reshape(l, dim)
        pooled = cur.f32s(dim, f"text {tid} pooled")
        texts.append(
            TextRecord(tid, vid, Tensor(tokens, dtype=np.float32, validate=False),
                       Tensor(pooled, dtype=np.float32, validate=False))
        )
    if cur.pos != len(body):
        raise CorruptionError(
            f"{len(body) - cur.pos} trailing bytes after the last declared record"
        )

    batch = EmbeddingBatch(dim, videos, texts)
    diags = validate(batch)
    if diags:
        first = diags[0]
        if "not present" in first or "duplicate" in first:
            from .errors import PairingError

            raise PairingError("; ".join(diags))
        raise ValidationError("; ".join(diags))
    return batch


# -- synthetic data ----------------------------------------------------------------


def _unit(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    return vectors / np.maximum(norms, 1e-12)


def gen_synthetic(spec: SynthSpec) -> EmbeddingBatch:
    """A pure function of the spec: one unit cluster center per video,
    frames and caption pooled vectors drawn around it, token embeddings
    around each caption's pooled vector.

    The Gaussian perturbations use a per-coordinate deviation of
    ``cluster_noise / sqrt(dim)`` so the expected displacement norm
    equals ``cluster_noise`` at any width."""
    spec.check()
    rng = Rng(spec.seed)
    centers_rng = rng.child(1)
    frames_rng = rng.child(2)
    caption_rng = rng.child(3)
    token_rng = rng.child(4)

    d = spec.dim
    step = spec.cluster_noise / np.sqrt(d)
    centers = _unit(centers_rng.normal((spec.num_videos, d)))

    videos = []
    texts = []
    next_text_id = 1_000_000  # disjoint from video ids by construction
    for i in range(spec.num_videos):
        frames = _unit(centers[i] + frames_rng.normal((spec.frames_per_video, d), scale=step))
        pooled = _unit(frames.mean(axis=0))
        videos.append(
            VideoRecord(
                i + 1,
                Tensor(frames.astype(np.float32)),
                Tensor(pooled.astype(np.float32)),
            )
        )
        for _ in range(spec.captions_per_video):
            cap = _unit(centers[i] + caption_rng.normal((d,), scale=step))
            toks = cap + token_rng.normal((spec.token_len, d), scale=step)
            texts.append(
                TextRecord(
                    next_text_id,
                    i + 1,
                    Tensor(toks.astype(np.float32)),
                    Tensor(cap.astype(np.float32)),
                )
            )
            next_text_id += 1
    return EmbeddingBatch(d, videos, texts)
