"""Deterministic desk-scale training and evaluation.

The trainer owns every learnable piece of state (pooling gate, the two
probabilistic-embedding branches, the logit scale) and fits them to an
embedding batch with Adam plus decoupled weight decay under a cosine
learning-rate schedule. Encoders are out of scope: inputs arrive as
precomputed embeddings, and only post-encoder parameters train (at the
configured rate; upstream fine-tuning is deliberately absent).

Everything is a pure function of (data, config): batch order, caption
picks, and parameter init all draw from the seeded stream, so repeated
runs produce bit-identical histories and checkpoints.

Checkpoint format (little-endian, CRC-sealed like the embedding
container):

    magic ``MSAMCKP1`` | u32 version=1 | u32 D | u32 k | u32 count
    count sections: u32 name_len | ASCII name | u32 ndim | ndim x u32
    dims | prod(dims) float32 values
    trailing u32 CRC-32 over all preceding bytes
"""

from __future__ import annotations

import io
import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import BinaryIO, Optional, Union

import numpy as np

from . import tensor as T
from .ciffp import CiffpParams, ciffp_similarity
from .embio import EmbeddingBatch
from .errors import (
    ContractError,
    CorruptionError,
    FormatError,
    PairingError,
    TrainingAborted,
)
from .losses import (
    LOG_SCALE_MAX,
    LogitScale,
    LossBreakdown,
    ddsl_loss,
    dst_loss,
    total_loss,
    vtm_loss,
)
from .metrics import T2V, V2T, RetrievalReport, report, t2v_ranks, v2t_ranks
from .msalm import MsalmParams, adaptive_semantic_construction
from .rng import Rng
from .tensor import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CKPT_MAGIC = b"MSAMCKP1"
CKPT_VERSION = 1

_U32 = struct.Struct("<I")


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 500
    base_lr: float = 1e-5
    weight_decay: float = 0.2
    lam: float = 0.1
    k: int = 7
    seed: int = 0
    eval_every: int = 0  # 0 disables mid-run evaluation
    share_msalm: bool = False

    def check(self) -> None:
        if self.batch_size < 1 or self.steps < 1 or self.k < 1:
            raise ContractError("batch_size, steps, and k must be positive")
        if self.base_lr <= 0 or self.weight_decay < 0 or self.lam < 0:
            raise ContractError("base_lr must be positive; weight_decay and lambda nonnegative")
        if self.eval_every < 0:
            raise ContractError("eval_every must be >= 0")


@dataclass
class ModelParams:
    ciffp: CiffpParams
    msalm_text: MsalmParams
    msalm_video: MsalmParams
    scale: LogitScale

    @property
    def shared_msalm(self) -> bool:
        return self.msalm_text is self.msalm_video

    def named_parameters(self):
        """(name, tensor, decays) triples in a fixed, documented order."""
        yield from self.ciffp.named("ciffp")
        if self.shared_msalm:
            yield from self.msalm_text.named("msalm_shared")
        else:
            yield from self.msalm_text.named("msalm_text")
            yield from self.msalm_video.named("msalm_video")
        yield from self.scale.named("scale")

    def on_tape(self, tape: T.Tape) -> "ModelParams":
        if self.shared_msalm:
            shared = self.msalm_text.on_tape(tape, "msalm_shared")
            text = video = shared
        else:
            text = self.msalm_text.on_tape(tape, "msalm_text")
            video = self.msalm_video.on_tape(tape, "msalm_video")
        return ModelParams(
            ciffp=self.ciffp.on_tape(tape, "ciffp"),
            msalm_text=text,
            msalm_video=video,
            scale=self.scale.on_tape(tape, "scale"),
        )

    def with_values(self, values: dict) -> "ModelParams":
        """Rebuild with replaced tensors (missing names keep current)."""

        def pick(name, current):
            return values.get(name, current)

        ciffp = CiffpParams(
            pick("ciffp.gate_weight", self.ciffp.gate_weight),
            pick("ciffp.gate_bias", self.ciffp.gate_bias),
        )

        def rebuild_msalm(src: MsalmParams, prefix: str) -> MsalmParams:
            kwargs = {
                f: pick(f"{prefix}.{f}", getattr(src, f)) for f in src._DECAYS
            }
            return MsalmParams(k=src.k, sigma_floor=src.sigma_floor, **kwargs)

        if self.shared_msalm:
            shared = rebuild_msalm(self.msalm_text, "msalm_shared")
            text = video = shared
        else:
            text = rebuild_msalm(self.msalm_text, "msalm_text")
            video = rebuild_msalm(self.msalm_video, "msalm_video")
        scale = LogitScale(pick("scale.log_tau_inv", self.scale.log_tau_inv))
        return ModelParams(ciffp, text, video, scale)

    def astype(self, dtype) -> "ModelParams":
        values = {name: t.astype(dtype) for name, t, _ in self.named_parameters()}
        return self.with_values(values)

    @property
    def dim(self) -> int:
        return self.ciffp.gate_weight.data.shape[0]

    @property
    def k(self) -> int:
        return self.msalm_text.k


def init_params(dim: int, config: TrainConfig, dtype=np.float32) -> ModelParams:
    """Square projections at identity, biases and the gate at zero,
    queries seeded random at scale 1/sqrt(D), logit scale at ln(100).
    Fully determined by (dim, config.seed)."""
    if dim < 1:
        raise ContractError(f"dim must be positive, got {dim}")
    base = Rng(config.seed)
    text = MsalmParams.init(dim, config.k, base.child(11), dtype=dtype)
    video = text if config.share_msalm else MsalmParams.init(
        dim, config.k, base.child(12), dtype=dtype
    )
    return ModelParams(
        ciffp=CiffpParams.init(dim, dtype),
        msalm_text=text,
        msalm_video=video,
        scale=LogitScale.init(dtype),
    )


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total_steps))."""
    if total_steps < 1:
        raise ContractError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def init(cls, params: ModelParams) -> "OptimizerState":
        m = {name: np.zeros_like(t.data) for name, t, _ in params.named_parameters()}
        v = {name: np.zeros_like(t.data) for name, t, _ in params.named_parameters()}
        return cls(m=m, v=v, step=0)


def adam_step(
    params: ModelParams,
    grads: dict,
    state: OptimizerState,
    lr: float,
    weight_decay: float,
) -> tuple:
    """One bias-corrected Adam update with decoupled decay applied to
    weight matrices only (never biases, layer-norm terms, or the logit
    scale). Returns (new params, new state); inputs are not mutated."""
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    t_step = state.step + 1
    c1 = 1.0 - ADAM_BETA1**t_step
    c2 = 1.0 - ADAM_BETA2**t_step
    new_m, new_v, new_values = {}, {}, {}
    for name, tensor_value, decays in params.named_parameters():
        p = tensor_value.data
        g_t = grads.get(name)
        g = g_t.data if g_t is not None else np.zeros_like(p)
        if g.shape != p.shape:
            raise ContractError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name} shape {p.shape}"
            )
        g = g.astype(p.dtype, copy=False)
        m = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        new_p = p - np.asarray(lr, p.dtype) * update.astype(p.dtype, copy=False)
        if decays and weight_decay > 0.0:
            new_p = new_p - np.asarray(lr * weight_decay, p.dtype) * p
        new_m[name], new_v[name] = m, v
        new_values[name] = Tensor._wrap(new_p)
    return params.with_values(new_values), OptimizerState(new_m, new_v, t_step)


def _clamp_scale(params: ModelParams) -> ModelParams:
    dtype = params.scale.log_tau_inv.data.dtype
    cap = np.asarray(LOG_SCALE_MAX, dtype=dtype)
    raw = float(params.scale.log_tau_inv.data.reshape(()))
    if raw <= float(cap):
        return params
    return params.with_values({"scale.log_tau_inv": Tensor._wrap(cap)})


# -- data marshaling ------------------------------------------------------------


@dataclass
class _Arrays:
    """Batch tensors stacked once up front (uniform F required; tokens
    are stacked only when requested, and then must share one L)."""

    frames: np.ndarray  # [B,F,D]
    video_pooled: np.ndarray  # [B,D]
    tokens: Optional[np.ndarray]  # [T,L,D] or None for token-free use
    text_pooled: np.ndarray  # [T,D]
    gt: np.ndarray  # [T] video index per text
    texts_of_video: list  # video index -> list of text indices


def _stack(data: EmbeddingBatch, with_tokens: bool = True) -> tuple:
    if not data.videos:
        raise ContractError("batch has no videos")
    if not data.texts:
        raise ContractError("batch has no texts")
    f_counts = {v.frames.data.shape[0] for v in data.videos}
    if len(f_counts) != 1:
        raise ContractError(
            f"batched training needs a uniform frame count, got {sorted(f_counts)}"
        )
    tokens = None
    if with_tokens:
        l_counts = {t.tokens.data.shape[0] for t in data.texts}
        if len(l_counts) != 1:
            raise ContractError(
                f"batched training needs a uniform token count, got {sorted(l_counts)}"
            )
        tokens = np.stack([t.tokens.data for t in data.texts])
    index = data.video_index()
    gt = np.empty(len(data.texts), dtype=np.int64)
    texts_of_video = [[] for _ in data.videos]
    for j, t in enumerate(data.texts):
        if t.video_id not in index:
            raise PairingError(f"text {t.id}: video_id {t.video_id} not present")
        gt[j] = index[t.video_id]
        texts_of_video[gt[j]].append(j)
    missing = [data.videos[i].id for i, lst in enumerate(texts_of_video) if not lst]
    return _Arrays(
        frames=np.stack([v.frames.data for v in data.videos]),
        video_pooled=np.stack([v.pooled.data for v in data.videos]),
        tokens=tokens,
        text_pooled=np.stack([t.pooled.data for t in data.texts]),
        gt=gt,
        texts_of_video=texts_of_video,
    ), missing


# -- training -------------------------------------------------------------------


@dataclass
class EvalPoint:
    step: int
    t2v: RetrievalReport
    v2t: RetrievalReport


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)  # LossBreakdown (floats)
    evals: list = field(default_factory=list)  # EvalPoint


def _forward_losses(
    arrays: _Arrays, video_idx: np.ndarray, text_idx: np.ndarray,
    taped: ModelParams, lam: float,
) -> LossBreakdown:
    frames_b = Tensor._wrap(np.ascontiguousarray(arrays.frames[video_idx]))
    fv_b = Tensor._wrap(np.ascontiguousarray(arrays.video_pooled[video_idx]))
    tokens_b = Tensor._wrap(np.ascontiguousarray(arrays.tokens[text_idx]))
    ft_b = Tensor._wrap(np.ascontiguousarray(arrays.text_pooled[text_idx]))

    trace = ciffp_similarity(frames_b, ft_b, taped.ciffp)
    l_vtm = vtm_loss(trace.s_vt, taped.scale)
    pe_text = adaptive_semantic_construction(tokens_b, ft_b, taped.msalm_text)
    pe_video = adaptive_semantic_construction(frames_b, fv_b, taped.msalm_video)
    l_ddsl = ddsl_loss(pe_text, pe_video)
    l_dst = dst_loss(pe_text, pe_video)
    return total_loss(l_vtm, l_ddsl, l_dst, lam)


def train(data: EmbeddingBatch, config: TrainConfig,
          params: Optional[ModelParams] = None) -> tuple:
    """Fit all parameters to the batch; returns (params, history).

    Each step samples batch_size videos (seeded shuffle per epoch,
    remainder dropped) and one caption per video, keeping the paired
    diagonal of the matching loss well defined. A batch size above the
    video count clamps down to it. Non-finite losses abort loudly."""
    config.check()
    arrays, videos_without_texts = _stack(data)
    if videos_without_texts:
        raise PairingError(
            f"videos without captions cannot be trained on: ids {videos_without_texts[:5]}"
        )
    n_videos = arrays.frames.shape[0]
    bs = min(config.batch_size, n_videos)

    if params is None:
        params = init_params(data.dim, config)
    opt = OptimizerState.init(params)
    sampler = Rng(config.seed).child(5)
    history = TrainHistory()

    perm = np.empty(0, dtype=np.int64)
    pos = n_videos
    for step in range(config.steps):
        if pos + bs > n_videos:
            perm = sampler.permutation(n_videos)
            pos = 0
        video_idx = perm[pos:pos + bs]
        pos += bs
        draws = sampler.u64(bs)
        text_idx = np.array(
            [
                arrays.texts_of_video[v][int(draws[j] % len(arrays.texts_of_video[v]))]
                for j, v in enumerate(video_idx)
            ],
            dtype=np.int64,
        )

        tape = T.Tape()
        taped = params.on_tape(tape)
        breakdown = _forward_losses(arrays, video_idx, text_idx, taped, config.lam)
        flat = breakdown.floats()
        if not all(map(math.isfinite, (flat.l_vtm, flat.l_ddsl, flat.l_dst, flat.total))):
            raise TrainingAborted(
                f"non-finite loss at step {step}: vtm={flat.l_vtm} "
                f"ddsl={flat.l_ddsl} dst={flat.l_dst}"
            )
        grads = T.backward(tape, breakdown.total)
        lr = cosine_lr(step, config.steps, config.base_lr)
        params, opt = adam_step(params, grads, opt, lr, config.weight_decay)
        params = _clamp_scale(params)
        history.steps.append(flat)

        if config.eval_every and (step + 1) % config.eval_every == 0:
            t2v_rep, v2t_rep = evaluate(data, params)
            history.evals.append(EvalPoint(step + 1, t2v_rep, v2t_rep))
    return params, history


EVAL_CHUNK = 64


def evaluate(data: EmbeddingBatch, params: ModelParams) -> tuple:
    """Score every video against every text with the pooling pipeline
    (probabilistic embeddings are a training-time device and play no
    role here) and report both retrieval directions.

    Videos are processed in fixed chunks; per-video computations are
    independent, so chunking leaves scores bit-identical while keeping
    peak memory at chunk x texts x dim. Token sequences play no role
    here, so containers with varying caption lengths evaluate fine."""
    arrays, _ = _stack(data, with_tokens=False)
    n_videos = arrays.frames.shape[0]
    texts = Tensor._wrap(arrays.text_pooled)
    rows = []
    for lo in range(0, n_videos, EVAL_CHUNK):
        hi = min(lo + EVAL_CHUNK, n_videos)
        chunk = Tensor._wrap(np.ascontiguousarray(arrays.frames[lo:hi]))
        rows.append(ciffp_similarity(chunk, texts, params.ciffp).s_vt.data)
    s_vt = np.concatenate(rows, axis=0)
    t2v_rep = report(t2v_ranks(s_vt, arrays.gt), T2V)
    v2t_rep = report(v2t_ranks(s_vt, arrays.gt), V2T)
    return t2v_rep, v2t_rep


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(params: ModelParams, destination: Union[str, BinaryIO]) -> int:
    """Serialize parameters as float32 sections; returns bytes written."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(_U32.pack(CKPT_VERSION))
    buf.write(_U32.pack(params.dim))
    buf.write(_U32.pack(params.k))
    sections = list(params.named_parameters())
    buf.write(_U32.pack(len(sections)))
    for name, tensor_value, _ in sections:
        encoded = name.encode("ascii")
        buf.write(_U32.pack(len(encoded)))
        buf.write(encoded)
        arr = np.ascontiguousarray(tensor_value.data, dtype="<f4")
        buf.write(_U32.pack(arr.ndim))
        for dim in arr.shape:
            buf.write(_U32.pack(dim))
        buf.write(arr.tobytes())
    payload = buf.getvalue()
    blob = payload + _U32.pack(zlib.crc32(payload) & 0xFFFFFFFF)
    if isinstance(destination, str):
        with open(destination, "wb") as fh:
            fh.write(blob)
    else:
        destination.write(blob)
    return len(blob)


def load_checkpoint(source: Union[str, bytes, BinaryIO]) -> ModelParams:
    if isinstance(source, str):
        with open(source, "rb") as fh:
            data = fh.read()
    elif isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    else:
        data = source.read()
    if len(data) < len(CKPT_MAGIC) + 16 + 4:
        raise CorruptionError(f"checkpoint too short ({len(data)} bytes)")
    body, stored = data[:-4], _U32.unpack(data[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise CorruptionError("checkpoint checksum mismatch")
    if body[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {body[:8]!r}")
    from .embio import _Cursor  # same bounds-checked reader

    cur = _Cursor(body)
    cur.pos = len(CKPT_MAGIC)
    version = cur.u32("version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    dim = cur.u32("dim")
    k = cur.u32("k")
    count = cur.u32("section count")
    values = {}
    for _ in range(count):
        name_len = cur.u32("name length")
        name = bytes(cur.take(name_len, "name")).decode("ascii")
        ndim = cur.u32("ndim")
        shape = tuple(cur.u32("dim size") for _ in range(ndim))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        values[name] = Tensor._wrap(cur.f32s(size, name).reshape(shape))
    if cur.pos != len(body):
        raise CorruptionError("trailing bytes after the last checkpoint section")

    shared = any(n.startswith("msalm_shared.") for n in values)
    template = init_params(dim, TrainConfig(k=k, seed=0, share_msalm=shared))
    expected = {n for n, _, _ in template.named_parameters()}
    if expected != set(values):
        missing = sorted(expected - set(values))[:3]
        extra = sorted(set(values) - expected)[:3]
        raise FormatError(
            f"checkpoint sections do not match the model: missing {missing}, extra {extra}"
        )
    return template.with_values(values)
