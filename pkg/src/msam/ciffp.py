"""Cross-modal interactive feature fusion pooling.

Produces the video-text similarity matrix from per-video frame
embeddings and pooled text embeddings through a six-stage pipeline:

    1. L2-normalize every frame and text vector.
    2. Per (video, text), softmax over the frame axis of frame-text dot
       products: text-conditioned frame attention.
    3. Aggregate frames with those weights: one pooled video vector per
       (video, text).
    4. Per video, softmax over the text axis of pooled-video/text dot
       products, and aggregate the pooled vectors across texts into a
       text-refined video vector (replicated back along the text axis).
    5. A learned scalar gate (sigmoid of a D->1 projection of the
       pooled vector) blends the text-conditioned and text-refined
       vectors; a residual adds the pooled vector back on top. The
       pooled branch therefore enters with weight (1 + gate), which is
       kept exactly as designed rather than renormalized.
    6. Score = dot(blended vector, normalized text). Only the text side
       is normalized here, so scores are not bounded by 1.

Everything is differentiable through the tape; scoring at inference
uses the same function without one.

Equivariance is exact by construction: permuting videos permutes the
score rows bit-identically and permuting texts permutes the columns
bit-identically. Cross-modal dot products therefore go through the
fixed-order contraction kernels rather than BLAS (whose blocking is
layout-sensitive), and the two reductions that run *along* the text
axis (the text-attention denominator and the cross-text aggregation)
are summed in a canonical value order rather than storage order.

The module also carries the three text-independent baseline poolers
used by the ablation harness (mean, top-k, learned self-attention).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ShapeError, ValidationError
from .rng import Rng
from .tensor import Tensor

_TIEBREAK_SEED = 0x0C1FF9


@dataclass
class CiffpParams:
    """The gate projection (D -> 1): weight vector plus scalar bias."""

    gate_weight: Tensor  # [D]
    gate_bias: Tensor  # scalar

    @classmethod
    def init(cls, dim: int, dtype=np.float32) -> "CiffpParams":
        # Zero init makes the gate 0.5 everywhere at step 0 (an even
        # blend); identity init is meaningless for a D->1 map.
        return cls(T.zeros((dim,), dtype), T.zeros((), dtype))

    def named(self, prefix: str = "ciffp"):
        yield f"{prefix}.gate_weight", self.gate_weight, True
        yield f"{prefix}.gate_bias", self.gate_bias, False

    def on_tape(self, tape: T.Tape, prefix: str = "ciffp") -> "CiffpParams":
        return CiffpParams(
            tape.param(f"{prefix}.gate_weight", self.gate_weight),
            tape.param(f"{prefix}.gate_bias", self.gate_bias),
        )


@dataclass
class SelfAttnPoolParams:
    """Scalar frame-scoring projection (D -> 1) for the baseline pooler."""

    weight: Tensor  # [D]
    bias: Tensor  # scalar

    @classmethod
    def init(cls, dim: int, dtype=np.float32) -> "SelfAttnPoolParams":
        return cls(T.zeros((dim,), dtype), T.zeros((), dtype))


@dataclass
class CiffpTrace:
    """Every intermediate of the pipeline plus the final scores.

    Shapes: s_v2t [B,F,T]; n_v2v [B,T,D]; s_t2v [B,T,1]; n_t2v [B,D];
    s_v [B,T,1]; n_vv [B,T,D]; s_vt [B,T]."""

    s_v2t: Tensor
    n_v2v: Tensor
    s_t2v: Tensor
    n_t2v: Tensor
    s_v: Tensor
    n_vv: Tensor
    s_vt: Tensor


def _check_inputs(frames: Tensor, text_pooled: Tensor) -> tuple:
    fd, td = frames.data, text_pooled.data
    if fd.ndim != 3:
        raise ShapeError(f"frames must be [B,F,D], got {fd.shape}")
    if td.ndim != 2:
        raise ShapeError(f"text_pooled must be [T,D], got {td.shape}")
    if fd.shape[2] != td.shape[1]:
        raise ShapeError(
            f"embedding widths disagree: frames {fd.shape} vs texts {td.shape}"
        )
    if not np.isfinite(fd).all():
        raise ValidationError("frames contain non-finite values")
    if not np.isfinite(td).all():
        raise ValidationError("text embeddings contain non-finite values")
    b, f, d = fd.shape
    t = td.shape[0]
    return b, f, t, d


# Taped wrappers over the fixed-order contraction kernels. Gradients
# may use BLAS freely (the equivariance contract covers scores only).


def _scores_bft(frames_n: Tensor, text_n: Tensor) -> Tensor:
    K = kernels.backend
    fr, tx = frames_n.data, text_n.data
    b, f, d = fr.shape
    t = tx.shape[0]
    out = K.scores_bft(fr, tx)

    def grad_frames(g):
        return (g.reshape(b * f, t) @ tx).reshape(b, f, d)

    def grad_texts(g):
        return g.reshape(b * f, t).T @ fr.reshape(b * f, d)

    return T.custom_op("scores_bft", (frames_n, text_n), out,
                       (grad_frames, grad_texts), kernels.backend.scores_bft)


def _agg_btd(weights: Tensor, frames_n: Tensor) -> Tensor:
    K = kernels.backend
    w, fr = weights.data, frames_n.data
    out = K.agg_btd(w, fr)

    def grad_weights(g):
        return np.matmul(fr, g.transpose(0, 2, 1))

    def grad_frames(g):
        return np.matmul(w, g)

    return T.custom_op("agg_btd", (weights, frames_n), out,
                       (grad_weights, grad_frames), kernels.backend.agg_btd)


def _dot_bt(x: Tensor, y: Tensor) -> Tensor:
    K = kernels.backend
    xd, yd = x.data, y.data
    out = K.dot_bt(xd, yd)

    def grad_x(g):
        return g[:, :, None] * yd[None, :, :]

    def grad_y(g):
        return (g[:, :, None] * xd).sum(axis=0)

    return T.custom_op("dot_bt", (x, y), out, (grad_x, grad_y),
                       kernels.backend.dot_bt)


def _canonical_text_order(weights: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Per-video ordering of the text axis keyed by (attention weight,
    fixed-direction projection of the aggregated vector). Sorting the
    addends before reduction makes cross-text sums independent of text
    storage order; exact ties get identical addends, so their relative
    order cannot matter."""
    b, t = weights.shape
    direction = Rng(_TIEBREAK_SEED).normal(vectors.shape[-1]).astype(vectors.dtype)
    proj = np.einsum("btd,d->bt", vectors, direction, optimize=False)
    order = np.empty((b, t), dtype=np.int64)
    for i in range(b):
        order[i] = np.lexsort((proj[i], weights[i]))
    return order


def ciffp_similarity(frames: Tensor, text_pooled: Tensor, params: CiffpParams) -> CiffpTrace:
    """Run the full pipeline; differentiable end to end.

    frames: [B,F,D] raw frame embeddings; text_pooled: [T,D] raw pooled
    text embeddings. Both sides are normalized internally, so the
    result is invariant to positive rescaling of any input vector."""
    b, f, t, d = _check_inputs(frames, text_pooled)

    frames_n = T.l2_normalize(frames, axis=-1)  # [B,F,D]
    text_n = T.l2_normalize(text_pooled, axis=-1)  # [T,D]

    # Frame attention per text: [B,F,T], softmax over F.
    s_v2t = T.softmax(_scores_bft(frames_n, text_n), axis=1)

    # Text-conditioned frame aggregation: [B,T,D].
    n_v2v = _agg_btd(s_v2t, frames_n)

    # Text attention per video: softmax over T of per-(b,t) dots,
    # with the denominator summed in canonical order.
    logits_t2v = _dot_bt(n_v2v, text_n)  # [B,T]
    peak = np.max(logits_t2v.data, axis=1, keepdims=True)
    e = T.exp(T.sub(logits_t2v, Tensor._wrap(peak)))
    order = _canonical_text_order(e.data, n_v2v.data)
    e_sorted = T.gather_perm(e, order)
    denom = T.reshape(T.sum_(e_sorted, axis=1), (b, 1))
    s_t2v = T.div(e, denom)  # [B,T]

    # Text-refined video vector (canonical-order sum): [B,D].
    weighted = T.mul(T.reshape(e_sorted, (b, t, 1)), T.gather_perm(n_v2v, order))
    n_t2v = T.div(T.sum_(weighted, axis=1), denom)  # [B,D]

    # Gate in (0,1) from a scalar projection of the pooled vector.
    gate_tiled = T.broadcast_to(T.reshape(params.gate_weight, (1, d)), (t, d))
    s_v = T.sigmoid(T.add(_dot_bt(n_v2v, gate_tiled), params.gate_bias))  # [B,T]
    s_v3 = T.reshape(s_v, (b, t, 1))

    # Gated blend plus residual: (1 + gate) keeps the text-conditioned
    # vector, (1 - gate) admits the text-refined one.
    n_vv = T.add(
        T.mul(T.add(1.0, s_v3), n_v2v),
        T.mul(T.sub(1.0, s_v3), T.reshape(n_t2v, (b, 1, d))),
    )

    # Final scores against the normalized text only.
    s_vt = _dot_bt(n_vv, text_n)  # [B,T]

    return CiffpTrace(
        s_v2t=s_v2t,
        n_v2v=n_v2v,
        s_t2v=T.reshape(s_t2v, (b, t, 1)),
        n_t2v=n_t2v,
        s_v=s_v3,
        n_vv=n_vv,
        s_vt=s_vt,
    )


# -- baseline poolers -----------------------------------------------------------


def mean_pool_similarity(frames: Tensor, text_pooled: Tensor) -> Tensor:
    """Cosine between the (post-average normalized) mean frame vector
    and each normalized text: [B,T]."""
    b, f, t, d = _check_inputs(frames, text_pooled)
    pooled = T.l2_normalize(T.mean(frames, axis=1), axis=-1)  # [B,D]
    text_n = T.l2_normalize(text_pooled, axis=-1)
    return T.matmul(pooled, T.transpose(text_n))


def topk_pool_similarity(frames: Tensor, text_pooled: Tensor, k_frames: int) -> Tensor:
    """Per (video, text), the mean of the k largest frame-text cosines.

    Selection is not differentiable; this pooler is evaluation-only."""
    from .errors import ContractError

    b, f, t, d = _check_inputs(frames, text_pooled)
    if not 1 <= k_frames <= f:
        raise ContractError(f"k_frames must be in [1, {f}], got {k_frames}")
    frames_n = T.l2_normalize(frames, axis=-1).data
    text_n = T.l2_normalize(text_pooled, axis=-1).data
    cos = np.einsum("bfd,td->bft", frames_n, text_n)
    top = np.sort(cos, axis=1)[:, f - k_frames:, :]
    return Tensor._wrap(top.mean(axis=1))


def self_attention_pool_similarity(
    frames: Tensor, text_pooled: Tensor, params: SelfAttnPoolParams
) -> Tensor:
    """Text-independent learned pooling: softmax over F of a scalar
    projection of each frame weights the frame sum; the pooled vector
    is then normalized and scored by cosine against each text."""
    b, f, t, d = _check_inputs(frames, text_pooled)
    logits = T.add(
        T.reshape(T.matmul(T.reshape(frames, (b * f, d)),
                           T.reshape(params.weight, (d, 1))), (b, f)),
        params.bias,
    )
    w = T.softmax(logits, axis=1)  # [B,F]
    pooled = T.reshape(T.matmul(T.reshape(w, (b, 1, f)), frames), (b, d))
    pooled_n = T.l2_normalize(pooled, axis=-1)
    text_n = T.l2_normalize(text_pooled, axis=-1)
    return T.matmul(pooled_n, T.transpose(text_n))


POOLERS = ("mean", "topk", "selfattn", "ciffp")
