"""Training objectives: matching, distribution, diversity, and total.

* Matching: symmetric InfoNCE over the similarity matrix of a paired
  batch (row i's video matches column i's text), with a learnable logit
  scale. Both retrieval directions contribute and the two terms are
  summed.
* Distribution: a divergence-style penalty between each sample's text
  and video (mean, deviation) embeddings,

      log(Ts/Vs) - 1 + (Vs/Ts)^2 + (Tmu - Vmu)^2 / Ts^2

  averaged over samples, slots, and coordinates. This is the printed
  form, kept verbatim: it is not a standard KL and attains its minimum
  -(1 - ln 2)/2 = -0.153426 at deviation ratio 1/sqrt(2), not zero.
  Text is the reference side (its deviation sits in the denominators);
  nothing is symmetrized.
* Diversity: per sample and modality, the ratio features mu/sigma form
  a k x D matrix whose Gram matrix is pushed toward the identity in
  Frobenius distance, decorrelating the k slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import tensor as T
from .errors import ContractError
from .msalm import ProbEmbedding
from .tensor import Tensor

LOG_SCALE_MAX = math.log(100.0)

Scalar = Union[float, Tensor]


@dataclass
class LogitScale:
    """Learnable inverse temperature stored in log space; the effective
    multiplier exp(log_tau_inv) is capped at 100 (gradient stops when
    the cap is active). Initialized at the reference checkpoint's value
    ln(100)."""

    log_tau_inv: Tensor  # scalar

    @classmethod
    def init(cls, dtype=np.float32) -> "LogitScale":
        return cls(T.full((), LOG_SCALE_MAX, dtype))

    def effective(self) -> Tensor:
        # The cap is compared in the parameter's own precision so the
        # float32 rounding of ln(100) still counts as "at the cap",
        # where the gradient must keep flowing.
        raw = float(self.log_tau_inv.data.reshape(()))
        cap = float(np.asarray(LOG_SCALE_MAX, self.log_tau_inv.dtype))
        if raw > cap:
            return T.full((), 100.0, self.log_tau_inv.dtype)
        return T.exp(self.log_tau_inv)

    def named(self, prefix: str = "scale"):
        yield f"{prefix}.log_tau_inv", self.log_tau_inv, False

    def on_tape(self, tape: T.Tape, prefix: str = "scale") -> "LogitScale":
        return LogitScale(tape.param(f"{prefix}.log_tau_inv", self.log_tau_inv))


@dataclass
class LossBreakdown:
    """The three components, the diversity weight, and their total
    (total == l_vtm + l_ddsl + lam * l_dst in the run's arithmetic).
    Fields are tensors when produced on a tape, plain floats in
    histories."""

    l_vtm: Scalar
    l_ddsl: Scalar
    l_dst: Scalar
    lam: float
    total: Scalar

    def floats(self) -> "LossBreakdown":
        return LossBreakdown(_as_float(self.l_vtm), _as_float(self.l_ddsl),
                             _as_float(self.l_dst), float(self.lam),
                             _as_float(self.total))


def _as_float(x: Scalar) -> float:
    return float(x.data.reshape(())) if isinstance(x, Tensor) else float(x)


def vtm_loss(s_vt: Tensor, scale: LogitScale) -> Tensor:
    """Symmetric InfoNCE over a paired square score matrix: mean
    cross-entropy of each row against its diagonal entry, plus the same
    over columns. Shift-invariant in the scores."""
    sd = s_vt.data
    if sd.ndim != 2 or sd.shape[0] != sd.shape[1]:
        raise ContractError(
            f"matching loss needs a square paired matrix, got {sd.shape}"
        )
    logits = T.mul(s_vt, T.reshape(scale.effective(), ()))
    diag = T.diag_part(logits)
    l_v2t = T.mean(T.sub(T.logsumexp(logits, axis=1), diag))
    l_t2v = T.mean(T.sub(T.logsumexp(logits, axis=0), diag))
    return T.add(l_v2t, l_t2v)


def _check_pair(text: ProbEmbedding, video: ProbEmbedding) -> None:
    ts, vs = text.sigma.data, video.sigma.data
    if text.mu.data.shape != video.mu.data.shape or ts.shape != vs.shape \
            or text.mu.data.shape != ts.shape:
        raise ContractError(
            f"probabilistic embedding shapes disagree: text {text.mu.data.shape}"
            f"/{ts.shape}, video {video.mu.data.shape}/{vs.shape}"
        )
    if not (ts > 0).all() or not (vs > 0).all():
        raise ContractError("deviations must be strictly positive")


def ddsl_loss(text: ProbEmbedding, video: ProbEmbedding) -> Tensor:
    """Distribution penalty between paired text and video embeddings,
    averaged over samples, slots, and coordinates."""
    _check_pair(text, video)
    ratio_tv = T.div(text.sigma, video.sigma)
    ratio_vt = T.div(video.sigma, text.sigma)
    diff = T.sub(text.mu, video.mu)
    norm_diff = T.div(diff, text.sigma)
    term = T.add(
        T.sub(T.log(ratio_tv), 1.0),
        T.add(T.mul(ratio_vt, ratio_vt), T.mul(norm_diff, norm_diff)),
    )
    return T.mean(term)


def dst_loss(text: ProbEmbedding, video: ProbEmbedding) -> Tensor:
    """Diversity penalty: mean (over samples) Frobenius distance of the
    ratio-feature Gram matrix from the identity, text term plus video
    term."""
    _check_pair(text, video)

    def one_side(pe: ProbEmbedding) -> Tensor:
        ratio = T.div(pe.mu, pe.sigma)  # [N,k,D]
        gram = T.matmul(ratio, T.transpose(ratio, (0, 2, 1)))  # [N,k,k]
        k = gram.data.shape[1]
        ident = Tensor._wrap(np.eye(k, dtype=gram.data.dtype))
        d = T.sub(gram, ident)
        per_sample = T.sqrt(T.sum_(T.mul(d, d), axis=(1, 2)))  # [N]
        return T.mean(per_sample)

    return T.add(one_side(text), one_side(video))


def total_loss(l_vtm: Scalar, l_ddsl: Scalar, l_dst: Scalar, lam: float) -> LossBreakdown:
    """Weighted sum of the three parts; records every component."""
    for name, value in (("l_vtm", l_vtm), ("l_ddsl", l_ddsl), ("l_dst", l_dst)):
        v = _as_float(value)
        if not math.isfinite(v):
            raise ContractError(f"total loss: component {name} is non-finite ({v})")
    if not math.isfinite(lam) or lam < 0:
        raise ContractError(f"total loss: lambda must be finite and >= 0, got {lam}")
    if isinstance(l_dst, Tensor):
        weighted = T.mul(l_dst, float(lam))
    else:
        weighted = lam * l_dst
    if isinstance(l_vtm, Tensor) or isinstance(l_ddsl, Tensor) or isinstance(weighted, Tensor):
        total = T.add(T.add(l_vtm, l_ddsl), weighted)
    else:
        total = l_vtm + l_ddsl + weighted
    return LossBreakdown(l_vtm, l_ddsl, l_dst, float(lam), total)
