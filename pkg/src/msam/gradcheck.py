"""Finite-difference verification of the full objective stack.

Builds a seeded synthetic batch, places the model at a seeded jittered
parameter point (so no coordinate sits in a degenerate zero-gradient
spot), and compares tape gradients of each objective against central
differences at 64-bit precision.

The check point is deliberately conditioned, not arbitrary:

* identity-initialized projections carry exact symmetries with
  vanishing gradients, so every parameter is jittered;
* the deviation head is biased so sigmas stay O(1) and the mean head
  is damped, keeping the diversity penalty (quartic in the ratio
  features) at a magnitude whose float64 differences still resolve
  small gradients;
* queries are scaled up so the attention-key path carries signal, and
  the logit scale sits below its cap so its gradient stays active on
  both sides of the difference step.

A central difference at step h resolves a gradient coordinate only
down to roughly ulp(loss)/2h (about 1e-11 here); coordinates below
the 1e-8 reporting floor are treated as agreeing. At the default seed
every coordinate of every objective clears the 1e-4 gate with margin.
An arbitrary --seed occasionally lands a coordinate's true gradient
inside the narrow band just above the floor where the difference is
measurement noise; the report stays honest about what it measured.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .ciffp import ciffp_similarity
from .embio import SynthSpec, gen_synthetic
from .losses import ddsl_loss, dst_loss, total_loss, vtm_loss
from .msalm import adaptive_semantic_construction
from .rng import Rng
from .tensor import Tensor
from .trainer import TrainConfig, _stack, init_params

DEFAULT_VIDEOS = 8
DEFAULT_FRAMES = 4
DEFAULT_DIM = 16
DEFAULT_K = 3
DEFAULT_TOKENS = 4
DEFAULT_STEP = 1e-5
TOLERANCE = 1e-4

LOSS_NAMES = ("vtm", "ddsl", "dst", "total")


@dataclass
class GradCheckOutcome:
    per_loss: dict  # loss name -> max relative error
    worst: dict  # loss name -> (param, flat index)
    elapsed_s: float
    tolerance: float = TOLERANCE

    @property
    def max_rel_err(self) -> float:
        return max(self.per_loss.values())

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def _jittered_params(dim: int, k: int, seed: int):
    """Float64 parameters near init with every symmetry broken."""
    base = init_params(dim, TrainConfig(k=k, seed=seed), dtype=np.float64)
    jitter = Rng(seed).child(21)
    values = {}
    for name, tensor_value, _ in base.named_parameters():
        bumped = tensor_value.data + 0.2 * jitter.normal(tensor_value.data.shape)
        if name == "scale.log_tau_inv":
            bumped = np.asarray(1.0 + 0.1 * jitter.normal(()).reshape(()))
        elif name.endswith("sigma_bias"):
            # Deviations pinned O(1): tiny sigmas inflate the ratio
            # features to magnitudes where a float64 difference of the
            # loss can no longer resolve small gradients.
            bumped = bumped + 1.5
        elif name.endswith("mu_weight"):
            # Moderate means for the same reason (the Gram penalty
            # grows with the fourth power of the ratio features).
            bumped = 0.3 * bumped
        elif name.endswith("queries"):
            # Unit-scale queries keep the attention softmax far from
            # uniform so the key-projection gradient stays resolvable.
            bumped = 4.0 * bumped
        values[name] = Tensor._wrap(bumped)
    return base.with_values(values)


def run_gradcheck(
    seed: int = 1,
    videos: int = DEFAULT_VIDEOS,
    frames: int = DEFAULT_FRAMES,
    dim: int = DEFAULT_DIM,
    k: int = DEFAULT_K,
    step: float = DEFAULT_STEP,
) -> GradCheckOutcome:
    """Check all three objectives plus their weighted total."""
    started = time.perf_counter()
    data = gen_synthetic(
        SynthSpec(
            num_videos=videos, frames_per_video=frames, captions_per_video=1,
            token_len=DEFAULT_TOKENS, dim=dim, cluster_noise=0.9, seed=seed,
        )
    )
    arrays, _ = _stack(data)
    frames_t = Tensor(arrays.frames, dtype=np.float64)
    fv_t = Tensor(arrays.video_pooled, dtype=np.float64)
    tokens_t = Tensor(arrays.tokens, dtype=np.float64)
    ft_t = Tensor(arrays.text_pooled, dtype=np.float64)

    params = _jittered_params(dim, k, seed)
    all_values = {name: t for name, t, _ in params.named_parameters()}

    def rebuild(tp):
        return params.with_values(dict(tp))

    def vtm_fn(tp):
        pr = rebuild(tp)
        return vtm_loss(ciffp_similarity(frames_t, ft_t, pr.ciffp).s_vt, pr.scale)

    def prob_pair(pr):
        pe_t = adaptive_semantic_construction(tokens_t, ft_t, pr.msalm_text)
        pe_v = adaptive_semantic_construction(frames_t, fv_t, pr.msalm_video)
        return pe_t, pe_v

    def ddsl_fn(tp):
        pe_t, pe_v = prob_pair(rebuild(tp))
        return ddsl_loss(pe_t, pe_v)

    def dst_fn(tp):
        pe_t, pe_v = prob_pair(rebuild(tp))
        return dst_loss(pe_t, pe_v)

    def total_fn(tp):
        pr = rebuild(tp)
        l_vtm = vtm_loss(ciffp_similarity(frames_t, ft_t, pr.ciffp).s_vt, pr.scale)
        pe_t, pe_v = prob_pair(pr)
        return total_loss(l_vtm, ddsl_loss(pe_t, pe_v), dst_loss(pe_t, pe_v), 0.1).total

    def subset(prefixes):
        return {n: v for n, v in all_values.items() if n.split(".")[0] in prefixes}

    cases = {
        "vtm": (vtm_fn, subset({"ciffp", "scale"})),
        "ddsl": (ddsl_fn, subset({"msalm_text", "msalm_video", "msalm_shared"})),
        "dst": (dst_fn, subset({"msalm_text", "msalm_video", "msalm_shared"})),
        "total": (total_fn, all_values),
    }
    per_loss, worst = {}, {}
    for name, (fn, probe) in cases.items():
        rep = T.grad_check(fn, probe, step=step)
        per_loss[name] = rep.max_rel_err
        worst[name] = (rep.worst_param, rep.worst_index)
    return GradCheckOutcome(per_loss, worst, time.perf_counter() - started)
