"""Construction of k probabilistic embeddings per sample.

Each sample (a video's frame sequence or a text's token sequence, plus
its pooled vector) is mapped to k (mean, deviation) vector pairs:

    attn   = k-query scaled dot-product attention over the sequence
    gate   = sigmoid(attn)                         [N,k,D]
    H      = pooled (replicated over k) * gate     [N,k,D]
    P      = ff(LayerNorm(H))                      [N,k,D]
    mu     = mu_head(P)
    sigma  = softplus(sigma_head(P)) + sigma_floor

The deviations are strictly positive by construction (the downstream
objectives divide by them). Video and text branches run the same code
with separate parameter instances by default; passing one instance to
both callers shares them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError
from .rng import Rng
from .tensor import Tensor

SIGMA_FLOOR_DEFAULT = 1e-6


@dataclass
class MsalmParams:
    queries: Tensor  # [k, D]
    attn_proj_key: Tensor  # [D, D]
    attn_proj_value: Tensor  # [D, D]
    ln_gamma: Tensor  # [D]
    ln_beta: Tensor  # [D]
    ff_weight: Tensor  # [D, D]
    ff_bias: Tensor  # [D]
    mu_weight: Tensor  # [D, D]
    mu_bias: Tensor  # [D]
    sigma_weight: Tensor  # [D, D]
    sigma_bias: Tensor  # [D]
    k: int
    sigma_floor: float = SIGMA_FLOOR_DEFAULT

    @classmethod
    def init(cls, dim: int, k: int, rng: Rng, dtype=np.float32,
             sigma_floor: float = SIGMA_FLOOR_DEFAULT) -> "MsalmParams":
        """Square projections start at identity and biases at zero, so
        the module is initially transparent; queries are seeded random
        at scale 1/sqrt(D) (an identity is impossible for k x D)."""
        ident = T.eye(dim, dtype)
        zero = T.zeros((dim,), dtype)
        queries = Tensor(rng.normal((k, dim), scale=1.0 / np.sqrt(dim)), dtype=dtype)
        return cls(
            queries=queries,
            attn_proj_key=ident,
            attn_proj_value=ident,
            ln_gamma=T.ones((dim,), dtype),
            ln_beta=zero,
            ff_weight=ident,
            ff_bias=zero,
            mu_weight=ident,
            mu_bias=zero,
            sigma_weight=ident,
            sigma_bias=zero,
            k=k,
            sigma_floor=sigma_floor,
        )

    _DECAYS = {
        "queries": True,
        "attn_proj_key": True,
        "attn_proj_value": True,
        "ln_gamma": False,
        "ln_beta": False,
        "ff_weight": True,
        "ff_bias": False,
        "mu_weight": True,
        "mu_bias": False,
        "sigma_weight": True,
        "sigma_bias": False,
    }

    def named(self, prefix: str):
        for field, decays in self._DECAYS.items():
            yield f"{prefix}.{field}", getattr(self, field), decays

    def on_tape(self, tape: T.Tape, prefix: str) -> "MsalmParams":
        kwargs = {
            field: tape.param(f"{prefix}.{field}", getattr(self, field))
            for field in self._DECAYS
        }
        return MsalmParams(k=self.k, sigma_floor=self.sigma_floor, **kwargs)


@dataclass
class ProbEmbedding:
    """k mean vectors and k strictly positive deviation vectors per
    sample: both [N, k, D]."""

    mu: Tensor
    sigma: Tensor


def _check_sequence(sequence: Tensor, params: MsalmParams) -> tuple:
    sd = sequence.data
    if sd.ndim != 3:
        raise ShapeError(f"sequence must be [N,S,D], got {sd.shape}")
    d = params.queries.data.shape[1]
    if sd.shape[2] != d:
        raise ShapeError(
            f"sequence width {sd.shape} does not match parameter width {d}"
        )
    if not np.isfinite(sd).all():
        raise ValidationError("sequence contains non-finite values")
    return sd.shape


def attention_pool_k(sequence: Tensor, params: MsalmParams) -> Tensor:
    """Scaled dot-product attention with k learned queries, one head:
    [N,S,D] -> [N,k,D]."""
    n, s, d = _check_sequence(sequence, params)
    k = params.k
    seq2 = T.reshape(sequence, (n * s, d))
    keys = T.reshape(T.matmul(seq2, params.attn_proj_key), (n, s, d))
    values = T.reshape(T.matmul(seq2, params.attn_proj_value), (n, s, d))
    # scores [N,k,S] = queries . keys / sqrt(D)
    scores = T.mul(
        T.transpose(
            T.reshape(T.matmul(T.reshape(keys, (n * s, d)), T.transpose(params.queries)),
                      (n, s, k)),
            (0, 2, 1),
        ),
        float(1.0 / np.sqrt(d)),
    )
    attn = T.softmax(scores, axis=2)
    return T.matmul(attn, values)  # [N,k,D]


def adaptive_semantic_construction(
    sequence: Tensor, pooled: Tensor, params: MsalmParams
) -> ProbEmbedding:
    """Map (sequence, pooled) to k probabilistic embeddings; see the
    module docstring for the stage list. Differentiable end to end."""
    n, s, d = _check_sequence(sequence, params)
    pd = pooled.data
    if pd.shape != (n, d):
        raise ShapeError(f"pooled must be [N,D] = ({n},{d}), got {pd.shape}")
    if not np.isfinite(pd).all():
        raise ValidationError("pooled vectors contain non-finite values")
    k = params.k

    gate = T.sigmoid(attention_pool_k(sequence, params))  # [N,k,D]
    h = T.mul(T.reshape(pooled, (n, 1, d)), gate)  # broadcast over k
    hn = T.layer_norm(h, params.ln_gamma, params.ln_beta)

    def affine(x, w, b):
        return T.add(T.reshape(T.matmul(T.reshape(x, (n * k, d)), w), (n, k, d)), b)

    p = affine(hn, params.ff_weight, params.ff_bias)
    mu = affine(p, params.mu_weight, params.mu_bias)
    sigma = T.add(T.softplus(affine(p, params.sigma_weight, params.sigma_bias)),
                  float(params.sigma_floor))
    return ProbEmbedding(mu=mu, sigma=sigma)
