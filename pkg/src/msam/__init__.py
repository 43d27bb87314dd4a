"""Cross-modal video-text scoring on precomputed embeddings.

Modules:
    tensor   dense float32/float64 tensors with tape-based reverse-mode
             differentiation
    embio    the binary embedding container, validation, and the seeded
             synthetic batch generator
    ciffp    text-conditioned interactive frame pooling plus the mean /
             top-k / self-attention baseline poolers
    msalm    per-sample construction of k probabilistic (mean, deviation)
             embeddings per modality
    losses   the matching, distribution, and diversity objectives and
             their weighted total
    metrics  retrieval ranks, recall@K / median / mean rank reports, and
             a sorting-based oracle
    trainer  Adam with decoupled weight decay, cosine schedule,
             checkpoints, evaluation
    cli      the `msam` command-line surface

Submodules import numpy; this top level stays import-light so the CLI
can cap thread counts before any numeric library loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "bench",
    "ciffp",
    "cli",
    "embio",
    "errors",
    "gradcheck",
    "kernels",
    "losses",
    "metrics",
    "msalm",
    "rng",
    "tensor",
    "trainer",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f"msam.{name}")
    raise AttributeError(f"module 'msam' has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
