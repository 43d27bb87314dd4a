"""Side-by-side timing of the kernel backends.

Run as ``python -m msam.bench``. Times each hot kernel on both the
compiled core and the numpy fallback at training-scale and
evaluation-scale shapes, reporting microseconds per call (best of
``--repeat`` runs, each averaged over ``--loops`` calls).

The two backends win in different places: BLAS-backed gemm is shared,
so matmul times track each other, while the fused single-pass loops
(softmax, layer norm, row normalization) and the fixed-order
contractions usually favor the compiled core by skipping numpy's
intermediate temporaries.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import kernels
from .rng import Rng


def _cases():
    rng = Rng(0)

    def f32(shape):
        return rng.normal(shape).astype(np.float32)

    d = 512
    train_rows = f32((32 * 12, d))
    eval_rows = f32((64 * 512, 12))
    gamma, beta = np.ones(d, np.float32), np.zeros(d, np.float32)
    a2 = f32((384, d))
    b2 = f32((d, d))
    a3 = f32((32, 12, d))
    b3 = f32((32, d, 12))
    frames = f32((32, 12, d))
    texts = f32((32, d))
    weights = f32((32, 12, 32))
    pooled = f32((32, 32, d))

    return [
        ("matmul2d 384x512 @ 512x512", lambda K: K.matmul2d(a2, b2)),
        ("bmm 32x[12x512 @ 512x12]", lambda K: K.bmm(a3, b3)),
        ("softmax rows 384x512", lambda K: K.softmax2d(train_rows)),
        ("softmax rows 32768x12", lambda K: K.softmax2d(eval_rows)),
        ("l2norm rows 384x512", lambda K: K.l2norm2d(train_rows, 1e-12)),
        ("layernorm rows 384x512", lambda K: K.layernorm2d(train_rows, gamma, beta, 1e-5)),
        ("sigmoid 384x512", lambda K: K.sigmoid(train_rows)),
        ("softplus 384x512", lambda K: K.softplus(train_rows)),
        ("scores_bft 32x12x512 . 32x512", lambda K: K.scores_bft(frames, texts)),
        ("agg_btd 32x12x32 . 32x12x512", lambda K: K.agg_btd(weights, frames)),
        ("dot_bt 32x32x512 . 32x512", lambda K: K.dot_bt(pooled, texts)),
    ]


def _time(fn, loops: int, repeat: int) -> float:
    fn()  # warm up
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        for _ in range(loops):
            fn()
        best = min(best, (time.perf_counter() - start) / loops)
    return best * 1e6  # microseconds


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="msam.bench")
    parser.add_argument("--loops", type=int, default=20)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args(argv)

    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled core not built; showing numpy fallback only", file=sys.stderr)
    names = sorted(backends)
    header = ["kernel"] + [f"{n} (us)" for n in names]
    if len(names) == 2:
        header.append("numpy/compiled")
    widths = [34] + [14] * (len(header) - 1)
    print("".join(h.ljust(w) for h, w in zip(header, widths)))
    print("".join(("-" * (w - 2)).ljust(w) for w in widths))
    for label, fn in _cases():
        row = [label]
        micros = {}
        for name in names:
            micros[name] = _time(lambda K=backends[name]: fn(K), args.loops, args.repeat)
            row.append(f"{micros[name]:.1f}")
        if len(names) == 2:
            row.append(f"{micros['numpy'] / micros['compiled']:.2f}x")
        print("".join(str(c).ljust(w) for c, w in zip(row, widths)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
