"""The ``msam`` command line.

Verbs:
    gen-synth   write a seeded synthetic embedding container
    validate    check a container's format and invariants
    train       fit parameters on a container, write a checkpoint
    eval        retrieval metrics for both directions
    score       dump the video-text score matrix
    ablate      compare poolers on one batch; --sweep runs k or frame
                sweeps (training once per setting)
    gradcheck   finite-difference verification of all objectives

Every run ends with a machine-parseable block: a ``-- result --`` line
followed by ``key value`` lines. Output bytes are identical for
identical flags and inputs; wall-clock timings go to stderr and only
with --verbose. Exit codes: 0 success, 1 usage error, 2 data/format
error, 3 failed check.

The environment variable MSAM_THREADS caps internal (BLAS) parallelism
and must be honored before numpy loads, which is why this module
imports the numeric stack lazily.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


class UsageError(Exception):
    pass


def _cap_threads() -> None:
    cap = os.environ.get("MSAM_THREADS", "").strip()
    if not cap:
        return  # default: all cores
    if not cap.isdigit() or int(cap) < 1:
        raise UsageError(f"MSAM_THREADS must be a positive integer, got {cap!r}")
    for var in _THREAD_VARS:
        os.environ[var] = cap


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msam",
        description="video-text scoring on precomputed embeddings",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--verbose", action="store_true",
                       help="timings and progress on stderr")

    g = sub.add_parser("gen-synth", help="write a synthetic embedding container")
    g.add_argument("--videos", type=int, default=16)
    g.add_argument("--frames", type=int, default=4)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--captions", type=int, default=5)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="container path to write")
    common(g)

    v = sub.add_parser("validate", help="validate a container file")
    v.add_argument("path", help="container path")
    common(v)

    t = sub.add_parser("train", help="train on a container, write a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="flat JSON config (flags override it)")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--wd", type=float)
    t.add_argument("--lambda", type=float, dest="lam")
    t.add_argument("--k", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--ckpt", help="checkpoint path to write")
    t.add_argument("--report", help="write the final two-direction report here")
    common(t)

    e = sub.add_parser("eval", help="retrieval metrics for both directions")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", help="checkpoint to evaluate (default: fresh init)")
    e.add_argument("--k", type=int, default=7)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report", help="write the report file here")
    common(e)

    s = sub.add_parser("score", help="dump the video-text score matrix")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt")
    s.add_argument("--k", type=int, default=7)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="write the matrix as text here")
    common(s)

    a = sub.add_parser(
        "ablate",
        help="compare poolers on one batch (top-k pooling uses ceil(F/2) frames)",
    )
    a.add_argument("--data")
    a.add_argument("--pooling", default="mean,topk,selfattn,ciffp")
    a.add_argument("--ckpt")
    a.add_argument("--k", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--sweep", help="k=1,3,5 or frames=4,8,12 (trains per setting)")
    a.add_argument("--steps", type=int)
    a.add_argument("--lr", type=float)
    a.add_argument("--wd", type=float)
    a.add_argument("--lambda", type=float, dest="lam")
    a.add_argument("--config")
    a.add_argument("--videos", type=int, default=16)
    a.add_argument("--frames", type=int, default=4)
    a.add_argument("--dim", type=int, default=32)
    a.add_argument("--captions", type=int, default=5)
    a.add_argument("--noise", type=float, default=0.1)
    a.add_argument("--out", help="write the report table here")
    common(a)

    c = sub.add_parser("gradcheck", help="finite-difference check of all objectives")
    c.add_argument("--seed", type=int, default=1)
    c.add_argument("--videos", type=int)
    c.add_argument("--frames", type=int)
    c.add_argument("--dim", type=int)
    c.add_argument("--k", type=int)
    common(c)

    return parser


def _result_block(pairs) -> str:
    lines = ["-- result --"]
    lines += [f"{key} {value}" for key, value in pairs]
    return "\n".join(lines)


def _load_config(args, defaults_seed=0):
    """defaults < config file < explicit flags."""
    from .trainer import TrainConfig

    cfg = TrainConfig(seed=defaults_seed)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            raw = json.load(fh)
        mapping = {
            "batch_size": "batch_size",
            "steps": "steps",
            "base_lr": "base_lr",
            "weight_decay": "weight_decay",
            "lambda": "lam",
            "k": "k",
            "seed": "seed",
            "eval_every": "eval_every",
            "share_msalm": "share_msalm",
        }
        for key, value in raw.items():
            if key not in mapping:
                raise UsageError(f"unknown config key {key!r} in {args.config}")
            setattr(cfg, mapping[key], value)
    for flag, attr in (
        ("steps", "steps"),
        ("lr", "base_lr"),
        ("wd", "weight_decay"),
        ("lam", "lam"),
        ("k", "k"),
        ("seed", "seed"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, attr, value)
    return cfg


def _metric_pairs(label, rep):
    from .metrics import RetrievalReport  # noqa: F401  (type only)

    return [
        (f"{label}.r1", f"{rep.r_at[1]:.4f}"),
        (f"{label}.r5", f"{rep.r_at[5]:.4f}"),
        (f"{label}.r10", f"{rep.r_at[10]:.4f}"),
        (f"{label}.mdr", f"{rep.mdr:.4f}"),
        (f"{label}.mnr", f"{rep.mnr:.4f}"),
    ]


def _table(rows, header) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*["-" * w for w in widths])]
    lines += [fmt.format(*row) for row in rows]
    return "\n".join(lines)


def _pool_scores(name, arrays, params, k_frames):
    import numpy as np

    from . import ciffp
    from .tensor import Tensor

    frames = Tensor._wrap(arrays.frames)
    texts = Tensor._wrap(arrays.text_pooled)
    if name == "mean":
        return ciffp.mean_pool_similarity(frames, texts).data
    if name == "topk":
        return ciffp.topk_pool_similarity(frames, texts, k_frames).data
    if name == "selfattn":
        sp = ciffp.SelfAttnPoolParams.init(arrays.frames.shape[2], np.float32)
        return ciffp.self_attention_pool_similarity(frames, texts, sp).data
    if name == "ciffp":
        return ciffp.ciffp_similarity(frames, texts, params.ciffp).s_vt.data
    raise UsageError(f"unknown pooler {name!r} (choose from mean,topk,selfattn,ciffp)")


# -- verb handlers -----------------------------------------------------------------


def _cmd_gen_synth(args) -> int:
    from .embio import SynthSpec, gen_synthetic, write_container

    spec = SynthSpec(
        num_videos=args.videos,
        frames_per_video=args.frames,
        captions_per_video=args.captions,
        dim=args.dim,
        cluster_noise=args.noise,
        seed=args.seed,
    )
    batch = gen_synthetic(spec)
    n = write_container(batch, args.out)
    print(f"wrote {args.out}: {len(batch.videos)} videos, {len(batch.texts)} texts, "
          f"dim {batch.dim}")
    print(_result_block([
        ("videos", len(batch.videos)),
        ("texts", len(batch.texts)),
        ("dim", batch.dim),
        ("bytes", n),
    ]))
    return EXIT_OK


def _cmd_validate(args) -> int:
    from .embio import read_container, validate

    batch = read_container(args.path)
    diags = validate(batch)
    for d in diags:
        print(d)
    print(_result_block([
        ("valid", int(not diags)),
        ("diagnostics", len(diags)),
        ("videos", len(batch.videos)),
        ("texts", len(batch.texts)),
        ("dim", batch.dim),
    ]))
    return EXIT_OK if not diags else EXIT_DATA


def _cmd_train(args) -> int:
    from .embio import read_container
    from .metrics import format_report
    from .trainer import save_checkpoint, train

    data = read_container(args.data)
    cfg = _load_config(args)
    started = time.perf_counter()
    params, hist = train(data, cfg)
    elapsed = time.perf_counter() - started
    if args.verbose:
        print(f"trained {cfg.steps} steps in {elapsed:.1f}s", file=sys.stderr)
    pairs = [
        ("steps", cfg.steps),
        ("loss_first", f"{hist.steps[0].total:.6f}"),
        ("loss_final", f"{hist.steps[-1].total:.6f}"),
        ("vtm_final", f"{hist.steps[-1].l_vtm:.6f}"),
        ("ddsl_final", f"{hist.steps[-1].l_ddsl:.6f}"),
        ("dst_final", f"{hist.steps[-1].l_dst:.6f}"),
    ]
    if args.ckpt:
        n = save_checkpoint(params, args.ckpt)
        pairs.append(("ckpt_bytes", n))
    if args.report:
        from .trainer import evaluate

        t2v, v2t = evaluate(data, params)
        with open(args.report, "w") as fh:
            fh.write(format_report(t2v))
            fh.write("\n")
            fh.write(format_report(v2t))
        pairs += _metric_pairs("t2v", t2v) + _metric_pairs("v2t", v2t)
    print(f"final loss {hist.steps[-1].total:.6f} "
          f"(started {hist.steps[0].total:.6f})")
    print(_result_block(pairs))
    return EXIT_OK


def _params_for(args, data):
    from .trainer import TrainConfig, init_params, load_checkpoint

    if getattr(args, "ckpt", None):
        return load_checkpoint(args.ckpt)
    return init_params(data.dim, TrainConfig(k=args.k, seed=args.seed))


def _cmd_eval(args) -> int:
    from .embio import read_container
    from .metrics import format_report
    from .trainer import evaluate

    data = read_container(args.data)
    params = _params_for(args, data)
    t2v, v2t = evaluate(data, params)
    print(format_report(t2v))
    print(format_report(v2t))
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(format_report(t2v))
            fh.write("\n")
            fh.write(format_report(v2t))
    print(_result_block(_metric_pairs("t2v", t2v) + _metric_pairs("v2t", v2t)))
    return EXIT_OK


def _cmd_score(args) -> int:
    import numpy as np

    from .ciffp import ciffp_similarity
    from .embio import read_container
    from .tensor import Tensor
    from .trainer import EVAL_CHUNK, _stack

    data = read_container(args.data)
    params = _params_for(args, data)
    arrays, _ = _stack(data, with_tokens=False)
    texts = Tensor._wrap(arrays.text_pooled)
    rows = []
    for lo in range(0, arrays.frames.shape[0], EVAL_CHUNK):
        chunk = Tensor._wrap(np.ascontiguousarray(arrays.frames[lo:lo + EVAL_CHUNK]))
        rows.append(ciffp_similarity(chunk, texts, params.ciffp).s_vt.data)
    s_vt = np.concatenate(rows, axis=0)
    if args.out:
        with open(args.out, "w") as fh:
            for row in s_vt:
                fh.write(" ".join(f"{v:.6f}" for v in row))
                fh.write("\n")
    print(_result_block([
        ("videos", s_vt.shape[0]),
        ("texts", s_vt.shape[1]),
        ("score_mean", f"{s_vt.mean():.6f}"),
        ("score_max", f"{s_vt.max():.6f}"),
    ]))
    return EXIT_OK


def _parse_sweep(spec: str):
    if "=" not in spec:
        raise UsageError(f"--sweep expects key=v1,v2,..., got {spec!r}")
    key, _, values = spec.partition("=")
    key = key.strip()
    if key not in ("k", "frames"):
        raise UsageError(f"unknown sweep key {key!r} (expected k or frames)")
    try:
        parsed = [int(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"sweep values must be integers, got {values!r}") from None
    if not parsed:
        raise UsageError("sweep needs at least one value")
    return key, parsed


def _cmd_ablate(args) -> int:
    from .embio import SynthSpec, gen_synthetic, read_container
    from .metrics import T2V, report, t2v_ranks
    from .trainer import _stack, evaluate, train

    header = ("setting", "R@1", "R@5", "R@10", "MdR", "MnR")
    rows, pairs = [], []

    if args.sweep:
        key, values = _parse_sweep(args.sweep)
        cfg = _load_config(args)
        for value in values:
            if key == "k":
                if not args.data:
                    raise UsageError("a k sweep needs --data")
                data = read_container(args.data)
                cfg_i = _load_config(args)
                cfg_i.k = value
            else:
                data = gen_synthetic(SynthSpec(
                    num_videos=args.videos, frames_per_video=value,
                    captions_per_video=args.captions, dim=args.dim,
                    cluster_noise=args.noise, seed=cfg.seed,
                ))
                cfg_i = _load_config(args)
            started = time.perf_counter()
            params, _ = train(data, cfg_i)
            t2v, _ = evaluate(data, params)
            if args.verbose:
                print(f"{key}={value}: {time.perf_counter() - started:.1f}s",
                      file=sys.stderr)
            label = f"{key}{value}"
            rows.append((label, f"{t2v.r_at[1]:.4f}", f"{t2v.r_at[5]:.4f}",
                         f"{t2v.r_at[10]:.4f}", f"{t2v.mdr:.4f}", f"{t2v.mnr:.4f}"))
            pairs += _metric_pairs(label, t2v)
    else:
        if not args.data:
            raise UsageError("ablate needs --data")
        data = read_container(args.data)
        if args.k is None:
            args.k = 7
        if args.seed is None:
            args.seed = 0
        params = _params_for(args, data)
        arrays, _ = _stack(data, with_tokens=False)
        f_count = arrays.frames.shape[1]
        k_frames = max(1, (f_count + 1) // 2)
        poolers = [p.strip() for p in args.pooling.split(",") if p.strip()]
        for name in poolers:
            scores = _pool_scores(name, arrays, params, k_frames)
            rep = report(t2v_ranks(scores, arrays.gt), T2V)
            rows.append((name, f"{rep.r_at[1]:.4f}", f"{rep.r_at[5]:.4f}",
                         f"{rep.r_at[10]:.4f}", f"{rep.mdr:.4f}", f"{rep.mnr:.4f}"))
            pairs += _metric_pairs(name, rep)

    table = _table(rows, header)
    print(table)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table + "\n")
    print(_result_block(pairs))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from . import gradcheck as gc

    kwargs = {"seed": args.seed}
    for flag, name in (("videos", "videos"), ("frames", "frames"),
                       ("dim", "dim"), ("k", "k")):
        value = getattr(args, flag)
        if value is not None:
            kwargs[name] = value
    out = gc.run_gradcheck(**kwargs)
    rows = [
        (name, f"{err:.3e}", "ok" if err <= out.tolerance else "FAIL")
        for name, err in out.per_loss.items()
    ]
    print(_table(rows, ("loss", "max_rel_err", "status")))
    pairs = [(name, f"{err:.3e}") for name, err in out.per_loss.items()]
    pairs.append(("tolerance", f"{out.tolerance:.0e}"))
    pairs.append(("passed", int(out.passed)))
    print(_result_block(pairs))
    return EXIT_OK if out.passed else EXIT_CHECK


_HANDLERS = {
    "gen-synth": _cmd_gen_synth,
    "validate": _cmd_validate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "score": _cmd_score,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    try:
        _cap_threads()
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        # argparse prints its own message; map its code 2 onto the
        # usage-error contract (keep 0 for --help)
        return EXIT_OK if exit_.code == 0 else EXIT_USAGE

    from .errors import CheckFailure, ContractError, MsamError

    try:
        return _HANDLERS[args.verb](args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except CheckFailure as err:
        print(f"check failed: {err}", file=sys.stderr)
        return EXIT_CHECK
    except (MsamError, ContractError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
