"""Acceptance gate: one test per shipped criterion, at its stated
tolerance. Each test prints a single PASS line on success (run with
``pytest -v -s tests/test_acceptance.py`` to see them)."""

import io
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

import msam.tensor as T
from msam import ciffp, embio, losses, metrics, trainer
from msam.errors import MsamError
from msam.msalm import ProbEmbedding
from msam.rng import Rng
from msam.tensor import Tensor

TOL = {
    "grad": 1e-4,
    "anchor_tight": 1e-9,
    "anchor": 1e-6,
    "trace": 1e-5,
    "frame_perm": 1e-6,
    "scaling": 1e-5,
    "softmax_sum": 1e-6,
    "pool_match": 1e-6,
}


def _announce(name):
    print(f"\nACCEPTANCE PASS: {name}")


def _run_cli(args, timeout=300):
    env = dict(os.environ, MSAM_THREADS="1")
    return subprocess.run(
        [sys.executable, "-m", "msam", *args],
        capture_output=True, text=True, env=env, timeout=timeout,
    )


def _result(stdout: str) -> dict:
    lines = stdout.splitlines()
    idx = lines.index("-- result --")
    out = {}
    for line in lines[idx + 1:]:
        if line.strip():
            key, value = line.split(maxsplit=1)
            out[key] = value
    return out


class TestGradientIntegrity:
    def test_criterion(self):
        """gradcheck on the 8x8 batch (F=4, D=16, k=3): max relative
        error <= 1e-4 at 64-bit, step 1e-5, under 60 s single-threaded."""
        started = time.perf_counter()
        proc = _run_cli(["gradcheck", "--seed", "1"], timeout=120)
        elapsed = time.perf_counter() - started
        assert proc.returncode == 0, proc.stdout + proc.stderr
        res = _result(proc.stdout)
        for loss in ("vtm", "ddsl", "dst", "total"):
            assert float(res[loss]) <= TOL["grad"], (loss, res[loss])
        assert res["passed"] == "1"
        assert elapsed < 60.0, f"gradcheck took {elapsed:.1f}s"
        _announce(f"gradient-integrity (max err {max(float(res[l]) for l in ('vtm','ddsl','dst','total')):.2e}, {elapsed:.1f}s)")


class TestLossAnchors:
    def test_criterion(self):
        scale1 = losses.LogitScale(Tensor(0.0, dtype=np.float64))
        vtm = losses.vtm_loss(T.zeros((2, 2), np.float64), scale1).item()
        assert abs(vtm - 1.386294) <= TOL["anchor"]

        mu = Rng(1).normal((3, 2, 4))
        ones = np.ones((3, 2, 4))
        pe = lambda m, s: ProbEmbedding(Tensor(m), Tensor(s))
        equal = losses.ddsl_loss(pe(mu, ones), pe(mu, ones)).item()
        assert abs(equal) <= TOL["anchor_tight"]

        ratio = losses.ddsl_loss(pe(mu, ones), pe(mu, ones / math.sqrt(2))).item()
        assert abs(ratio - (-0.153426)) <= TOL["anchor"]

        ortho = np.zeros((4, 2, 5))
        ortho[:, 0, 0] = 1.0
        ortho[:, 1, 1] = 1.0
        dst0 = losses.dst_loss(pe(ortho, np.ones_like(ortho)),
                               pe(ortho, np.ones_like(ortho))).item()
        assert abs(dst0) <= TOL["anchor_tight"]

        mu_t = np.ones((1, 2, 2))
        mu_v = np.eye(2)[None]
        ones1 = np.ones((1, 2, 2))
        dst1 = losses.dst_loss(pe(mu_t, ones1), pe(mu_v, ones1)).item()
        assert abs(dst1 - 3.162278) <= TOL["anchor"]
        _announce("closed-form-loss-anchors")


class TestCiffpHandTrace:
    def test_criterion(self):
        params = ciffp.CiffpParams(T.zeros(2, np.float64), T.zeros((), np.float64))
        trace = ciffp.ciffp_similarity(
            Tensor([[[1.0, 0.0], [0.0, 1.0]]]), Tensor([[1.0, 0.0]]), params
        )
        value = float(trace.s_vt.data[0, 0])
        assert abs(value - 1.462117) <= TOL["trace"], value
        _announce(f"ciffp-hand-trace ({value:.6f})")


class TestCiffpInvariances:
    def test_criterion(self):
        for seed in range(100):
            rng = Rng(seed + 40_000)
            b, f, t, d = 3, 4, 5, 6
            frames = Tensor(rng.normal((b, f, d)))
            texts = Tensor(rng.normal((t, d)))
            params = ciffp.CiffpParams(Tensor(rng.normal(d) * 0.5), Tensor(0.2))
            trace = ciffp.ciffp_similarity(frames, texts, params)
            base = trace.s_vt.data

            # softmax normalization
            assert np.abs(trace.s_v2t.data.sum(axis=1) - 1).max() <= TOL["softmax_sum"]
            assert np.abs(trace.s_t2v.data.sum(axis=1) - 1).max() <= TOL["softmax_sum"]

            # frame permutation
            fperm = rng.permutation(f)
            redo = ciffp.ciffp_similarity(
                Tensor(np.ascontiguousarray(frames.data[:, fperm, :])), texts, params
            ).s_vt.data
            assert np.abs(redo - base).max() <= TOL["frame_perm"]

            # positive scaling of one frame vector and one text vector
            fs = frames.data.copy()
            fs[1, 2] *= 3.0
            ts = texts.data.copy()
            ts[0] *= 0.25
            scaled = ciffp.ciffp_similarity(Tensor(fs), Tensor(ts), params).s_vt.data
            assert np.abs(scaled - base).max() <= TOL["scaling"]

            # batch permutation equivariance, bit-exact
            vperm = rng.permutation(b)
            tperm = rng.permutation(t)
            swapped = ciffp.ciffp_similarity(
                Tensor(np.ascontiguousarray(frames.data[vperm])),
                Tensor(np.ascontiguousarray(texts.data[tperm])),
                params,
            ).s_vt.data
            assert swapped.tobytes() == np.ascontiguousarray(
                base[np.ix_(vperm, tperm)]
            ).tobytes()
        _announce("ciffp-invariances (100 seeds)")


class TestMetricOracle:
    @staticmethod
    def _case(seed):
        rng = Rng(seed)
        b = int(2 + rng.integers(1, 10)[0])
        caps = 1 + rng.integers(b, 5)
        gt = np.repeat(np.arange(b), caps)
        return rng.normal((b, int(caps.sum()))), gt

    def test_criterion(self):
        for seed in range(1000):
            scores, gt = self._case(seed)
            if seed % 3 == 0:
                scores = np.round(scores * 2) / 2  # force tie clusters
            fast_t = metrics.t2v_ranks(scores, gt)
            fast_v = metrics.v2t_ranks(scores, gt)
            np.testing.assert_array_equal(
                fast_t.ranks, metrics.oracle_ranks(scores, gt, metrics.T2V).ranks
            )
            np.testing.assert_array_equal(
                fast_v.ranks, metrics.oracle_ranks(scores, gt, metrics.V2T).ranks
            )
            for rv, direction in ((fast_t, metrics.T2V), (fast_v, metrics.V2T)):
                rep = metrics.report(rv, direction)
                assert rep.r_at[1] <= rep.r_at[5] <= rep.r_at[10]
        _announce("metric-oracle-equivalence (1000 matrices per direction)")


@pytest.fixture(scope="module")
def overfit_artifacts(tmp_path_factory):
    """One CLI pass over the 16-pair overfit task, shared by the
    overfit and determinism criteria."""
    root = tmp_path_factory.mktemp("overfit")
    data = str(root / "d.emb")
    gen_flags = ["gen-synth", "--videos", "16", "--frames", "4", "--dim", "32",
                 "--captions", "1", "--noise", "0.05", "--seed", "3", "--out", data]
    assert _run_cli(gen_flags).returncode == 0
    ckpt = str(root / "m.ckpt")
    started = time.perf_counter()
    proc = _run_cli(["train", "--data", data, "--steps", "500", "--k", "7",
                     "--lambda", "0.1", "--lr", "1e-5", "--seed", "7",
                     "--ckpt", ckpt], timeout=180)
    train_s = time.perf_counter() - started
    assert proc.returncode == 0, proc.stdout + proc.stderr
    return {"root": root, "data": data, "ckpt": ckpt,
            "train_result": _result(proc.stdout), "train_s": train_s,
            "gen_flags": gen_flags}


class TestOverfit:
    def test_criterion(self, overfit_artifacts):
        """16 pairs, D=32, F=4, k=7, lambda=0.1, base rate 1e-5:
        R@1 = 1.0 both directions within 500 steps, under 2 minutes on
        one core, and the total loss strictly drops."""
        art = overfit_artifacts
        assert art["train_s"] < 120.0, f"training took {art['train_s']:.1f}s"
        res = art["train_result"]
        assert float(res["loss_final"]) < float(res["loss_first"])
        proc = _run_cli(["eval", "--data", art["data"], "--ckpt", art["ckpt"]])
        assert proc.returncode == 0, proc.stdout + proc.stderr
        eval_res = _result(proc.stdout)
        assert float(eval_res["t2v.r1"]) == 1.0
        assert float(eval_res["v2t.r1"]) == 1.0
        _announce(f"overfit (loss {res['loss_first']} -> {res['loss_final']}, "
                  f"{art['train_s']:.1f}s)")


class TestDeterminism:
    def test_criterion(self, overfit_artifacts):
        art = overfit_artifacts
        root = art["root"]
        # repeated gen-synth: byte-identical containers
        twin = str(root / "d2.emb")
        flags = list(art["gen_flags"])
        flags[flags.index("--out") + 1] = twin
        assert _run_cli(flags).returncode == 0
        assert open(art["data"], "rb").read() == open(twin, "rb").read()
        # repeated train (shorter budget): bit-identical checkpoints
        blobs = []
        for name in ("r1.ckpt", "r2.ckpt"):
            path = str(root / name)
            proc = _run_cli(["train", "--data", art["data"], "--steps", "40",
                             "--k", "7", "--seed", "7", "--ckpt", path])
            assert proc.returncode == 0, proc.stdout + proc.stderr
            blobs.append(open(path, "rb").read())
        assert blobs[0] == blobs[1]
        _announce("determinism (containers and checkpoints byte-identical)")


class TestFormatRobustness:
    def test_criterion(self):
        batch = embio.gen_synthetic(embio.SynthSpec(
            num_videos=3, frames_per_video=2, captions_per_video=2,
            token_len=3, dim=4, cluster_noise=0.3, seed=11))
        sink = io.BytesIO()
        embio.write_container(batch, sink)
        blob = sink.getvalue()

        back = embio.read_container(blob)
        resink = io.BytesIO()
        embio.write_container(back, resink)
        assert resink.getvalue() == blob, "round trip must be bit-exact"

        rng = Rng(99)
        positions = rng.integers(1000, len(blob))
        masks = rng.integers(1000, 255) + 1  # nonzero xor => a real flip
        detected = 0
        for pos, mask in zip(positions, masks):
            corrupt = bytearray(blob)
            corrupt[int(pos)] ^= int(mask)
            try:
                embio.read_container(bytes(corrupt))
            except MsamError:
                detected += 1
        assert detected == 1000
        _announce("format-robustness (1000/1000 corruptions detected)")


class TestQuadraticScaling:
    def test_criterion(self):
        """Evaluation cost over N paired samples at F=12, D=512 grows
        no faster than quadratically: cost(2N) <= 5 cost(N)."""
        sizes = (64, 128, 256, 512)
        costs = {}
        for n in sizes:
            data = embio.gen_synthetic(embio.SynthSpec(
                num_videos=n, frames_per_video=12, captions_per_video=1,
                token_len=1, dim=512, cluster_noise=0.1, seed=5))
            params = trainer.init_params(512, trainer.TrainConfig(k=3, seed=0))
            best = float("inf")
            for _ in range(3):
                started = time.perf_counter()
                trainer.evaluate(data, params)
                best = min(best, time.perf_counter() - started)
            costs[n] = best
        for n in (64, 128, 256):
            ratio = costs[2 * n] / costs[n]
            assert ratio <= 5.0, f"cost({2*n})/cost({n}) = {ratio:.2f}"
        pretty = ", ".join(f"N={n}: {costs[n]*1e3:.0f}ms" for n in sizes)
        _announce(f"quadratic-scaling ({pretty})")


class TestAblationHarness:
    def test_criterion(self, tmp_path):
        data = str(tmp_path / "abl.emb")
        assert _run_cli(["gen-synth", "--videos", "12", "--frames", "6", "--dim",
                         "24", "--captions", "2", "--noise", "0.3", "--seed", "2",
                         "--out", data]).returncode == 0
        report_path = str(tmp_path / "ablate.txt")
        proc = _run_cli(["ablate", "--data", data,
                         "--pooling", "mean,topk,selfattn,ciffp",
                         "--out", report_path])
        assert proc.returncode == 0, proc.stdout + proc.stderr
        res = _result(proc.stdout)
        for pooler in ("mean", "topk", "selfattn", "ciffp"):
            for key in ("r1", "r5", "r10", "mdr", "mnr"):
                assert f"{pooler}.{key}" in res
        table = open(report_path).read()
        assert all(h in table for h in ("R@1", "R@5", "R@10", "MdR", "MnR"))

        # structural check at zero init: self-attention pooling is mean pooling
        batch = embio.read_container(data)
        arrays, _ = trainer._stack(batch)
        frames = Tensor._wrap(arrays.frames)
        texts = Tensor._wrap(arrays.text_pooled)
        mean_s = ciffp.mean_pool_similarity(frames, texts).data
        sp = ciffp.SelfAttnPoolParams.init(24, np.float32)
        attn_s = ciffp.self_attention_pool_similarity(frames, texts, sp).data
        assert np.abs(mean_s - attn_s).max() <= TOL["pool_match"]
        _announce("ablation-harness (four poolers, selfattn == mean at init)")
