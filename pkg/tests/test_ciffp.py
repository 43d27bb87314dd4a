import math

import numpy as np
import pytest

import msam.tensor as T
from msam import ciffp
from msam.errors import ContractError, ShapeError, ValidationError
from msam.rng import Rng
from msam.tensor import Tensor

E = math.e
W_HI = E / (E + 1)  # softmax([1,0])[0]
W_LO = 1 / (E + 1)


def random_inputs(seed, b=3, f=4, t=5, d=6, dtype=np.float64):
    rng = Rng(seed)
    frames = Tensor(rng.normal((b, f, d)), dtype=dtype)
    texts = Tensor(rng.normal((t, d)), dtype=dtype)
    return frames, texts


def zero_params(d, dtype=np.float64):
    return ciffp.CiffpParams(T.zeros((d,), dtype), T.zeros((), dtype))


class TestHandTrace:
    """The worked B=T=1, F=2, D=2 example, traced stage by stage."""

    def setup_method(self):
        frames = Tensor([[[1.0, 0.0], [0.0, 1.0]]])
        text = Tensor([[1.0, 0.0]])
        self.trace = ciffp.ciffp_similarity(frames, text, zero_params(2))

    def test_frame_attention(self):
        np.testing.assert_allclose(
            self.trace.s_v2t.data.reshape(2), [0.731059, 0.268941], atol=1e-6
        )

    def test_aggregated_video(self):
        np.testing.assert_allclose(
            self.trace.n_v2v.data.reshape(2), [W_HI, W_LO], atol=1e-6
        )

    def test_text_attention_single_text(self):
        np.testing.assert_allclose(self.trace.s_t2v.data.reshape(1), [1.0])

    def test_gate_at_zero_init(self):
        np.testing.assert_allclose(self.trace.s_v.data.reshape(1), [0.5])

    def test_residual_doubles(self):
        np.testing.assert_allclose(
            self.trace.n_vv.data.reshape(2), 2 * self.trace.n_v2v.data.reshape(2), atol=1e-12
        )

    def test_final_score(self):
        np.testing.assert_allclose(self.trace.s_vt.data, [[2 * W_HI]], atol=1e-6)
        np.testing.assert_allclose(self.trace.s_vt.data, [[1.462117]], atol=1e-5)


class TestPipelineProperties:
    def test_single_frame(self):
        rng = Rng(3)
        frames = Tensor(rng.normal((2, 1, 4)))
        texts = Tensor(rng.normal((3, 4)))
        trace = ciffp.ciffp_similarity(frames, texts, zero_params(4))
        np.testing.assert_allclose(trace.s_v2t.data, 1.0)
        normed = frames.data / np.linalg.norm(frames.data, axis=2, keepdims=True)
        for ti in range(3):
            np.testing.assert_allclose(trace.n_v2v.data[:, ti, :], normed[:, 0, :], atol=1e-12)

    def test_positive_scale_invariance(self):
        frames, texts = random_inputs(11)
        base = ciffp.ciffp_similarity(frames, texts, zero_params(6)).s_vt.data
        fs = frames.data.copy()
        fs[1, 2] *= 3.0
        ts = texts.data.copy()
        ts[0] *= 3.0
        scaled = ciffp.ciffp_similarity(Tensor(fs), Tensor(ts), zero_params(6)).s_vt.data
        np.testing.assert_allclose(scaled, base, atol=1e-5)

    def test_frame_permutation_invariance_100_seeds(self):
        for seed in range(100):
            frames, texts = random_inputs(seed, b=2, f=5, t=3, d=4)
            params = zero_params(4)
            base = ciffp.ciffp_similarity(frames, texts, params).s_vt.data
            perm = Rng(seed + 1000).permutation(5)
            shuffled = Tensor(frames.data[:, perm, :])
            redo = ciffp.ciffp_similarity(shuffled, texts, params).s_vt.data
            np.testing.assert_allclose(redo, base, atol=1e-6)

    def test_batch_equivariance_exact(self, backend):
        for seed in range(25):
            for dtype in (np.float32, np.float64):
                frames, texts = random_inputs(seed, dtype=dtype)
                params = ciffp.CiffpParams(
                    Tensor(Rng(seed + 7).normal(6) * 0.4, dtype=dtype),
                    Tensor(0.2, dtype=dtype),
                )
                base = ciffp.ciffp_similarity(frames, texts, params).s_vt.data
                vp = Rng(seed + 1).permutation(3)
                tp = Rng(seed + 2).permutation(5)
                out = ciffp.ciffp_similarity(
                    Tensor(np.ascontiguousarray(frames.data[vp]), dtype=dtype),
                    Tensor(np.ascontiguousarray(texts.data[tp]), dtype=dtype),
                    params,
                ).s_vt.data
                assert out.tobytes() == np.ascontiguousarray(
                    base[np.ix_(vp, tp)]
                ).tobytes(), f"seed {seed} dtype {dtype}"

    def test_attention_slices_normalized(self):
        for seed in range(20):
            frames, texts = random_inputs(seed)
            trace = ciffp.ciffp_similarity(frames, texts, zero_params(6))
            np.testing.assert_allclose(trace.s_v2t.data.sum(axis=1), 1.0, atol=1e-6)
            np.testing.assert_allclose(trace.s_t2v.data.sum(axis=1), 1.0, atol=1e-6)

    def test_gate_strictly_inside_unit_interval(self):
        frames, texts = random_inputs(23)
        params = ciffp.CiffpParams(Tensor(Rng(5).normal(6)), Tensor(0.3))
        trace = ciffp.ciffp_similarity(frames, texts, params)
        assert (trace.s_v.data > 0).all() and (trace.s_v.data < 1).all()

    def test_gradients_match_finite_differences(self):
        rng = Rng(29)
        frames = rng.normal((2, 3, 4))
        texts = rng.normal((3, 4))
        weight = rng.normal((2, 3))

        def fn(p):
            params = ciffp.CiffpParams(p["gw"], p["gb"])
            trace = ciffp.ciffp_similarity(p["frames"], p["texts"], params)
            return T.sum_(T.mul(trace.s_vt, Tensor(weight)))

        report = T.grad_check(
            fn,
            {
                "frames": Tensor(frames),
                "texts": Tensor(texts),
                "gw": Tensor(rng.normal(4) * 0.3),
                "gb": Tensor(0.1),
            },
            step=1e-5,
        )
        assert report.max_rel_err <= 1e-4

    def test_shape_and_nan_errors(self):
        with pytest.raises(ShapeError):
            ciffp.ciffp_similarity(T.zeros((2, 3, 4)), T.zeros((5, 7)), zero_params(4))
        bad = np.ones((1, 2, 2), dtype=np.float32)
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValidationError):
            ciffp.ciffp_similarity(
                Tensor(bad, validate=False), T.zeros((1, 2)), zero_params(2)
            )


class TestMeanPool:
    def test_identical_frames_match_single_frame(self):
        rng = Rng(31)
        one = rng.normal((2, 1, 4))
        rep = np.repeat(one, 3, axis=1)
        texts = Tensor(rng.normal((3, 4)))
        a = ciffp.mean_pool_similarity(Tensor(rep), texts).data
        b = ciffp.mean_pool_similarity(Tensor(one), texts).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_hand_value(self):
        out = ciffp.mean_pool_similarity(
            Tensor([[[1.0, 0.0], [0.0, 1.0]]]), Tensor([[1.0, 0.0]])
        )
        np.testing.assert_allclose(out.data, [[math.sqrt(0.5)]], atol=1e-6)
        np.testing.assert_allclose(out.data, [[0.707107]], atol=1e-6)

    def test_orthogonal_is_zero(self):
        out = ciffp.mean_pool_similarity(
            Tensor([[[2.0, 0.0], [2.0, 0.0]]]), Tensor([[0.0, 3.0]])
        )
        np.testing.assert_allclose(out.data, [[0.0]], atol=1e-12)


class TestTopkPool:
    def test_k_equal_f_is_mean_of_cosines(self):
        frames, texts = random_inputs(37)
        got = ciffp.topk_pool_similarity(frames, texts, 4).data
        fn = frames.data / np.linalg.norm(frames.data, axis=2, keepdims=True)
        tn = texts.data / np.linalg.norm(texts.data, axis=1, keepdims=True)
        want = np.einsum("bfd,td->bft", fn, tn).mean(axis=1)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_k_one_is_max(self):
        frames, texts = random_inputs(41)
        got = ciffp.topk_pool_similarity(frames, texts, 1).data
        fn = frames.data / np.linalg.norm(frames.data, axis=2, keepdims=True)
        tn = texts.data / np.linalg.norm(texts.data, axis=1, keepdims=True)
        want = np.einsum("bfd,td->bft", fn, tn).max(axis=1)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_two_cosines_pick_best(self):
        # frame cosines against the text are 0.9 and 0.1 by construction
        a = np.array([0.9, math.sqrt(1 - 0.81)])
        b = np.array([0.1, math.sqrt(1 - 0.01)])
        frames = Tensor([np.stack([a, b])])
        texts = Tensor([[1.0, 0.0]])
        got = ciffp.topk_pool_similarity(frames, texts, 1).data
        np.testing.assert_allclose(got, [[0.9]], atol=1e-12)

    def test_k_out_of_range(self):
        frames, texts = random_inputs(43)
        with pytest.raises(ContractError):
            ciffp.topk_pool_similarity(frames, texts, 0)
        with pytest.raises(ContractError):
            ciffp.topk_pool_similarity(frames, texts, 5)


class TestSelfAttentionPool:
    def test_zero_init_equals_mean_pool(self):
        frames, texts = random_inputs(47)
        params = ciffp.SelfAttnPoolParams.init(6, np.float64)
        a = ciffp.self_attention_pool_similarity(frames, texts, params).data
        b = ciffp.mean_pool_similarity(frames, texts).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_single_frame(self):
        rng = Rng(53)
        frames = Tensor(rng.normal((2, 1, 4)))
        texts = Tensor(rng.normal((3, 4)))
        params = ciffp.SelfAttnPoolParams(Tensor(rng.normal(4)), Tensor(0.7))
        got = ciffp.self_attention_pool_similarity(frames, texts, params).data
        fn = frames.data[:, 0, :] / np.linalg.norm(frames.data[:, 0, :], axis=1, keepdims=True)
        tn = texts.data / np.linalg.norm(texts.data, axis=1, keepdims=True)
        np.testing.assert_allclose(got, fn @ tn.T, atol=1e-12)

    def test_dominant_projection_selects_frame_zero(self):
        # logits gap >= 20 makes the softmax effectively a hard pick
        frames = Tensor([[[1.0, 0.0], [0.0, 1.0]]])
        texts = Tensor([[0.6, 0.8]])
        params = ciffp.SelfAttnPoolParams(Tensor([25.0, 0.0]), Tensor(0.0))
        got = ciffp.self_attention_pool_similarity(frames, texts, params).data
        np.testing.assert_allclose(got, [[0.6]], atol=1e-3)
