import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import msam.tensor as T
from msam.errors import ContractError, ShapeError, ValidationError
from msam.rng import Rng


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop oracle, deliberately independent of the library."""
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += float(a[i, p]) * float(b[p, j])
            out[i, j] = acc
    return out


finite_rows = hnp.arrays(
    np.float64,
    hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=6),
    elements=st.floats(-50, 50, allow_nan=False),
)


class TestTensorBasics:
    def test_shape_matches_payload(self):
        t = T.tensor([[1.0, 2.0], [3.0, 4.0]])
        assert t.shape == (2, 2)
        assert t.size == 4
        assert int(np.prod(t.shape)) == t.data.size

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            T.Tensor([1.0, float("nan")])
        with pytest.raises(ValidationError):
            T.Tensor([float("inf")])

    def test_immutable(self):
        t = T.tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_mixed_precision_rejected(self):
        a = T.tensor([1.0], dtype=np.float32)
        b = T.tensor([1.0], dtype=np.float64)
        with pytest.raises(ContractError):
            T.add(a, b)

    def test_ops_deterministic_bitwise(self, backend):
        rng = Rng(3)
        x = T.Tensor(rng.normal((4, 5)), dtype=np.float32)
        first = T.softmax(x, axis=1).data.tobytes()
        for _ in range(3):
            assert T.softmax(x, axis=1).data.tobytes() == first


class TestMatmul:
    def test_identity(self, backend):
        out = T.matmul(T.tensor(np.eye(2)), T.tensor([[2.0, 3.0], [4.0, 5.0]]))
        np.testing.assert_array_equal(out.data, [[2, 3], [4, 5]])

    def test_small_product(self, backend):
        out = T.matmul(T.tensor([[1.0, 2.0]]), T.tensor([[3.0], [4.0]]))
        np.testing.assert_allclose(out.data, [[11.0]])

    def test_against_naive_oracle(self, backend):
        rng = Rng(11)
        a = rng.normal((3, 4))
        b = rng.normal((4, 2))
        got = T.matmul(T.Tensor(a), T.Tensor(b)).data
        np.testing.assert_allclose(got, naive_matmul(a, b), atol=1e-12)

    def test_shape_error_names_both(self, backend):
        with pytest.raises(ShapeError) as e:
            T.matmul(T.zeros((2, 3)), T.zeros((4, 2)))
        assert "(2, 3)" in str(e.value) and "(4, 2)" in str(e.value)

    def test_batched_exact_match_only(self, backend):
        a = T.zeros((2, 3, 4))
        b = T.zeros((5, 4, 2))
        with pytest.raises(ShapeError):
            T.matmul(a, b)
        ok = T.matmul(T.zeros((2, 3, 4)), T.zeros((2, 4, 5)))
        assert ok.shape == (2, 3, 5)

    def test_batched_matches_per_slice(self, backend):
        rng = Rng(5)
        a = rng.normal((3, 2, 4))
        b = rng.normal((3, 4, 5))
        got = T.matmul(T.Tensor(a), T.Tensor(b)).data
        for i in range(3):
            np.testing.assert_allclose(got[i], naive_matmul(a[i], b[i]), atol=1e-12)


class TestSoftmax:
    def test_symmetry(self, backend):
        np.testing.assert_allclose(T.softmax(T.tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_two_logits(self, backend):
        # direct exp-normalize: e/(e+1) and 1/(e+1)
        e = math.e
        out = T.softmax(T.Tensor([1.0, 0.0])).data
        np.testing.assert_allclose(out, [e / (e + 1), 1 / (e + 1)], atol=1e-6)
        np.testing.assert_allclose(out, [0.731059, 0.268941], atol=1e-6)

    def test_single_element_slice(self, backend):
        for v in (-1000.0, 0.0, 7.25):
            np.testing.assert_array_equal(T.softmax(T.Tensor([v])).data, [1.0])

    @settings(max_examples=40, deadline=None)
    @given(finite_rows)
    def test_slices_sum_to_one(self, x):
        out = T.softmax(T.Tensor(x), axis=1).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(finite_rows, st.floats(-30, 30, allow_nan=False))
    def test_shift_invariance(self, x, c):
        a = T.softmax(T.Tensor(x), axis=1).data
        b = T.softmax(T.Tensor(x + c), axis=1).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_f32_sum_tolerance(self, backend):
        rng = Rng(9)
        x = T.Tensor(rng.normal((8, 33)), dtype=np.float32)
        out = T.softmax(x, axis=1).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


class TestL2Normalize:
    def test_three_four_five(self, backend):
        np.testing.assert_allclose(
            T.l2_normalize(T.Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-12
        )

    def test_zero_vector_preserved(self, backend):
        np.testing.assert_array_equal(
            T.l2_normalize(T.Tensor([0.0, 0.0]), eps=1e-12).data, [0.0, 0.0]
        )

    def test_axis_aligned(self, backend):
        np.testing.assert_allclose(T.l2_normalize(T.Tensor([5.0, 0.0])).data, [1.0, 0.0])

    @settings(max_examples=40, deadline=None)
    @given(
        hnp.arrays(np.float64, (3, 4), elements=st.floats(-20, 20, allow_nan=False)),
        st.floats(0.01, 100.0),
    )
    def test_scale_invariance(self, x, c):
        norms = np.sqrt((x * x).sum(axis=1))
        if (norms <= 1e-6).any():
            x = x + 1.0  # keep vectors clear of the eps branch
        a = T.l2_normalize(T.Tensor(x), axis=1).data
        b = T.l2_normalize(T.Tensor(c * x), axis=1).data
        np.testing.assert_allclose(a, b, atol=1e-6)


class TestSigmoidSoftplus:
    def test_sigmoid_anchors(self, backend):
        assert T.sigmoid(T.Tensor([0.0])).data[0] == 0.5
        np.testing.assert_allclose(
            T.sigmoid(T.Tensor([1.0])).data, [1 / (1 + math.exp(-1))], atol=1e-6
        )
        np.testing.assert_allclose(T.sigmoid(T.Tensor([1.0])).data, [0.731059], atol=1e-6)

    def test_sigmoid_saturation(self, backend):
        v = T.sigmoid(T.Tensor([-100.0])).data[0]
        assert 0.0 < v <= 1e-40
        assert np.isfinite(T.sigmoid(T.Tensor([100.0])).data).all()

    def test_softplus_anchors(self, backend):
        np.testing.assert_allclose(T.softplus(T.Tensor([0.0])).data, [math.log(2)], atol=1e-9)
        np.testing.assert_allclose(
            T.softplus(T.Tensor([1.0])).data, [math.log(1 + math.e)], atol=1e-9
        )
        np.testing.assert_allclose(T.softplus(T.Tensor([1.0])).data, [1.313262], atol=1e-6)

    def test_softplus_no_overflow(self, backend):
        out = T.softplus(T.Tensor([100.0])).data[0]
        assert np.isfinite(out) and abs(out - 100.0) < 1e-9


class TestLayerNorm:
    def test_constant_vector(self, backend):
        out = T.layer_norm(T.Tensor([1.0, 1.0]), T.Tensor([1.0, 1.0]), T.Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.0, 0.0], atol=1e-9)

    def test_hand_computed(self, backend):
        # mean 0.3655, std 0.3655 -> roughly [1, -1] once eps << var
        out = T.layer_norm(
            T.Tensor([0.731, 0.0]), T.Tensor([1.0, 1.0]), T.Tensor([0.0, 0.0]), eps=1e-5
        )
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-3)

    def test_beta_shift(self, backend):
        out = T.layer_norm(
            T.Tensor([3.3, 3.3]), T.Tensor([1.0, 1.0]), T.Tensor([5.0, 5.0])
        )
        np.testing.assert_allclose(out.data, [5.0, 5.0], atol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(np.float64, (4, 8), elements=st.floats(-40, 40, allow_nan=False)))
    def test_standardizes(self, x):
        # output variance is v/(v+eps); the 1e-4 window presumes v >> eps
        assume((x.var(axis=1) > 0.5).all())
        d = x.shape[1]
        out = T.layer_norm(T.Tensor(x), T.ones(d, np.float64), T.zeros(d, np.float64)).data
        assert np.abs(out.mean(axis=1)).max() <= 1e-6
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-4)

    def test_shape_error(self, backend):
        with pytest.raises(ShapeError):
            T.layer_norm(T.zeros((2, 3)), T.zeros(4), T.zeros(3))


class TestFrobeniusDistance:
    def test_identity_is_zero(self, backend):
        for k in (1, 2, 5):
            assert T.frobenius_distance_to_identity(T.eye(k, np.float64)).item() == 0.0

    def test_constant_matrix(self, backend):
        out = T.frobenius_distance_to_identity(T.Tensor([[2.0, 2.0], [2.0, 2.0]]))
        np.testing.assert_allclose(out.item(), math.sqrt(10), atol=1e-6)
        np.testing.assert_allclose(out.item(), 3.162278, atol=1e-6)

    def test_diagonal_case(self, backend):
        out = T.frobenius_distance_to_identity(T.Tensor([[4.0, 0.0], [0.0, 4.0]]))
        np.testing.assert_allclose(out.item(), math.sqrt(18), atol=1e-6)
        np.testing.assert_allclose(out.item(), 4.242641, atol=1e-6)

    def test_non_square_rejected(self, backend):
        with pytest.raises(ShapeError):
            T.frobenius_distance_to_identity(T.zeros((2, 3)))


class TestBackward:
    def test_sum_of_squares(self, backend):
        tape = T.Tape()
        p = tape.param("p", T.Tensor([1.0, 2.0, 3.0]))
        loss = T.sum_(T.mul(p, p))
        grads = T.backward(tape, loss)
        np.testing.assert_allclose(grads["p"].data, [2.0, 4.0, 6.0])

    def test_disconnected_param_zero(self, backend):
        tape = T.Tape()
        p = tape.param("p", T.Tensor([1.0, 2.0]))
        q = tape.param("q", T.Tensor([[5.0]]))
        loss = T.sum_(T.mul(p, p))
        grads = T.backward(tape, loss)
        np.testing.assert_array_equal(grads["q"].data, [[0.0]])

    def test_loss_must_be_scalar(self, backend):
        tape = T.Tape()
        p = tape.param("p", T.Tensor([1.0, 2.0]))
        with pytest.raises(ContractError):
            T.backward(tape, T.mul(p, p))

    def test_gradient_shapes_match_params(self, backend):
        tape = T.Tape()
        w = tape.param("w", T.Tensor(Rng(0).normal((3, 4))))
        b = tape.param("b", T.Tensor(Rng(1).normal((4,))))
        loss = T.sum_(T.add(T.matmul(T.Tensor(Rng(2).normal((2, 3))), w), b))
        grads = T.backward(tape, loss)
        assert grads["w"].shape == (3, 4)
        assert grads["b"].shape == (4,)

    def test_softmax_cross_entropy_vs_fd(self, backend):
        rng = Rng(21)
        logits = rng.normal((4, 5))
        targets = np.eye(5)[[0, 2, 1, 4]]

        def fn(p):
            lsm = T.sub(p["x"], T.reshape(T.logsumexp(p["x"], axis=1), (4, 1)))
            return T.neg(T.mean(T.sum_(T.mul(lsm, T.Tensor(targets)), axis=1)))

        report = T.grad_check(fn, {"x": T.Tensor(logits)}, step=1e-5)
        assert report.max_rel_err <= 1e-4

    def test_two_tapes_rejected(self, backend):
        t1, t2 = T.Tape(), T.Tape()
        a = t1.param("a", T.Tensor([1.0]))
        b = t2.param("b", T.Tensor([1.0]))
        with pytest.raises(ContractError):
            T.add(a, b)

    def test_tape_replay_bit_exact(self, backend):
        tape = T.Tape()
        x = tape.param("x", T.Tensor(Rng(7).normal((3, 4))))
        y = T.softmax(T.matmul(x, T.Tensor(Rng(8).normal((4, 4)))), axis=1)
        z = T.sum_(T.layer_norm(y, T.ones(4, np.float64), T.zeros(4, np.float64)))
        T.backward(tape, z)
        tape.replay_check()  # raises on any bit drift


class TestGradCheck:
    def test_quadratic_bowl(self, backend):
        def fn(p):
            return T.sum_(T.mul(p["x"], p["x"]))

        report = T.grad_check(fn, {"x": T.Tensor([0.5, -1.5, 2.0])}, step=1e-5)
        assert report.max_rel_err <= 1e-9

    def test_constant_function(self, backend):
        def fn(p):
            return T.sum_(T.mul(p["x"], T.zeros(3, np.float64)))

        tape = T.Tape()
        tp = tape.param("x", T.Tensor([1.0, 2.0, 3.0]))
        grads = T.backward(tape, fn({"x": tp}))
        np.testing.assert_array_equal(grads["x"].data, 0.0)
        report = T.grad_check(fn, {"x": T.Tensor([1.0, 2.0, 3.0])})
        assert report.max_rel_err <= 1e-8


def _op_cases():
    """One scalar-valued probe per differentiable op."""

    def unary(op, positive=False):
        def build(rng):
            x = rng.normal((2, 3))
            if positive:
                x = np.abs(x) + 0.5
            w = rng.normal((2, 3))

            def fn(p):
                return T.sum_(T.mul(op(p["x"]), T.Tensor(w)))

            return fn, {"x": T.Tensor(x)}

        return build

    def binary(op):
        def build(rng):
            a, b = rng.normal((2, 3)), rng.normal((2, 3)) + 2.0
            w = rng.normal((2, 3))

            def fn(p):
                return T.sum_(T.mul(op(p["a"], p["b"]), T.Tensor(w)))

            return fn, {"a": T.Tensor(a), "b": T.Tensor(b)}

        return build

    def matmul_case(rng):
        a, b = rng.normal((2, 3)), rng.normal((3, 2))
        w = rng.normal((2, 2))

        def fn(p):
            return T.sum_(T.mul(T.matmul(p["a"], p["b"]), T.Tensor(w)))

        return fn, {"a": T.Tensor(a), "b": T.Tensor(b)}

    def bmm_case(rng):
        a, b = rng.normal((2, 2, 3)), rng.normal((2, 3, 2))
        w = rng.normal((2, 2, 2))

        def fn(p):
            return T.sum_(T.mul(T.matmul(p["a"], p["b"]), T.Tensor(w)))

        return fn, {"a": T.Tensor(a), "b": T.Tensor(b)}

    def layer_norm_case(rng):
        x = rng.normal((3, 4)) * 2.0
        g, b = rng.normal((4,)) + 1.5, rng.normal((4,))
        w = rng.normal((3, 4))

        def fn(p):
            return T.sum_(T.mul(T.layer_norm(p["x"], p["g"], p["b"]), T.Tensor(w)))

        return fn, {"x": T.Tensor(x), "g": T.Tensor(g), "b": T.Tensor(b)}

    def shaped(make, out_shape):
        def build(rng):
            x = rng.normal((2, 3))
            w = rng.normal(out_shape)

            def fn(p):
                return T.sum_(T.mul(make(p["x"]), T.Tensor(w)))

            return fn, {"x": T.Tensor(x)}

        return build

    def diag_case(rng):
        x = rng.normal((3, 3))
        w = rng.normal((3,))

        def fn(p):
            return T.sum_(T.mul(T.diag_part(p["x"]), T.Tensor(w)))

        return fn, {"x": T.Tensor(x)}

    def lse_case(rng):
        x = rng.normal((3, 4))
        w = rng.normal((3,))

        def fn(p):
            return T.sum_(T.mul(T.logsumexp(p["x"], axis=1), T.Tensor(w)))

        return fn, {"x": T.Tensor(x)}

    def frob_case(rng):
        x = rng.normal((3, 3)) + np.eye(3)  # keep away from the exact-identity cusp

        def fn(p):
            return T.frobenius_distance_to_identity(p["x"])

        return fn, {"x": T.Tensor(x)}

    return {
        "add": binary(T.add),
        "sub": binary(T.sub),
        "mul": binary(T.mul),
        "div": binary(T.div),
        "neg": unary(T.neg),
        "exp": unary(T.exp),
        "log": unary(T.log, positive=True),
        "sqrt": unary(T.sqrt, positive=True),
        "sigmoid": unary(T.sigmoid),
        "softplus": unary(T.softplus),
        "softmax": unary(lambda x: T.softmax(x, axis=1)),
        "l2_normalize": unary(lambda x: T.l2_normalize(x, axis=1)),
        "reshape": shaped(lambda x: T.reshape(x, (3, 2)), (3, 2)),
        "transpose": shaped(lambda x: T.transpose(x), (3, 2)),
        "broadcast_to": shaped(
            lambda x: T.broadcast_to(T.reshape(x, (1, 2, 3)), (4, 2, 3)), (4, 2, 3)
        ),
        "sum": shaped(lambda x: T.sum_(x, axis=1), (2,)),
        "mean": shaped(lambda x: T.mean(x, axis=0), (3,)),
        "matmul": matmul_case,
        "bmm": bmm_case,
        "layer_norm": layer_norm_case,
        "diag_part": diag_case,
        "logsumexp": lse_case,
        "frobenius": frob_case,
    }


@pytest.mark.parametrize("name", sorted(_op_cases()))
def test_every_op_matches_finite_differences(name):
    """100 seeded random instances per op, 64-bit, step 1e-5."""
    build = _op_cases()[name]
    worst = 0.0
    for seed in range(100):
        fn, params = build(Rng(seed * 7919 + 13))
        report = T.grad_check(fn, params, step=1e-5)
        worst = max(worst, report.max_rel_err)
    assert worst <= 1e-4, f"{name}: max relative error {worst:.3e}"
