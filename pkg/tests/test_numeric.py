import numpy as np
import pytest

from keds import numeric as nm
from keds.errors import DegenerateVectorError, DimensionError, GraphError, RankError


def _naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop reference product, no shared code with the library."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        eye = nm.constant(np.eye(2))
        b = nm.constant([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(nm.matmul(eye, b).data, b.data)

    def test_dimension_error_names_shapes(self):
        a = nm.constant(np.zeros((3, 4)))
        b = nm.constant(np.zeros((5, 2)))
        with pytest.raises(DimensionError, match=r"\(3, 4\).*\(5, 2\)"):
            nm.matmul(a, b)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((8, 8))
        b = rng.standard_normal((8, 8))
        got = nm.matmul(nm.constant(a, np.float64), nm.constant(b, np.float64)).data
        want = _naive_matmul(a, b)
        np.testing.assert_allclose(got, want, rtol=1e-6)

    def test_batched_weight_broadcast(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((5, 7, 4))
        w = rng.standard_normal((4, 3))
        got = nm.matmul(nm.constant(x, np.float64), nm.constant(w, np.float64)).data
        np.testing.assert_allclose(got, x @ w, rtol=1e-12)


class TestSoftmax:
    def test_uniform_logits(self):
        out = nm.softmax_rows(nm.constant([[0.0, 0.0, 0.0]])).data
        np.testing.assert_allclose(out, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-7)

    def test_huge_logit_no_overflow(self):
        out = nm.softmax_rows(nm.constant([[1000.0, 0.0, 0.0]])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out[0, 0], 1.0, atol=1e-6)
        np.testing.assert_allclose(out[0, 1:], 0.0, atol=1e-6)

    def test_matches_scalar_formula(self):
        # high-precision direct evaluation of exp(x_i) / sum_j exp(x_j)
        x = np.array([1.0, 2.0, 3.0], dtype=np.float64)
        denom = sum(np.exp(v) for v in x)
        want = np.array([np.exp(v) / denom for v in x])
        got = nm.softmax_rows(nm.constant(x[None, :], np.float64)).data[0]
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_rows_sum_to_one_up_to_1e4(self):
        rng = np.random.default_rng(5)
        for mag in (1.0, 1e2, 1e4):
            x = nm.constant(rng.uniform(-mag, mag, size=(20, 8)), np.float32)
            sums = nm.softmax_rows(x).data.sum(axis=-1)
            np.testing.assert_allclose(sums, 1.0, atol=1e-6)


class TestNormalize:
    def test_three_four_five(self):
        out = nm.l2_normalize(nm.constant([3.0, 4.0])).data
        np.testing.assert_allclose(out, [0.6, 0.8], atol=1e-7)

    def test_zero_vector_errors(self):
        with pytest.raises(DegenerateVectorError):
            nm.l2_normalize(nm.constant([0.0, 0.0, 0.0]))

    def test_unit_norm(self):
        rng = np.random.default_rng(7)
        out = nm.l2_normalize(nm.constant(rng.standard_normal(16), np.float64)).data
        assert abs(np.linalg.norm(out) - 1.0) < 1e-6


class TestBackward:
    def test_sum_gives_ones(self):
        x = nm.parameter([1.0, 2.0, 3.0], np.float64)
        nm.backward(nm.sum_all(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_quadratic(self):
        x = nm.parameter([1.0, 2.0], np.float64)
        nm.backward(nm.dot(x, x))
        np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-12)

    def test_non_scalar_root_is_rank_error(self):
        x = nm.parameter([1.0, 2.0], np.float64)
        with pytest.raises(RankError):
            nm.backward(x)

    def test_backward_twice_errors(self):
        x = nm.parameter([1.0, 2.0], np.float64)
        root = nm.sum_all(nm.mul(x, x))
        nm.backward(root)
        with pytest.raises(GraphError):
            nm.backward(root)

    def test_leaves_reusable_across_graphs(self):
        x = nm.parameter([1.0, 2.0], np.float64)
        nm.backward(nm.sum_all(x))
        nm.backward(nm.sum_all(x))  # fresh graph, accumulates
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_each_node_visited_once(self):
        # diamond graph: y = (x + x) * (x + x); grad must be exact, 8x
        x = nm.parameter([0.5], np.float64)
        s = nm.add(x, x)
        nm.backward(nm.sum_all(nm.mul(s, s)))
        np.testing.assert_allclose(x.grad, [8.0 * 0.5], atol=1e-12)


class TestBroadcastPolicy:
    def test_bias_add_row_vector(self):
        a = nm.parameter(np.ones((2, 3)), np.float64)
        b = nm.parameter(np.arange(3.0), np.float64)
        nm.backward(nm.sum_all(nm.add(a, b)))
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_no_general_broadcast(self):
        a = nm.constant(np.ones((2, 3)))
        b = nm.constant(np.ones((2, 1)))
        with pytest.raises(DimensionError):
            nm.add(a, b)
        with pytest.raises(DimensionError):
            nm.mul(a, b)


def _fd_cases():
    """One scalar-loss builder per differentiable op exported here."""

    def case_matmul(rng):
        a = nm.parameter(rng.standard_normal((4, 5)), np.float64)
        b = nm.parameter(rng.standard_normal((5, 3)), np.float64)
        return lambda: nm.sum_all(nm.matmul(a, b)), [a, b]

    def case_softmax(rng):
        x = nm.parameter(rng.standard_normal((3, 6)), np.float64)
        w = nm.constant(rng.standard_normal((3, 6)), np.float64)
        return lambda: nm.sum_all(nm.mul(nm.softmax_rows(x), w)), [x]

    def case_log_softmax(rng):
        x = nm.parameter(rng.standard_normal((3, 6)), np.float64)
        w = nm.constant(rng.standard_normal((3, 6)), np.float64)
        return lambda: nm.sum_all(nm.mul(nm.log_softmax_rows(x), w)), [x]

    def case_normalize(rng):
        x = nm.parameter(rng.standard_normal((4, 7)) + 0.5, np.float64)
        w = nm.constant(rng.standard_normal((4, 7)), np.float64)
        return lambda: nm.sum_all(nm.mul(nm.l2_normalize(x), w)), [x]

    def case_layer_norm(rng):
        x = nm.parameter(rng.standard_normal((3, 5)), np.float64)
        g = nm.parameter(1.0 + 0.1 * rng.standard_normal(5), np.float64)
        b = nm.parameter(0.1 * rng.standard_normal(5), np.float64)
        w = nm.constant(rng.standard_normal((3, 5)), np.float64)
        return lambda: nm.sum_all(nm.mul(nm.layer_norm(x, g, b), w)), [x, g, b]

    def case_gelu(rng):
        x = nm.parameter(rng.standard_normal((4, 4)), np.float64)
        return lambda: nm.sum_all(nm.gelu(x)), [x]

    def case_elementwise(rng):
        a = nm.parameter(rng.standard_normal(6), np.float64)
        b = nm.parameter(rng.standard_normal(6), np.float64)
        return lambda: nm.sum_all(nm.mul(nm.add(a, b), nm.sub(a, b))), [a, b]

    def case_structural(rng):
        x = nm.parameter(rng.standard_normal((2, 3, 4)), np.float64)
        w = nm.constant(rng.standard_normal((3, 2, 4)), np.float64)
        def loss():
            y = nm.transpose(x, (1, 0, 2))
            y = nm.mul(y, w)
            y = nm.reshape(y, (6, 4))
            return nm.mean_all(nm.mean_axis(y, 0))
        return loss, [x]

    def case_concat(rng):
        a = nm.parameter(rng.standard_normal((2, 3)), np.float64)
        b = nm.parameter(rng.standard_normal((2, 3)), np.float64)
        w = nm.constant(rng.standard_normal((4, 3)), np.float64)
        return lambda: nm.sum_all(nm.mul(nm.concat([a, b], axis=0), w)), [a, b]

    def case_inject(rng):
        base = rng.standard_normal((2, 5, 3))
        pseudo = nm.parameter(rng.standard_normal((2, 2, 3)), np.float64)
        pos = np.array([[1, 3], [0, 4]])
        src = np.array([[0, 1], [1, 0]])
        w = nm.constant(rng.standard_normal((2, 5, 3)), np.float64)
        return lambda: nm.sum_all(nm.mul(nm.inject_rows(base, pseudo, pos, src), w)), [pseudo]

    return {
        "matmul": case_matmul,
        "softmax": case_softmax,
        "log_softmax": case_log_softmax,
        "normalize": case_normalize,
        "layer_norm": case_layer_norm,
        "gelu": case_gelu,
        "elementwise": case_elementwise,
        "structural": case_structural,
        "concat": case_concat,
        "inject": case_inject,
    }


@pytest.mark.parametrize("name", sorted(_fd_cases()))
def test_finite_differences_10_seeds(name):
    case = _fd_cases()[name]
    for seed in range(10):
        rng = np.random.default_rng(1000 + seed)
        build, params = case(rng)
        worst = nm.finite_difference_check(build, params, rng=np.random.default_rng(seed))
        assert worst < 1e-4, f"{name} seed {seed}: rel err {worst:.3e}"


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(42)
        x = nm.parameter(rng.standard_normal((8, 8)).astype(np.float32))
        w = nm.constant(rng.standard_normal((8, 8)).astype(np.float32))
        out = nm.l2_normalize(nm.gelu(nm.matmul(x, w)))
        loss = nm.mean_all(out)
        nm.backward(loss)
        return loss.data.copy(), x.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1.tobytes() == l2.tobytes()
    assert g1.tobytes() == g2.tobytes()
