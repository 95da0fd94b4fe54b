import numpy as np
import numpy.testing as npt
import pytest

from avloc import numkern as nk


def rand_mask(rng, rows, cols):
    """Random 0/1 mask with at least one admissible entry per row."""
    m = (rng.random((rows, cols)) < 0.5).astype(float)
    for i in range(rows):
        if m[i].sum() == 0:
            m[i, rng.integers(cols)] = 1.0
    return m


class TestMaskedSoftmax:
    def test_symmetric_scores(self):
        out = nk.masked_softmax(nk.Tensor([[0.0, 0.0]]), np.ones((1, 2)))
        npt.assert_allclose(out.value, [[0.5, 0.5]])

    def test_single_permitted_entry(self):
        out = nk.masked_softmax(nk.Tensor([[5.0, -3.0]]), np.array([[0.0, 1.0]]))
        npt.assert_array_equal(out.value, [[0.0, 1.0]])

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            s = rng.standard_normal((4, 4)) * 3
            m = rand_mask(rng, 4, 4)
            out = nk.masked_softmax(nk.Tensor(s), m).value
            e = m * np.exp(s)
            expected = e / e.sum(axis=1, keepdims=True)
            npt.assert_allclose(out, expected, atol=1e-12)

    def test_all_zero_row_rejected(self):
        with pytest.raises(ValueError, match="row 1"):
            nk.masked_softmax(nk.Tensor(np.zeros((2, 3))), np.array([[1, 0, 0], [0, 0, 0.0]]))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            nk.masked_softmax(nk.Tensor(np.zeros((2, 3))), np.ones((3, 2)))

    def test_row_stochastic_and_zero_on_masked(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            r, c = rng.integers(1, 7, size=2)
            s = rng.standard_normal((r, c)) * rng.uniform(0.1, 50)
            m = rand_mask(rng, r, c)
            p = nk.masked_softmax(nk.Tensor(s), m).value
            npt.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
            assert (p[m == 0] == 0.0).all()
            assert np.isfinite(p).all()

    def test_equals_plain_softmax_with_ones_mask(self):
        rng = np.random.default_rng(3)
        s = rng.standard_normal((5, 6))
        p = nk.masked_softmax(nk.Tensor(s), np.ones((5, 6))).value
        e = np.exp(s - s.max(axis=1, keepdims=True))
        npt.assert_allclose(p, e / e.sum(axis=1, keepdims=True), atol=1e-14)

    def test_huge_masked_scores_do_not_overflow(self):
        s = np.array([[1.0, 1e6], [0.0, -1e6]])
        m = np.array([[1.0, 0.0], [1.0, 1.0]])
        p = nk.masked_softmax(nk.Tensor(s), m).value
        assert np.isfinite(p).all()
        npt.assert_allclose(p[0], [1.0, 0.0])


class TestFiniteDifference:
    def test_quadratic(self):
        x = nk.parameter([[3.0]], "x")
        g, unv = nk.finite_difference_gradient(lambda: nk.mul(x, x), [x])
        assert not unv
        npt.assert_allclose(g["x"], [[6.0]], atol=1e-6)

    def test_constant_function(self):
        x = nk.parameter([[1.0, 2.0]], "x")
        g, _ = nk.finite_difference_gradient(lambda: nk.Tensor([[4.2]]), [x])
        npt.assert_array_equal(g["x"], [[0.0, 0.0]])

    def test_softmax_dot_matches_analytic(self):
        rng = np.random.default_rng(5)
        x = nk.parameter(rng.standard_normal((1, 6)), "x")
        c = nk.Tensor(rng.standard_normal((6, 1)))

        def f():
            return nk.matmul(nk.masked_softmax(x, np.ones((1, 6))), c)

        rep = nk.check_gradients(f, [x], tol=1e-6)
        assert rep.ok, str(rep)

    def test_nonfinite_entries_reported(self):
        x = nk.parameter([[0.0]], "x")

        def f():
            # log of a negative perturbation is NaN
            return nk.log(x)

        g, unv = nk.finite_difference_gradient(f, [x])
        assert ("x", 0) in unv
        assert np.isnan(g["x"][0, 0])

    def test_rejects_nonpositive_eps(self):
        x = nk.parameter([[1.0]], "x")
        with pytest.raises(ValueError):
            nk.finite_difference_gradient(lambda: x, [x], eps=0.0)


def _gradcheck_cases():
    """One scalar readout per primitive, exercised on random small inputs."""
    rng = np.random.default_rng(42)

    def readout(t):
        w = nk.Tensor(rng.standard_normal(t.shape))
        return nk.tsum(nk.mul(t, w))

    def case(name, build, shapes, positive=False):
        return (name, build, shapes, positive)

    return [
        case("add", lambda a, b: nk.add(a, b), [(3, 4), (3, 4)]),
        case("add_bcast_row", lambda a, b: nk.add(a, b), [(3, 4), (1, 4)]),
        case("add_bcast_col", lambda a, b: nk.add(a, b), [(3, 4), (3, 1)]),
        case("sub", lambda a, b: nk.sub(a, b), [(3, 4), (3, 4)]),
        case("mul", lambda a, b: nk.mul(a, b), [(2, 5), (2, 5)]),
        case("mul_bcast", lambda a, b: nk.mul(a, b), [(2, 5), (2, 1)]),
        case("div", lambda a, b: nk.div(a, b), [(2, 3), (2, 3)], positive=True),
        case("matmul", lambda a, b: nk.matmul(a, b), [(3, 4), (4, 2)]),
        case("maximum", lambda a, b: nk.maximum(a, b), [(3, 3), (3, 3)]),
        case("neg", lambda a: nk.neg(a), [(2, 3)]),
        case("exp", lambda a: nk.exp(a), [(2, 3)]),
        case("log", lambda a: nk.log(a), [(2, 3)], positive=True),
        case("sqrt", lambda a: nk.sqrt(a), [(2, 3)], positive=True),
        case("sigmoid", lambda a: nk.sigmoid(a), [(2, 4)]),
        case("relu", lambda a: nk.relu(a), [(3, 3)]),
        case("softplus", lambda a: nk.softplus(a), [(2, 4)]),
        case("sum_all", lambda a: nk.tsum(a), [(3, 4)]),
        case("sum_rows", lambda a: nk.tsum(a, axis=0), [(3, 4)]),
        case("sum_cols", lambda a: nk.tsum(a, axis=1), [(3, 4)]),
        case("row_max", lambda a: nk.row_max(a), [(4, 5)]),
        case("concat_rows", lambda a, b: nk.concat_rows([a, b]), [(2, 3), (4, 3)]),
        case("concat_cols", lambda a, b: nk.concat_cols([a, b]), [(3, 2), (3, 4)]),
        case("slice_rows", lambda a: nk.slice_rows(a, 1, 6, 2), [(6, 3)]),
        case("slice_cols", lambda a: nk.slice_cols(a, 0, 4, 2), [(3, 5)]),
        case("transpose", lambda a: nk.transpose(a), [(3, 4)]),
        case("l2_normalize_rows", lambda a: nk.l2_normalize_rows(a), [(3, 4)]),
        case("layer_norm", lambda a, g, b: nk.layer_norm(a, g, b), [(3, 6), (1, 6), (1, 6)]),
        case("masked_softmax", None, [(4, 4)]),  # special-cased below
    ]


@pytest.mark.parametrize("name,build,shapes,positive", _gradcheck_cases(),
                         ids=[c[0] for c in _gradcheck_cases()])
def test_primitive_gradients_match_finite_differences(name, build, shapes, positive):
    rng = np.random.default_rng(hash(name) % 2**32)
    for trial in range(20):
        params = []
        for k, shape in enumerate(shapes):
            v = rng.standard_normal(shape)
            if positive:
                v = np.abs(v) + 0.5
            params.append(nk.parameter(v, f"p{k}"))
        w = nk.Tensor(rng.standard_normal(1))  # placeholder, replaced per case

        if name == "masked_softmax":
            m = rand_mask(rng, *shapes[0])
            wout = nk.Tensor(rng.standard_normal(shapes[0]))

            def f():
                return nk.tsum(nk.mul(nk.masked_softmax(params[0], m), wout))
        else:
            out_shape = build(*params).shape
            wout = nk.Tensor(rng.standard_normal(out_shape))

            def f():
                return nk.tsum(nk.mul(build(*params), wout))

        rep = nk.check_gradients(f, params, tol=1e-6)
        assert rep.ok, f"{name} trial {trial}: {rep.failures[:3]}"


class TestTensorBasics:
    def test_matrix_coercion_and_invariants(self):
        t = nk.Tensor([1.0, 2.0, 3.0])
        assert t.shape == (1, 3)
        t2 = nk.Tensor(4.0)
        assert t2.shape == (1, 1)
        with pytest.raises(ValueError):
            nk.Tensor(np.zeros((2, 2, 2)))

    def test_parameter_grad_shape_and_reset(self):
        p = nk.parameter(np.ones((2, 3)), "p")
        assert p.grad.shape == p.value.shape
        nk.tsum(nk.mul(p, p)).backward()
        assert p.grad.any()
        p.zero_grad()
        npt.assert_array_equal(p.grad, np.zeros((2, 3)))

    def test_backward_requires_scalar(self):
        p = nk.parameter(np.ones((2, 2)), "p")
        with pytest.raises(ValueError):
            nk.mul(p, p).backward()

    def test_grad_accumulates_across_backward_calls(self):
        p = nk.parameter([[2.0]], "p")
        nk.mul(p, p).backward()
        nk.mul(p, p).backward()
        npt.assert_allclose(p.grad, [[8.0]])

    def test_no_grad_suppresses_tape(self):
        p = nk.parameter([[2.0]], "p")
        with nk.no_grad():
            out = nk.mul(p, p)
        assert out._parents == ()
        assert not out._live

    def test_shared_subexpression_gradient(self):
        # y = (x + x) * x => dy/dx = 4x
        p = nk.parameter([[3.0]], "p")
        y = nk.mul(nk.add(p, p), p)
        y.backward()
        npt.assert_allclose(p.grad, [[12.0]])

    def test_operator_sugar(self):
        a = nk.Tensor([[1.0, 2.0]])
        b = nk.Tensor([[3.0, 4.0]])
        npt.assert_allclose((a + b).value, [[4.0, 6.0]])
        npt.assert_allclose((a - b).value, [[-2.0, -2.0]])
        npt.assert_allclose((a * 2.0).value, [[2.0, 4.0]])
        npt.assert_allclose((a / b).value, [[1 / 3, 0.5]])
        npt.assert_allclose((a @ b.T).value, [[11.0]])
        npt.assert_allclose((-a).value, [[-1.0, -2.0]])

    def test_determinism(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((5, 5))
        m = rand_mask(np.random.default_rng(1), 5, 5)
        a = nk.masked_softmax(nk.Tensor(x), m).value
        b = nk.masked_softmax(nk.Tensor(x), m).value
        npt.assert_array_equal(a, b)

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(9)
        x = nk.Tensor(rng.standard_normal((4, 4)) * 100)
        for op in (nk.sigmoid, nk.softplus, nk.relu, nk.exp):
            assert np.isfinite(op(x).value).all() or op is nk.exp  # exp(400) overflows by design
        assert np.isfinite(nk.sigmoid(x).value).all()
        assert np.isfinite(nk.softplus(x).value).all()
