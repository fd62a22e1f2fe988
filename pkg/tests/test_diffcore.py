import math

import numpy as np
import pytest

from causalcdr import diffcore as dc


def taylor_expm(x, terms=30):
    # independent oracle: plain truncated series, no scaling
    n = x.shape[0]
    out = np.eye(n)
    term = np.eye(n)
    for j in range(1, terms + 1):
        term = term @ x / j
        out = out + term
    return out


def tape_grad_of(build, params, seed=0):
    """Run build(tape, nodes) -> scalar node; return (value, grads)."""
    tape = dc.Tape()
    nodes = {name: tape.param(name, value) for name, value in params.items()}
    loss = build(tape, nodes)
    tape.backward(loss)
    return float(loss.value), tape.grads()


def fd_check(build, params, step=1e-5):
    def loss_fn(p):
        return tape_grad_of(build, p)

    return dc.finite_diff_check(loss_fn, params, step=step)


class TestPrimitives:
    def test_relu_gradient_zero_on_negatives(self):
        tape = dc.Tape()
        x = tape.param("x", np.array([-0.5, 0.7]))
        loss = dc.sq_l2(dc.relu(x))
        tape.backward(loss)
        assert tape.grad("x")[0] == 0.0
        assert tape.grad("x")[1] == pytest.approx(2 * 0.7)

    def test_sigmoid_at_zero(self):
        tape = dc.Tape()
        x = tape.param("x", np.zeros(3))
        out = dc.sigmoid(x)
        assert np.allclose(out.value, 0.5)

    def test_concat_backward_splits_at_k(self):
        k = 4
        tape = dc.Tape()
        a = tape.param("a", np.arange(k, dtype=float))
        b = tape.param("b", np.ones(k))
        joined = dc.vconcat(a, b)
        assert joined.shape == (2 * k,)
        loss = dc.sq_l2(joined)
        tape.backward(loss)
        assert np.allclose(tape.grad("a"), 2 * np.arange(k, dtype=float))
        assert np.allclose(tape.grad("b"), 2 * np.ones(k))

    def test_unreachable_parameter_gets_zero_gradient(self):
        tape = dc.Tape()
        x = tape.param("x", np.ones(2))
        tape.param("unused", np.ones((3, 3)))
        tape.backward(dc.sq_l2(x))
        assert np.array_equal(tape.grad("unused"), np.zeros((3, 3)))

    def test_gradient_accumulation_is_additive(self):
        # x feeds two branches; gradient is the sum of both contributions
        tape = dc.Tape()
        x = tape.param("x", np.array([1.0, 2.0]))
        loss = dc.add(dc.sq_l2(x), dc.l1(x))
        tape.backward(loss)
        assert np.allclose(tape.grad("x"), 2 * np.array([1.0, 2.0]) + 1.0)

    def test_dimension_mismatch_reports_shapes(self):
        tape = dc.Tape()
        a = tape.param("a", np.ones((2, 3)))
        b = tape.param("b", np.ones((2, 2)))
        with pytest.raises(dc.ShapeError, match=r"\(2, 3\)"):
            dc.add(a, b)

    def test_non_finite_identifies_operation(self):
        tape = dc.Tape()
        x = tape.param("x", np.array(0.0))
        with pytest.raises(dc.NonFiniteError, match="log_scalar"):
            dc.log_scalar(x)

    def test_duplicate_parameter_name_rejected(self):
        tape = dc.Tape()
        tape.param("w", np.ones(2))
        with pytest.raises(dc.TapeStateError):
            tape.param("w", np.ones(2))

    def test_tape_single_use(self):
        tape = dc.Tape()
        x = tape.param("x", np.ones(2))
        loss = dc.sq_l2(x)
        tape.backward(loss)
        with pytest.raises(dc.TapeStateError):
            tape.backward(loss)
        with pytest.raises(dc.TapeStateError):
            dc.relu(x)

    def test_gather_cols_accumulates_repeats(self):
        tape = dc.Tape()
        w = tape.param("w", np.arange(6, dtype=float).reshape(2, 3))
        picked = dc.gather_cols(w, [1, 1, 2])
        loss = dc.sq_l2(picked)
        tape.backward(loss)
        expected = np.zeros((2, 3))
        expected[:, 1] = 2 * 2 * w.value[:, 1]
        expected[:, 2] = 2 * w.value[:, 2]
        assert np.allclose(tape.grad("w"), expected)

    def test_bce_matches_scalar_oracle(self):
        rng = np.random.default_rng(7)
        p = rng.uniform(0.05, 0.95, size=8)
        t = rng.integers(0, 2, size=8).astype(float)
        tape = dc.Tape()
        pn = tape.param("p", p)
        loss = dc.bce_sum(pn, t)
        oracle = -sum(ti * math.log(pi) + (1 - ti) * math.log(1 - pi)
                      for pi, ti in zip(p, t))
        assert float(loss.value) == pytest.approx(oracle, rel=1e-12)

    def test_softmax_pair_batch_matches_single(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(2, 5))
        tape = dc.Tape()
        zn = tape.param("z", z)
        p = dc.softmax_pair(zn)
        for col in range(5):
            e = np.exp(z[:, col] - z[:, col].max())
            assert np.allclose(p.value[:, col], e / e.sum())


@pytest.mark.parametrize("seed", range(5))
def test_primitive_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    k, b = 4, 3
    params = {
        "w": rng.normal(size=(k, k)),
        "v": rng.normal(size=(k, b)),
        "x": rng.normal(size=k),
        "m": rng.normal(size=(2, k)),
        "a": rng.normal(size=(k, k)) * 0.4,
    }

    def build(tape, n):
        h = dc.relu(dc.matmul(n["w"], n["v"]))                    # k x b
        s = dc.sigmoid(dc.matmul_t(n["w"], h))                    # k x b
        top = dc.softmax_pair(dc.matmul(n["m"], s))               # 2 x b
        probs = dc.slice_rows(top, 1, 2)                          # 1 x b
        labels = (np.arange(b) % 2).astype(float).reshape(1, b)
        terms = [
            dc.bce_sum(probs, labels),
            dc.scale(dc.sq_l2(dc.sub(h, s)), 0.5),
            dc.scale(dc.l1(dc.slice_cols(n["a"], 1, 3)), 0.3),
            dc.scale(dc.log_scalar(dc.add_scalar(dc.l1(dc.matvec(n["a"], n["x"])), 1e-8)), -0.1),
            dc.acyclicity_term(n["a"]),
            dc.scale(dc.l2_norm(n["w"], n["m"]), 0.01),
            dc.sq_l2(dc.mul(n["x"], dc.matvec_t(n["w"], n["x"]))),
            dc.sq_l2(dc.vconcat(n["x"], dc.slice_rows(n["x"], 0, k))),
            dc.sq_l2(dc.hconcat(dc.gather_cols(n["v"], [0, 2, 0]), h)),
        ]
        return dc.add_n(terms)

    assert fd_check(build, params) < 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_gather_and_scale_gradients(seed):
    rng = np.random.default_rng(200 + seed)
    params = {"w": rng.normal(size=(3, 6))}

    def build(tape, n):
        picked = dc.gather_cols(n["w"], [5, 0, 5])
        return dc.scale(dc.sq_l2(picked), 0.7)

    assert fd_check(build, params) < 1e-6


class TestGradReverse:
    def test_forward_is_identity(self):
        tape = dc.Tape()
        x = tape.param("x", np.array([1.0, -2.0]))
        out = dc.grad_reverse(x, 1.0)
        assert np.array_equal(out.value, np.array([1.0, -2.0]))

    def test_double_forward_is_identity(self):
        tape = dc.Tape()
        x = tape.param("x", np.array([0.3, 0.4, -1.0]))
        out = dc.grad_reverse(dc.grad_reverse(x, 1.0), 1.0)
        assert np.array_equal(out.value, x.value)

    def test_backward_negates_gradient(self):
        tape = dc.Tape()
        x = tape.param("x", np.array([1.0, 1.0]))
        # downstream gradient of sum-like loss is 0.3 per entry
        loss = dc.scale(dc.l1(dc.grad_reverse(x, 1.0)), 0.3)
        tape.backward(loss)
        assert np.allclose(tape.grad("x"), [-0.3, -0.3])

    def test_backward_scales_by_factor(self):
        tape = dc.Tape()
        x = tape.param("x", np.array([2.0]))
        loss = dc.l1(dc.grad_reverse(x, 0.5))
        tape.backward(loss)
        assert np.allclose(tape.grad("x"), [-0.5])

    def test_scale_zero_blocks_gradient(self):
        tape = dc.Tape()
        x = tape.param("x", np.array([2.0]))
        loss = dc.sq_l2(dc.grad_reverse(x, 0.0))
        tape.backward(loss)
        assert np.array_equal(tape.grad("x"), np.zeros(1))

    def test_negative_scale_rejected(self):
        tape = dc.Tape()
        x = tape.param("x", np.ones(1))
        with pytest.raises(ValueError):
            dc.grad_reverse(x, -1.0)

    def test_tape_gradient_is_minus_fd_of_unreversed_path(self):
        # two-parameter hand computation: loss = sigmoid(w * grl(e * x))
        rng = np.random.default_rng(11)
        params = {"e": rng.normal(size=(2, 2)), "w": rng.normal(size=(1, 2))}
        x = rng.normal(size=2)

        def with_grl(p):
            tape = dc.Tape()
            e = tape.param("e", p["e"])
            w = tape.param("w", p["w"])
            hidden = dc.grad_reverse(dc.matvec(e, tape.constant(x)), 1.0)
            out = dc.sigmoid(dc.matvec(w, hidden))
            loss = dc.bce_sum(out, np.array([1.0]))
            tape.backward(loss)
            return float(loss.value), tape.grads()

        def without_grl(p):
            tape = dc.Tape()
            e = tape.param("e", p["e"])
            w = tape.param("w", p["w"])
            hidden = dc.matvec(e, tape.constant(x))
            out = dc.sigmoid(dc.matvec(w, hidden))
            loss = dc.bce_sum(out, np.array([1.0]))
            tape.backward(loss)
            return float(loss.value), tape.grads()

        _, grads_grl = with_grl(params)

        # encoder block: tape gradient equals -1 x finite difference of the
        # non-reversed composition
        def neg_loss(p):
            value, grads = without_grl({"e": p["e"], "w": params["w"]})
            return -value, {"e": -grads["e"]}

        err = dc.finite_diff_check(neg_loss, {"e": params["e"]}, step=1e-6)
        assert err < 1e-6
        _, grads_plain = without_grl(params)
        assert np.allclose(grads_grl["e"], -grads_plain["e"])
        # discriminator block unaffected by the reversal node
        assert np.allclose(grads_grl["w"], grads_plain["w"])


class TestAcyclicity:
    def test_zero_matrix(self):
        assert dc.acyclicity(np.zeros((4, 4))) == pytest.approx(0.0, abs=1e-12)

    def test_strictly_upper_triangular_is_acyclic(self):
        rng = np.random.default_rng(5)
        a = np.triu(rng.normal(size=(4, 4)) * 3, k=1)
        assert abs(dc.acyclicity(a)) < 1e-10

    def test_two_cycle_value(self):
        a = np.array([[0.0, 1.0], [1.0, 0.0]])
        expected = 2 * math.cosh(1.0) - 2
        assert dc.acyclicity(a) == pytest.approx(expected, abs=1e-10)
        # cross-check against a 30-term Taylor series oracle
        oracle = float(np.trace(taylor_expm(a * a))) - 2
        assert dc.acyclicity(a) == pytest.approx(oracle, abs=1e-12)

    def test_two_cycle_with_small_weights_positive(self):
        a = np.array([[0.0, 0.1], [0.1, 0.0]])
        assert dc.acyclicity(a) > 0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=(6, 6)) * 0.5
        perm = rng.permutation(6)
        p = np.eye(6)[perm]
        assert dc.acyclicity(p @ a @ p.T) == pytest.approx(dc.acyclicity(a), rel=1e-12)

    def test_matrix_exp_against_taylor_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(5):
            x = rng.normal(size=(5, 5))
            assert np.allclose(dc.matrix_exp(x), taylor_expm(x, terms=60), atol=1e-10)

    def test_gradient_zero_matrix(self):
        assert np.array_equal(dc.acyclicity_gradient(np.zeros((3, 3))), np.zeros((3, 3)))

    def test_gradient_two_cycle_entry(self):
        a = np.array([[0.0, 1.0], [1.0, 0.0]])
        grad = dc.acyclicity_gradient(a)
        assert grad[0, 1] == pytest.approx(2 * math.sinh(1.0), abs=1e-10)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(300 + seed)
        a = rng.normal(size=(4, 4)) * 0.6
        grad = dc.acyclicity_gradient(a)
        step = 1e-5
        for i in range(4):
            for j in range(4):
                ap = a.copy()
                ap[i, j] += step
                am = a.copy()
                am[i, j] -= step
                fd = (dc.acyclicity(ap) - dc.acyclicity(am)) / (2 * step)
                denom = max(abs(grad[i, j]), abs(fd))
                if denom < 1e-8:
                    assert abs(grad[i, j] - fd) < 1e-8
                else:
                    assert abs(grad[i, j] - fd) / denom < 1e-5

    def test_non_square_rejected(self):
        with pytest.raises(dc.ShapeError):
            dc.acyclicity(np.ones((2, 3)))


class TestFiniteDiffCheck:
    def test_quadratic_loss(self):
        def loss_fn(p):
            x = p["x"]
            return float(np.sum(x * x)), {"x": 2 * x}

        err = dc.finite_diff_check(loss_fn, {"x": np.array([1.0, 2.0])}, step=1e-6)
        assert err < 1e-7

    def test_wrong_gradient_detected(self):
        def loss_fn(p):
            x = p["x"]
            return float(np.sum(x * x)), {"x": 3 * x}

        err = dc.finite_diff_check(loss_fn, {"x": np.array([1.0, 2.0])}, step=1e-6)
        assert err > 0.2

    def test_nondeterministic_rejected(self):
        state = {"calls": 0}

        def loss_fn(p):
            state["calls"] += 1
            return float(state["calls"]), {"x": np.zeros(1)}

        with pytest.raises(ValueError, match="deterministic"):
            dc.finite_diff_check(loss_fn, {"x": np.zeros(1)})

    def test_step_range_enforced(self):
        def loss_fn(p):
            return 0.0, {"x": np.zeros(1)}

        with pytest.raises(ValueError):
            dc.finite_diff_check(loss_fn, {"x": np.zeros(1)}, step=0.5)
