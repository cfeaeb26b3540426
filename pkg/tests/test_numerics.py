"""Autodiff engine, optimizers, finite-difference oracle, and RNG streams."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsmm.numerics import (
    AdamState,
    ContractError,
    NumericError,
    ParamSet,
    Rng,
    Tensor,
    adam_step,
    concat,
    finite_diff_grad,
    grad_gap,
    jvp,
    logc,
    matmul,
    max_rel_error,
    mul,
    powc,
    relu,
    reshape,
    sgd_step,
    sigmoid,
    tanh,
    tmean,
    tsum,
    value_and_grad,
)


def random_params(seed: int) -> ParamSet:
    rng = Rng(seed, "params")
    return ParamSet(
        {
            "w1": rng.uniform(-0.8, 0.8, (5, 7)),
            "b1": rng.uniform(-0.5, 0.5, (7,)),
            "w2": rng.uniform(-0.8, 0.8, (7, 3)),
            "b2": rng.uniform(-0.5, 0.5, (3,)),
        }
    )


def composite_net(seed: int):
    """A loss touching every supported primitive."""
    rng = Rng(seed, "inputs")
    x = rng.uniform(-1.0, 1.0, (4, 5))

    def loss(p):
        h = relu(matmul(Tensor(x), p["w1"]) + p["b1"])
        a = tanh(matmul(h, p["w2"]) + p["b2"])
        s = sigmoid(a)
        stacked = concat([s, mul(s, s)], axis=1)
        flat = reshape(stacked, (4 * 6, 1))
        shaped = powc(1.0 - 0.5 * sigmoid(flat), 1.5)
        return tmean(mul(shaped, -logc(0.3 + 0.5 * sigmoid(flat)))) + 0.1 * tsum(
            tmean(s, axis=0)
        )

    return loss


class TestValueAndGrad:
    def test_sum_of_params_has_unit_gradient(self):
        p = ParamSet({"p": np.arange(4.0).reshape(2, 2)})
        value, grad = value_and_grad(lambda t: tsum(t["p"]), p)
        assert value == 6.0
        assert np.array_equal(grad["p"], np.ones((2, 2)))

    def test_zero_times_anything_has_zero_gradient(self):
        p = ParamSet({"p": np.array([[1.5, -2.0]])})
        _, grad = value_and_grad(lambda t: tsum(mul(t["p"], Tensor(0.0))), p)
        assert np.array_equal(grad["p"], np.zeros((1, 2)))

    def test_mean_sigmoid_matches_finite_differences(self):
        rng = Rng(7, "net")
        p = ParamSet({"w": rng.uniform(-1, 1, (6, 4))})
        x = rng.uniform(-1, 1, (3, 6))

        def loss(t):
            return tmean(sigmoid(matmul(Tensor(x), t["w"])))

        _, grad = value_and_grad(loss, p)
        fd = finite_diff_grad(loss, p, 1e-5)
        assert max_rel_error(grad, fd, floor=1e-3) <= 1e-6

    @pytest.mark.parametrize("seed", range(10))
    def test_composite_suite_matches_finite_differences(self, seed):
        p = random_params(seed)
        loss = composite_net(seed)
        _, grad = value_and_grad(loss, p)
        fd = finite_diff_grad(loss, p, 1e-5)
        assert max_rel_error(grad, fd, floor=1e-3) <= 1e-6

    def test_non_scalar_loss_rejected(self):
        p = ParamSet({"p": np.ones((2, 2))})
        with pytest.raises(ContractError):
            value_and_grad(lambda t: t["p"], p)

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_overflow_names_the_primitive(self):
        p = ParamSet({"p": np.array([[1e300]])})
        with pytest.raises(NumericError, match="mul"):
            value_and_grad(lambda t: tsum(mul(t["p"], t["p"])), p)

    def test_leaf_rejects_non_finite(self):
        with pytest.raises(NumericError):
            Tensor(np.array([np.nan]))


class TestFiniteDiff:
    def test_quadratic(self):
        p = ParamSet({"x": np.array([3.0])})
        fd = finite_diff_grad(lambda t: tsum(mul(t["x"], t["x"])), p, 1e-5)
        assert abs(fd["x"][0] - 6.0) <= 1e-8

    def test_constant_function(self):
        p = ParamSet({"x": np.array([2.0, -1.0])})
        fd = finite_diff_grad(lambda t: tsum(mul(t["x"], Tensor(0.0))) + 5.0, p, 1e-4)
        assert np.array_equal(fd["x"], np.zeros(2))

    def test_step_must_be_positive(self):
        p = ParamSet({"x": np.array([1.0])})
        with pytest.raises(ContractError):
            finite_diff_grad(lambda t: tsum(t["x"]), p, 0.0)


class TestJvp:
    @pytest.mark.parametrize("seed", range(6))
    def test_tangent_equals_gradient_inner_product(self, seed):
        p = random_params(seed)
        loss = composite_net(seed)
        _, grad = value_and_grad(loss, p)
        direction = random_params(seed + 100)
        _, tan = jvp(loss, p, direction)
        assert np.isclose(float(tan), grad.dot(direction), rtol=1e-10, atol=1e-12)

    def test_vector_output_tangents(self):
        p = ParamSet({"w": np.array([[2.0], [3.0]])})
        direction = ParamSet({"w": np.array([[1.0], [0.0]])})
        x = np.array([[1.0, 1.0], [2.0, 0.0]])
        out, tan = jvp(lambda t: matmul(Tensor(x), t["w"]), p, direction)
        assert np.allclose(out, [[5.0], [4.0]])
        assert np.allclose(tan, [[1.0], [2.0]])


class TestSgd:
    def test_hand_case(self):
        p = ParamSet({"x": np.array([1.0])})
        g = ParamSet({"x": np.array([2.0])})
        assert sgd_step(p, g, 0.5)["x"][0] == 0.0

    def test_zero_lr_and_zero_grad_keep_params(self):
        p = ParamSet({"x": np.array([1.3, -2.0])})
        assert sgd_step(p, p.zeros_like(), 0.7).equal(p)
        assert sgd_step(p, p.map(np.ones_like), 0.0).equal(p)

    def test_inputs_not_mutated_and_repeatable(self):
        p = ParamSet({"x": np.array([1.0, 2.0])})
        g = ParamSet({"x": np.array([0.5, -0.5])})
        before = p["x"].copy()
        first = sgd_step(p, g, 0.1)
        second = sgd_step(p, g, 0.1)
        assert np.array_equal(p["x"], before)
        assert first.equal(second)

    def test_shape_mismatch_is_contract_error(self):
        p = ParamSet({"x": np.ones(3)})
        g = ParamSet({"x": np.ones(4)})
        with pytest.raises(ContractError):
            sgd_step(p, g, 0.1)


def reference_adam_scalar(x0, grad_fn, lr, steps, beta1=0.9, beta2=0.999, eps=1e-8):
    """Plain scalar transcription of the Adam recurrence."""
    x, m, v = x0, 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        x = x - lr * m_hat / (np.sqrt(v_hat) + eps)
    return x


class TestAdam:
    def test_first_step_magnitude_is_lr_scaled(self):
        for g0 in (0.01, 1.0, 250.0):
            p = ParamSet({"x": np.array([1.0])})
            g = ParamSet({"x": np.array([g0])})
            new, _ = adam_step(p, g, AdamState.zeros(p), lr=0.1, t=1)
            step = p["x"][0] - new["x"][0]
            assert np.isclose(step, 0.1 * g0 / (g0 + 1e-8), rtol=1e-12)

    def test_zero_grad_zero_state_keeps_params(self):
        p = ParamSet({"x": np.array([2.0, -1.0])})
        new, _ = adam_step(p, p.zeros_like(), AdamState.zeros(p), lr=0.1, t=1)
        assert new.equal(p)

    def test_quadratic_convergence_matches_scalar_reference(self):
        p = ParamSet({"x": np.array([5.0])})
        state = AdamState.zeros(p)
        for t in range(1, 101):
            g = ParamSet({"x": 2.0 * p["x"]})
            p, state = adam_step(p, g, state, lr=0.1, t=t)
        assert abs(p["x"][0]) < 0.5
        ref = reference_adam_scalar(5.0, lambda x: 2.0 * x, 0.1, 100)
        assert np.isclose(p["x"][0], ref, rtol=1e-12, atol=1e-12)

    def test_step_index_contract(self):
        p = ParamSet({"x": np.array([1.0])})
        with pytest.raises(ContractError):
            adam_step(p, p.zeros_like(), AdamState.zeros(p), lr=0.1, t=0)

    def test_purity(self):
        p = ParamSet({"x": np.array([1.0])})
        g = ParamSet({"x": np.array([0.3])})
        state = AdamState.zeros(p)
        a1, s1 = adam_step(p, g, state, lr=0.05, t=1)
        a2, s2 = adam_step(p, g, state, lr=0.05, t=1)
        assert a1.equal(a2) and s1.m.equal(s2.m) and s1.v.equal(s2.v)
        assert p["x"][0] == 1.0 and state.m["x"][0] == 0.0


class TestParamSet:
    def test_duplicate_names_rejected(self):
        class Sneaky(dict):
            def items(self):
                yield "a", np.ones(1)
                yield "a", np.zeros(1)

        with pytest.raises(ContractError):
            ParamSet(Sneaky())

    def test_ordering_is_stable(self):
        p = ParamSet({"b": np.ones(1), "a": np.zeros(1)})
        assert p.names() == ["b", "a"]

    def test_dot(self):
        a = ParamSet({"x": np.array([1.0, 2.0]), "y": np.array([[3.0]])})
        b = ParamSet({"x": np.array([4.0, 5.0]), "y": np.array([[6.0]])})
        assert a.dot(b) == 1 * 4 + 2 * 5 + 3 * 6


class TestRng:
    def test_same_seed_same_sequence(self):
        a = Rng(42).split("stream").normal((3, 3))
        b = Rng(42).split("stream").normal((3, 3))
        assert np.array_equal(a, b)

    def test_named_streams_are_independent_of_call_order(self):
        root = Rng(7)
        root.split("first").normal(10)  # consuming one stream
        x = root.split("second").normal(4)
        y = Rng(7).split("second").normal(4)
        assert np.array_equal(x, y)

    def test_different_streams_differ(self):
        r = Rng(3)
        assert not np.array_equal(r.split("a").normal(8), r.split("b").normal(8))

    def test_choice_without_replacement_contract(self):
        with pytest.raises(ContractError):
            Rng(0).choice_without_replacement(3, 4)

    @given(st.integers(min_value=0, max_value=2**63))
    @settings(max_examples=25, deadline=None)
    def test_reproducibility_property(self, seed):
        assert np.array_equal(Rng(seed).normal(5), Rng(seed).normal(5))


class TestErrorMetrics:
    def test_grad_gap_zero_for_equal(self):
        p = random_params(0)
        assert grad_gap(p, p) == 0.0

    def test_max_rel_error_floor(self):
        a = ParamSet({"x": np.array([0.0])})
        b = ParamSet({"x": np.array([5e-10])})
        # below the absolute floor the discrepancy is forgiven
        assert max_rel_error(a, b, floor=1e-3) <= 1e-6
