import math

import numpy as np
import pytest

from mixant import numerics as nx
from mixant.errors import DiscretizationError, ShapeError
from mixant.numerics import Parameter, Rng, finite_difference_check
from mixant.ssm import SsmUnitParams, delta_bias_init, discretize, s4d_real_log, s6_forward, selective_scan, state_matrix


def _inputs(T=5, D=3, N=4, seed=0):
    rng = Rng(seed, ("ssm-test",))
    A = -rng.child("A").uniform(0.5, 2.0, (D, N))
    B = rng.child("B").normal((T, N))
    delta = rng.child("delta").uniform(1e-3, 0.1, (T, D))
    return A, B, delta


def _series_oracle(A, B, delta, terms=20):
    z = delta[:, :, None] * A[None]
    A_bar = sum(z ** k / math.factorial(k) for k in range(terms))
    gain = sum(z ** k / math.factorial(k + 1) for k in range(terms))
    return A_bar, gain * delta[:, :, None] * B[:, None, :]


def test_zoh_matches_truncated_series():
    A, B, delta = _inputs()
    A_bar, B_bar = discretize(A, B, delta)
    oracle_A, oracle_B = _series_oracle(A, B, delta)
    np.testing.assert_allclose(A_bar.data, oracle_A, rtol=0, atol=1e-10)
    np.testing.assert_allclose(B_bar.data, oracle_B, rtol=0, atol=1e-10)


def test_tiny_products_use_the_series_limit():
    A = np.full((2, 3), -1e-12)
    B = np.ones((1, 3))
    delta = np.full((1, 2), 0.05)
    _, B_bar = discretize(A, B, delta)
    np.testing.assert_allclose(B_bar.data, np.full((1, 2, 3), 0.05), rtol=1e-12)


def test_euler_gain_is_delta_times_b():
    A, B, delta = _inputs()
    A_bar, B_bar = discretize(A, B, delta, method="euler")
    np.testing.assert_allclose(B_bar.data, delta[:, :, None] * B[:, None, :])
    np.testing.assert_allclose(A_bar.data, np.exp(delta[:, :, None] * A[None]))


def test_discretize_rejects_non_positive_steps():
    A, B, delta = _inputs()
    delta[2, 1] = 0.0
    with pytest.raises(DiscretizationError):
        discretize(A, B, delta)


def test_discretize_rejects_mismatched_shapes():
    A, B, delta = _inputs()
    with pytest.raises(ShapeError):
        discretize(A, B[:, :2], delta)


def test_discretize_rejects_unknown_method():
    with pytest.raises(DiscretizationError):
        discretize(*_inputs(), method="bilinear")


def _scan_oracle(x, A_bar, B_bar, C):
    T, D, N = A_bar.shape
    h = np.zeros((D, N))
    y = np.zeros((T, D))
    for t in range(T):
        for d in range(D):
            for n in range(N):
                h[d, n] = A_bar[t, d, n] * h[d, n] + B_bar[t, d, n] * x[t, d]
            y[t, d] = sum(C[t, n] * h[d, n] for n in range(N))
    return y


def test_scan_matches_unrolled_recurrence():
    rng = Rng(1, ("scan",))
    T, D, N = 8, 3, 4
    x = rng.child("x").normal((T, D))
    A_bar = rng.child("a").uniform(0.1, 0.99, (T, D, N))
    B_bar = rng.child("b").normal((T, D, N))
    C = rng.child("c").normal((T, N))
    y = selective_scan(x, A_bar, B_bar, C).data
    np.testing.assert_allclose(y, _scan_oracle(x, A_bar, B_bar, C), rtol=0, atol=1e-12)


def test_scan_of_zero_input_is_zero():
    rng = Rng(2, ("scan",))
    y = selective_scan(np.zeros((4, 2)), rng.uniform(0, 1, (4, 2, 3)), rng.normal((4, 2, 3)), rng.normal((4, 3)))
    np.testing.assert_array_equal(y.data, np.zeros((4, 2)))


def test_single_step_scan():
    x = np.array([[2.0, -1.0]])
    A_bar = np.full((1, 2, 2), 0.5)
    B_bar = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    C = np.array([[1.0, -1.0]])
    np.testing.assert_allclose(selective_scan(x, A_bar, B_bar, C).data, [[2.0 * (1 - 2), -1.0 * (3 - 4)]])


def test_scan_is_causal():
    rng = Rng(3, ("scan",))
    x = rng.normal((6, 2))
    args = (rng.uniform(0, 1, (6, 2, 3)), rng.normal((6, 2, 3)), rng.normal((6, 3)))
    y = selective_scan(x, *args).data
    x[4] += 10.0
    y_changed = selective_scan(x, *args).data
    np.testing.assert_array_equal(y[:4], y_changed[:4])
    assert not np.allclose(y[4:], y_changed[4:])


@pytest.mark.parametrize("method", ["zoh", "euler"])
def test_discretize_and_scan_gradients(method):
    rng = Rng(4, ("grad",))
    T, D, N = 5, 3, 2
    A_log = Parameter(np.log(rng.child("A").uniform(0.5, 2.0, (D, N))))
    B = Parameter(rng.child("B").normal((T, N)))
    C = Parameter(rng.child("C").normal((T, N)))
    raw_delta = Parameter(rng.child("d").normal((T, D)))
    x = Parameter(rng.child("x").normal((T, D)))

    def f():
        A_bar, B_bar = discretize(state_matrix(A_log), B, nx.softplus(raw_delta), method)
        return nx.tsum(nx.square(selective_scan(x, A_bar, B_bar, C)))

    assert finite_difference_check(f, [A_log, B, C, raw_delta, x]) < 1e-6


def test_gain_gradient_is_smooth_near_zero():
    A = Parameter(np.full((2, 2), -1e-3))
    B = Parameter(np.ones((3, 2)))
    delta = Parameter(np.full((3, 2), 1e-3))

    def f():
        return nx.tsum(discretize(A, B, delta)[1])

    assert finite_difference_check(f, [A, B, delta], step=1e-7) < 1e-6


def test_s4d_real_and_delta_init():
    np.testing.assert_allclose(-np.exp(s4d_real_log(2, 3)), [[-1, -2, -3], [-1, -2, -3]])
    bias = delta_bias_init(Rng(0, ("dt",)), 64)
    dt = np.log1p(np.exp(bias))
    assert np.all(dt >= 1e-3 - 1e-12) and np.all(dt <= 0.1 + 1e-12)


def test_s6_forward_shape():
    params = SsmUnitParams(6, 4, 3, 1, Rng(0, ("unit",)))
    x = nx.Tensor(Rng(1, ("x",)).normal((7, 6)))
    y = s6_forward(x, params, state_matrix(params.A_log))
    assert y.shape == (7, 6)


def test_scalar_discretization_closed_form():
    A_bar, B_bar = discretize(np.array([[-1.0]]), np.array([[1.0]]), np.array([[np.log(2.0)]]))
    assert A_bar.data[0, 0, 0] == pytest.approx(0.5, abs=1e-15)
    assert B_bar.data[0, 0, 0] == pytest.approx(0.5, abs=1e-15)


def _unit(seed=0, d_inner=4, d_state=4):
    params = SsmUnitParams(d_inner, d_state, 3, 1, Rng(seed, ("unit",)))
    params.delta_bias.data = Rng(seed, ("bias",)).normal(d_inner)
    return params


def test_s6_forward_matches_a_hand_composition():
    params = _unit()
    x = Rng(1, ("x",)).normal((6, 4))
    A = -np.exp(params.A_log.data)
    B = x @ params.W_B.data
    C = x @ params.W_C.data
    delta = np.log1p(np.exp(x @ params.W_delta_down.data @ params.W_delta_up.data + params.delta_bias.data))
    z = delta[:, :, None] * A[None]
    A_bar = np.exp(z)
    B_bar = np.expm1(z) / z * delta[:, :, None] * B[:, None, :]
    expected = _scan_oracle(x, A_bar, B_bar, C)
    actual = s6_forward(nx.Tensor(x), params, state_matrix(params.A_log)).data
    np.testing.assert_allclose(actual, expected, rtol=0, atol=1e-10)


def test_s6_forward_of_zero_input_is_zero():
    params = _unit(seed=2)
    y = s6_forward(nx.Tensor(np.zeros((5, 4))), params, state_matrix(params.A_log))
    np.testing.assert_array_equal(y.data, np.zeros((5, 4)))
