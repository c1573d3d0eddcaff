import math

import numpy as np
import pytest

from mixant import numerics as nx
from mixant.errors import RoutingError
from mixant.numerics import Rng, Tensor, backward
from mixant.router import (
    ExpertBank,
    RouterState,
    accumulate_usage,
    compute_gating,
    hard_usage,
    load_balance_loss,
    record_selection,
    route,
    select_expert,
    usage_kl,
)
from mixant.ssm import s4d_real_log


def test_uniform_usage_has_exactly_zero_loss():
    assert load_balance_loss([Tensor(np.array([3.0, 3.0, 3.0, 3.0]))]).item() == 0.0


def test_collapsed_usage_costs_log_e():
    value = load_balance_loss([Tensor(np.array([1.0, 0.0]))]).item()
    assert abs(value - math.log(2.0)) < 1e-12


def test_loss_sums_over_layers():
    value = load_balance_loss([Tensor(np.array([1.0, 0.0])), Tensor(np.array([0.0, 5.0]))]).item()
    assert abs(value - 2 * math.log(2.0)) < 1e-12


def test_loss_needs_positive_usage():
    with pytest.raises(RoutingError):
        load_balance_loss([Tensor(np.zeros(3))])
    with pytest.raises(RoutingError):
        load_balance_loss([])


def test_usage_is_the_column_sum_of_gates():
    gates = [Tensor(np.array([0.2, 0.8])), Tensor(np.array([0.6, 0.4]))]
    np.testing.assert_allclose(accumulate_usage(gates).data, [0.8, 1.2])


def test_gating_is_a_distribution_over_experts():
    rng = Rng(0, ("gating",))
    gate = compute_gating(rng.normal((5, 4)), rng.normal((4, 3)))
    assert gate.shape == (3,)
    assert abs(gate.data.sum() - 1.0) < 1e-12


def test_gating_needs_an_observed_frame():
    with pytest.raises(RoutingError):
        compute_gating(np.zeros((0, 4)), np.zeros((4, 3)))


def test_ties_go_to_the_lowest_index():
    assert select_expert(np.array([0.4, 0.4, 0.2])) == 0
    assert select_expert(np.array([0.1, 0.45, 0.45])) == 1


def test_bank_is_centered_on_the_plain_matrix():
    single = ExpertBank(1, 3, 4)
    np.testing.assert_array_equal(single.A_log_bank.data[0], s4d_real_log(3, 4))
    bank = ExpertBank(3, 3, 4)
    np.testing.assert_allclose(bank.A_log_bank.data[1], s4d_real_log(3, 4))
    np.testing.assert_allclose(bank.A_log_bank.data[2] - bank.A_log_bank.data[0], 2 * np.log(2.0))


def _router(mode, n_experts=3):
    return (
        ExpertBank(n_experts, 4, 2),
        ExpertBank(n_experts, 4, 2),
        RouterState(6, n_experts, mode, Rng(0, ("router",))),
    )


def test_unified_mode_uses_one_slot_for_both_directions():
    fwd, bwd, router = _router("unified")
    decision = route(Rng(1, ("x",)).normal((5, 6)), fwd, bwd, router)
    assert decision.gate_bwd is None
    np.testing.assert_array_equal(decision.A_fwd.data, -np.exp(fwd.A_log_bank.data[decision.index]))
    np.testing.assert_array_equal(decision.A_bwd.data, -np.exp(bwd.A_log_bank.data[decision.index]))


def test_independent_mode_routes_each_direction():
    fwd, bwd, router = _router("independent")
    decision = route(Rng(1, ("x",)).normal((5, 6)), fwd, bwd, router)
    assert decision.gate_bwd is not None
    assert len(decision.gates) == 2
    np.testing.assert_array_equal(decision.A_bwd.data, -np.exp(bwd.A_log_bank.data[decision.index_bwd]))


def test_unknown_router_mode():
    with pytest.raises(RoutingError):
        RouterState(6, 2, "shared", Rng(0))


def test_hard_selection_blocks_gradient_and_straight_through_passes_it():
    x = Rng(2, ("x",)).normal((5, 6))
    fwd, bwd, router = _router("unified")
    hard = route(x, fwd, bwd, router)
    backward(nx.tsum(hard.A_fwd))
    assert router.W_g.grad is None

    fwd, bwd, router = _router("unified")
    soft = route(x, fwd, bwd, router, straight_through=True)
    np.testing.assert_array_equal(soft.A_fwd.data, hard.A_fwd.data)
    backward(nx.tsum(soft.A_fwd))
    assert np.any(router.W_g.grad != 0)


def test_hard_usage_and_its_kl():
    counts = hard_usage([[0, 1], [1, 1], [2, 1]], 3)
    np.testing.assert_array_equal(counts, [[1, 1, 1], [0, 3, 0]])
    assert abs(usage_kl(counts) - math.log(3.0) / 2) < 1e-12
    assert usage_kl(np.array([[2, 2]])) == 0.0


def test_selection_matrix_has_one_hot_rows():
    matrix = record_selection([2, 0, 1], 3)
    np.testing.assert_array_equal(matrix.matrix, np.eye(3, dtype=np.int8)[[2, 0, 1]])
    assert matrix.flatten().tolist() == [0, 0, 1, 1, 0, 0, 0, 1, 0]
    with pytest.raises(RoutingError):
        record_selection([3], 3)
