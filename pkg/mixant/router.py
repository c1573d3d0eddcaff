"""
Per-sequence routing of the forget-gate matrix A.

A mixture unit keeps E expert A matrices. A gating vector is computed from the mean of
the observed block input, the arg-max expert is used for the whole sequence, and the
soft gates feed the batch-level load-balancing loss.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from mixant import numerics as nx
from mixant.errors import RoutingError
from mixant.module import Module, uniform_init
from mixant.numerics import Parameter, Rng, Tensor, as_tensor
from mixant.ssm import s4d_real_log, state_matrix


ROUTER_MODES = ("unified", "independent")


class ExpertBank(Module):
    """
    E expert A matrices for one directional unit, each parameterized as -exp(A_log).

    Experts start from the same S4D-real matrix rescaled by powers of two centered on
    1, so E=1 starts exactly at the plain unit's A.
    """

    def __init__(self, n_experts: int, d_inner: int, d_state: int):
        if n_experts < 1:
            raise RoutingError(f"need at least one expert, got {n_experts}")
        offsets = np.log(2.0) * (np.arange(n_experts) - (n_experts - 1) / 2.0)
        self.A_log_bank = Parameter(s4d_real_log(d_inner, d_state)[None] + offsets[:, None, None], decay=False)

    @property
    def n_experts(self) -> int:
        return self.A_log_bank.shape[0]

    def expert(self, index: int) -> Tensor:
        return state_matrix(self.A_log_bank[index])


class RouterState(Module):
    """Gating projection(s). Independent mode keeps a second projection for the backward unit."""

    def __init__(self, d_model: int, n_experts: int, mode: str, rng: Rng):
        if mode not in ROUTER_MODES:
            raise RoutingError(f"router mode must be one of {ROUTER_MODES}, got {mode!r}")
        self.mode = mode
        self.W_g = Parameter(uniform_init(rng.child("W_g"), (d_model, n_experts), d_model))
        self.W_g_bwd = (
            Parameter(uniform_init(rng.child("W_g_bwd"), (d_model, n_experts), d_model))
            if mode == "independent"
            else None
        )


@dataclass
class RoutingDecision:
    A_fwd: Tensor
    A_bwd: Tensor
    gate: Tensor
    index: int
    gate_bwd: Optional[Tensor] = None
    index_bwd: Optional[int] = None

    @property
    def gates(self) -> List[Tensor]:
        return [self.gate] if self.gate_bwd is None else [self.gate, self.gate_bwd]


@dataclass(frozen=True)
class SelectionMatrix:
    """One row per mixture block, a single 1 in the column of the chosen expert."""

    matrix: np.ndarray

    @property
    def n_blocks(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_experts(self) -> int:
        return self.matrix.shape[1]

    def flatten(self) -> np.ndarray:
        return self.matrix.reshape(-1)


def compute_gating(x_obs, W_g) -> Tensor:
    """gamma = softmax(mean over time of x_obs, projected by W_g)."""
    x_obs = as_tensor(x_obs)
    if x_obs.ndim != 2 or x_obs.shape[0] == 0:
        raise RoutingError(f"gating needs a [P, D] input with P >= 1, got {x_obs.shape}")
    return nx.softmax(nx.linear(nx.mean(x_obs, axis=0), W_g))


def select_expert(gate: Union[Tensor, np.ndarray]) -> int:
    """Arg-max of the gate; ties go to the lowest index. No gradient flows through it."""
    values = gate.data if isinstance(gate, Tensor) else np.asarray(gate)
    return int(np.argmax(values))


def _pick(bank: ExpertBank, gate: Tensor, index: int, straight_through: bool) -> Tensor:
    A = bank.expert(index)
    if straight_through:
        chosen = gate[index]
        # value is exactly 1.0; the gradient reaches the gate
        A = A * ((chosen - nx.detach(chosen)) + 1.0)
    return A


def route(
    x_obs,
    fwd_bank: ExpertBank,
    bwd_bank: ExpertBank,
    router: RouterState,
    straight_through: bool = False,
) -> RoutingDecision:
    """
    Unified mode: one gate picks the same expert slot in both banks. Independent mode:
    each direction has its own projection and pick; both see the un-flipped input.
    """
    n_experts = router.W_g.shape[1]
    if fwd_bank.n_experts != n_experts or bwd_bank.n_experts != n_experts:
        raise RoutingError(
            f"router has {n_experts} experts, banks have {fwd_bank.n_experts} and {bwd_bank.n_experts}"
        )
    gate = compute_gating(x_obs, router.W_g)
    index = select_expert(gate)
    if router.mode == "unified":
        return RoutingDecision(
            A_fwd=_pick(fwd_bank, gate, index, straight_through),
            A_bwd=_pick(bwd_bank, gate, index, straight_through),
            gate=gate,
            index=index,
        )
    gate_bwd = compute_gating(x_obs, router.W_g_bwd)
    index_bwd = select_expert(gate_bwd)
    return RoutingDecision(
        A_fwd=_pick(fwd_bank, gate, index, straight_through),
        A_bwd=_pick(bwd_bank, gate_bwd, index_bwd, straight_through),
        gate=gate,
        index=index,
        gate_bwd=gate_bwd,
        index_bwd=index_bwd,
    )


def accumulate_usage(gates: Union[Tensor, Sequence[Tensor]]) -> Tensor:
    """Soft usage C_e = sum over the batch of gamma_e."""
    batch = nx.stack(gates, axis=0) if isinstance(gates, (list, tuple)) else as_tensor(gates)
    if batch.ndim != 2:
        raise RoutingError(f"usage needs a [B, E] batch of gates, got {batch.shape}")
    return nx.tsum(batch, axis=0)


def load_balance_loss(usages: Sequence) -> Tensor:
    """Sum over mixture layers of KL(C / sum(C) || Uniform(E)), with 0 log 0 = 0."""
    if len(usages) == 0:
        raise RoutingError("load balancing needs at least one mixture layer")
    total = None
    for usage in usages:
        usage = as_tensor(usage)
        if usage.data.sum() <= 0:
            raise RoutingError("expert usage must have a positive total")
        n_experts = usage.shape[-1]
        share = usage / nx.tsum(usage)
        # sum p log(p E) == sum xlogx(p E) / E
        kl = nx.tsum(nx.xlogx(share * float(n_experts))) / float(n_experts)
        total = kl if total is None else total + kl
    return total


def hard_usage(indices_per_sequence: Sequence[Sequence[int]], n_experts: int) -> np.ndarray:
    """Counts of hard selections, one row per mixture layer."""
    indices = np.asarray(indices_per_sequence, dtype=np.int64)
    if indices.size == 0:
        return np.zeros((0, n_experts), dtype=np.int64)
    counts = np.zeros((indices.shape[1], n_experts), dtype=np.int64)
    for layer in range(indices.shape[1]):
        counts[layer] = np.bincount(indices[:, layer], minlength=n_experts)
    return counts


def usage_kl(counts: np.ndarray) -> float:
    """Mean over layers of KL(count histogram || Uniform(E)); empty layers are skipped."""
    counts = np.asarray(counts, dtype=np.float64)
    values = []
    for row in counts:
        total = row.sum()
        if total <= 0:
            continue
        share = row / total
        nonzero = share > 0
        values.append(float(np.sum(share[nonzero] * np.log(share[nonzero] * row.size))))
    return float(np.mean(values)) if values else 0.0


def record_selection(indices: Sequence[int], n_experts: int) -> SelectionMatrix:
    matrix = np.zeros((len(indices), n_experts), dtype=np.int8)
    for row, index in enumerate(indices):
        if not 0 <= index < n_experts:
            raise RoutingError(f"expert index {index} out of range for {n_experts} experts")
        matrix[row, index] = 1
    return SelectionMatrix(matrix)
