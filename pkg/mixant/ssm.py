"""
Selective state-space unit: zero-order-hold discretization of a diagonal negative A
and the input-dependent sequential scan.

Shapes: x [T, D], A [D, N], B(x) and C(x) [T, N], Delta(x) [T, D], discretized
A_bar / B_bar [T, D, N].
"""
from typing import Tuple

import numpy as np

from mixant import numerics as nx
from mixant.errors import DiscretizationError, ShapeError
from mixant.module import Module, uniform_init
from mixant.numerics import Parameter, Rng, Tensor, as_tensor, record_op


# Below this |Delta*A| the ZOH input gain is replaced by its series limit.
SERIES_LIMIT = 1e-8


def s4d_real_log(d_inner: int, d_state: int) -> np.ndarray:
    """A_log with A = -(n) over state index n = 1..N, the same for every channel."""
    return np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1)))


def delta_bias_init(rng: Rng, d_inner: int, dt_min: float = 1e-3, dt_max: float = 1e-1) -> np.ndarray:
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), d_inner))
    # inverse softplus, so softplus(bias) == dt
    return dt + np.log(-np.expm1(-dt))


class SsmUnitParams(Module):
    """
    Parameters of one directional unit. `A_log` is absent when the unit's A comes
    from an expert bank.
    """

    def __init__(self, d_inner: int, d_state: int, conv_width: int, rank: int, rng: Rng, with_A_log: bool = True):
        self.A_log = Parameter(s4d_real_log(d_inner, d_state), decay=False) if with_A_log else None
        self.W_B = Parameter(uniform_init(rng.child("W_B"), (d_inner, d_state), d_inner))
        self.W_C = Parameter(uniform_init(rng.child("W_C"), (d_inner, d_state), d_inner))
        self.W_delta_down = Parameter(uniform_init(rng.child("W_delta_down"), (d_inner, rank), d_inner))
        self.W_delta_up = Parameter(uniform_init(rng.child("W_delta_up"), (rank, d_inner), rank))
        self.delta_bias = Parameter(delta_bias_init(rng.child("delta_bias"), d_inner), decay=False)
        self.conv_kernel = Parameter(uniform_init(rng.child("conv_kernel"), (conv_width, d_inner), conv_width))


def state_matrix(A_log: Tensor) -> Tensor:
    """A = -exp(A_log), strictly negative."""
    return nx.neg(nx.exp(A_log))


def _phi1(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z, with the series limit 1 near zero."""
    small = np.abs(z) < SERIES_LIMIT
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0, np.expm1(safe) / safe)


def _phi1_grad(z: np.ndarray) -> np.ndarray:
    small = np.abs(z) < 1e-4
    safe = np.where(small, 1.0, z)
    exact = (safe * np.exp(safe) - np.expm1(safe)) / (safe * safe)
    return np.where(small, 0.5 + z / 3.0 + z * z / 8.0, exact)


def _state_transition(A: Tensor, delta: Tensor) -> Tensor:
    out = np.exp(delta.data[:, :, None] * A.data[None])

    def backward(g):
        gz = g * out
        return (gz * delta.data[:, :, None]).sum(axis=0), (gz * A.data[None]).sum(axis=-1)

    return record_op("discretize_A", out, (A, delta), backward)


def _input_gain(A: Tensor, B_t: Tensor, delta: Tensor, method: str) -> Tensor:
    scaled = delta.data[:, :, None] * B_t.data[:, None, :]
    if method == "euler":
        def backward(g):
            return (
                np.zeros_like(A.data),
                (g * delta.data[:, :, None]).sum(axis=1),
                (g * B_t.data[:, None, :]).sum(axis=-1),
            )

        return record_op("discretize_B", scaled, (A, B_t, delta), backward)

    out = _phi1(delta.data[:, :, None] * A.data[None]) * scaled

    def backward(g):
        z = delta.data[:, :, None] * A.data[None]
        q = _phi1(z)
        dq = _phi1_grad(z)
        d_scaled = delta.data[:, :, None] * B_t.data[:, None, :]
        gA = (g * dq * delta.data[:, :, None] * d_scaled).sum(axis=0)
        gB = (g * q * delta.data[:, :, None]).sum(axis=1)
        g_delta = (g * (q * B_t.data[:, None, :] + dq * A.data[None] * d_scaled)).sum(axis=-1)
        return gA, gB, g_delta

    return record_op("discretize_B", out, (A, B_t, delta), backward)


def discretize(A, B_t, delta, method: str = "zoh") -> Tuple[Tensor, Tensor]:
    """
    A_bar = exp(Delta A); B_bar = (Delta A)^-1 (exp(Delta A) - 1) Delta B for "zoh",
    or Delta B for "euler". A is diagonal per (channel, state), so every inverse is
    elementwise.
    """
    A, B_t, delta = as_tensor(A), as_tensor(B_t), as_tensor(delta)
    if A.ndim != 2 or B_t.ndim != 2 or delta.ndim != 2:
        raise ShapeError(f"discretize expects A [D,N], B [T,N], Delta [T,D]; got {A.shape}, {B_t.shape}, {delta.shape}")
    (d, n), (steps, _) = A.shape, delta.shape
    if B_t.shape != (steps, n) or delta.shape[1] != d:
        raise ShapeError(f"discretize shape mismatch: A {A.shape}, B {B_t.shape}, Delta {delta.shape}")
    if np.any(delta.data <= 0):
        raise DiscretizationError("time steps Delta must be strictly positive")
    if method not in ("zoh", "euler"):
        raise DiscretizationError(f"unknown discretization {method!r}")
    return _state_transition(A, delta), _input_gain(A, B_t, delta, method)


def selective_scan(x, A_bar, B_bar, C_t) -> Tensor:
    """
    h_t = A_bar_t * h_{t-1} + B_bar_t * x_t (x broadcast over states), h_0 = 0;
    y_{t,d} = sum_n C_{t,n} h_{t,d,n}. Runs left to right, linear in T.
    """
    x, A_bar, B_bar, C_t = (as_tensor(v) for v in (x, A_bar, B_bar, C_t))
    if x.ndim != 2 or A_bar.ndim != 3:
        raise ShapeError(f"selective_scan expects x [T,D] and A_bar [T,D,N], got {x.shape} and {A_bar.shape}")
    steps, d = x.shape
    n = A_bar.shape[2]
    if A_bar.shape != (steps, d, n) or B_bar.shape != A_bar.shape or C_t.shape != (steps, n):
        raise ShapeError(
            f"selective_scan shape mismatch: x {x.shape}, A_bar {A_bar.shape}, B_bar {B_bar.shape}, C {C_t.shape}"
        )
    a, b, u, c = A_bar.data, B_bar.data, x.data, C_t.data
    states = np.empty_like(a)
    h = np.zeros((d, n), dtype=a.dtype)
    for t in range(steps):
        h = a[t] * h + b[t] * u[t][:, None]
        states[t] = h
    y = np.einsum("tdn,tn->td", states, c)

    def backward(g):
        gx = np.empty_like(u)
        ga = np.empty_like(a)
        gb = np.empty_like(b)
        gc = np.einsum("td,tdn->tn", g, states)
        carry = np.zeros((d, n), dtype=a.dtype)
        for t in range(steps - 1, -1, -1):
            gh = carry + g[t][:, None] * c[t][None, :]
            ga[t] = gh * states[t - 1] if t > 0 else 0.0
            gb[t] = gh * u[t][:, None]
            gx[t] = (gh * b[t]).sum(axis=-1)
            carry = gh * a[t]
        return gx, ga, gb, gc

    return record_op("selective_scan", y, (x, A_bar, B_bar, C_t), backward)


def s6_forward(x: Tensor, params: SsmUnitParams, A: Tensor, discretization: str = "zoh") -> Tensor:
    """
    S6 on an already convolved and activated input. `A` is the unit's own
    -exp(A_log) for a plain unit, or the router's expert for a mixture unit.
    """
    B_t = nx.linear(x, params.W_B)
    C_t = nx.linear(x, params.W_C)
    delta = nx.softplus(nx.linear(nx.linear(x, params.W_delta_down), params.W_delta_up, params.delta_bias))
    A_bar, B_bar = discretize(A, B_t, delta, discretization)
    return selective_scan(x, A_bar, B_bar, C_t)
