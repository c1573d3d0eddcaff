"""
The MixANT denoiser: K residual blocks over a bidirectional Mamba layer whose forget
gates are routed per sequence in every block from K0 on.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from mixant import numerics as nx
from mixant.config import ModelConfig
from mixant.diffusion import Anticipation, ConditioningTensor, DiffusionSchedule, ddim_sample
from mixant.errors import ShapeError
from mixant.module import LayerNorm, Linear, Mlp, Module
from mixant.numerics import DTYPES, Rng, Tensor, as_tensor, no_grad
from mixant.router import ExpertBank, RouterState, RoutingDecision, route
from mixant.ssm import SsmUnitParams, s6_forward, state_matrix



def timestep_embedding(t: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal embedding of the diffusion step: [sin(t w_i), cos(t w_i)]."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    args = float(t) * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb.astype(dtype)


class MixMambaLayer(Module):
    """
    Bidirectional Mamba layer.

    The input is projected to D_inner and fed to a forward unit and, time-reversed, to a
    backward unit; both outputs are gated by SiLU of a second projection and summed.
    With `mixture=True` each unit takes its A from an expert bank through the router
    instead of owning one.
    """

    def __init__(self, config: ModelConfig, rng: Rng, mixture: bool):
        d, di, n = config.d_model, config.d_inner, config.d_state
        self.in_proj = Linear(d, di, rng.child("in_proj"))
        self.gate_proj = Linear(d, di, rng.child("gate_proj"))
        self.fwd = SsmUnitParams(di, n, config.conv_width, config.delta_rank, rng.child("fwd"), with_A_log=not mixture)
        self.bwd = SsmUnitParams(di, n, config.conv_width, config.delta_rank, rng.child("bwd"), with_A_log=not mixture)
        self.out_proj = Linear(di, d, rng.child("out_proj"))
        if mixture:
            self.fwd_bank = ExpertBank(config.n_experts, di, n)
            self.bwd_bank = ExpertBank(config.n_experts, di, n)
            self.router = RouterState(d, config.n_experts, config.router_mode, rng.child("router"))
        else:
            self.fwd_bank = self.bwd_bank = self.router = None
        self.discretization = config.discretization
        self.gate_conditioning = config.gate_conditioning
        self.straight_through = config.straight_through

    @property
    def is_mixture(self) -> bool:
        return self.router is not None

    def __call__(self, x: Tensor, observed: int) -> Tuple[Tensor, Optional[RoutingDecision]]:
        steps = x.shape[0]
        if not 1 <= observed <= steps:
            raise ShapeError(f"observed length {observed} outside [1, {steps}]")
        u = self.in_proj(x)
        u_fwd = nx.silu(nx.conv1d_causal(u, self.fwd.conv_kernel))
        u_bwd = nx.silu(nx.conv1d_causal(nx.flip(u), self.bwd.conv_kernel))

        decision = None
        if self.is_mixture:
            gate_input = x[:observed] if self.gate_conditioning == "observed" else x
            decision = route(gate_input, self.fwd_bank, self.bwd_bank, self.router, self.straight_through)
            A_fwd, A_bwd = decision.A_fwd, decision.A_bwd
        else:
            A_fwd, A_bwd = state_matrix(self.fwd.A_log), state_matrix(self.bwd.A_log)

        w = s6_forward(u_fwd, self.fwd, A_fwd, self.discretization)
        b = nx.flip(s6_forward(u_bwd, self.bwd, A_bwd, self.discretization))
        r = nx.silu(self.gate_proj(x))
        return self.out_proj(w * r + b * r), decision


class MixAntBlock(Module):
    """x + MLP(layer(LayerNorm(x)))."""

    def __init__(self, config: ModelConfig, rng: Rng, mixture: bool):
        self.norm = LayerNorm(config.d_model, config.ln_eps)
        self.layer = MixMambaLayer(config, rng.child("layer"), mixture)
        self.mlp = Mlp(config.d_model, config.mlp_ratio, rng.child("mlp"))

    def __call__(self, x: Tensor, observed: int) -> Tuple[Tensor, Optional[RoutingDecision]]:
        h, decision = self.layer(self.norm(x), observed)
        return x + self.mlp(h), decision


@dataclass
class ForwardResult:
    prediction: Tensor
    decisions: List[RoutingDecision] = field(default_factory=list)

    @property
    def gates(self) -> List[Tensor]:
        """Soft gates in usage-slot order: per mixture block, forward then (independent mode) backward."""
        return [gate for decision in self.decisions for gate in decision.gates]

    @property
    def selections(self) -> List[int]:
        """Forward-unit expert index per mixture block."""
        return [decision.index for decision in self.decisions]

    @property
    def slot_selections(self) -> List[int]:
        indices = []
        for decision in self.decisions:
            indices.append(decision.index)
            if decision.index_bwd is not None:
                indices.append(decision.index_bwd)
        return indices


class MixAntModel(Module):
    """
    Maps (noisy segmentation Y_t, conditioning X, step t) to a prediction of the clean
    segmentation Y_0, shape [P + F, n_classes].

    Parameters are drawn from streams keyed by their own names, so two configurations
    that differ only in parts of the network share every common initial value.
    """

    def __init__(self, config: ModelConfig, seed: Optional[int] = None):
        self.config = config
        rng = Rng(config.seed if seed is None else seed, ("model",))
        self.embed = Linear(config.n_classes + config.n_features, config.d_model, rng.child("embed"))
        self.step_proj = Linear(config.d_model, config.d_model, rng.child("step_proj"))
        self.blocks = [
            MixAntBlock(config, rng.child("blocks", k), mixture=k >= config.n_static_blocks)
            for k in range(config.n_blocks)
        ]
        self.head = Linear(config.d_model, config.n_classes, rng.child("head"))
        for name, param in self.named_parameters():
            param.name = name
        self.cast(DTYPES[config.dtype])

    @property
    def dtype(self):
        return DTYPES[self.config.dtype]

    @property
    def mixture_blocks(self) -> List[MixAntBlock]:
        return [block for block in self.blocks if block.layer.is_mixture]

    @property
    def n_usage_slots(self) -> int:
        per_block = 2 if self.config.router_mode == "independent" else 1
        return per_block * self.config.n_mixture_blocks

    def __call__(self, y_t, cond: ConditioningTensor, t: int) -> ForwardResult:
        y_t, features = as_tensor(y_t), as_tensor(cond.features)
        n_c, n_d = self.config.n_classes, self.config.n_features
        if features.shape != (cond.length, n_d):
            raise ShapeError(f"conditioning must be [{cond.length}, {n_d}], got {features.shape}")
        if y_t.shape != (cond.length, n_c):
            raise ShapeError(f"noisy segmentation must be [{cond.length}, {n_c}], got {y_t.shape}")

        step = Tensor(timestep_embedding(t, self.config.d_model, self.dtype))
        h = self.embed(nx.concat([y_t, features], axis=1)) + self.step_proj(step)
        decisions = []
        for block in self.blocks:
            h, decision = block(h, cond.observed)
            if decision is not None:
                decisions.append(decision)
        return ForwardResult(self.head(h), decisions)


class Denoiser:
    """x0-predictor view of a model for the sampler; remembers the result of the last call."""

    def __init__(self, model: MixAntModel):
        self.model = model
        self.last: Optional[ForwardResult] = None

    def __call__(self, y_t: np.ndarray, cond: ConditioningTensor, t: int) -> np.ndarray:
        with no_grad():
            result = self.model(Tensor(np.asarray(y_t, dtype=self.model.dtype)), cond, t)
        self.last = result
        return result.prediction.data


class DiffusionAnticipator:
    """Draws anticipated segmentations from a trained model with DDIM."""

    def __init__(self, model: MixAntModel, schedule: Optional[DiffusionSchedule] = None, ddim_steps: Optional[int] = None):
        self.model = model
        self.schedule = schedule or DiffusionSchedule.from_config(model.config)
        self.ddim_steps = ddim_steps or self.schedule.ddim_steps

    @property
    def n_experts(self) -> int:
        return self.model.config.n_experts

    def sample(self, cond: ConditioningTensor, rng: Rng) -> Anticipation:
        denoiser = Denoiser(self.model)
        scores = ddim_sample(denoiser, cond, self.schedule, self.ddim_steps, rng, self.model.config.n_classes)
        # routing of the final denoising call is what the sample is attributed to
        return Anticipation(scores, denoiser.last.selections if denoiser.last else [])
