import json
import logging
import math
from pathlib import Path
from typing import List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from mixant.errors import ConfigError

logger = logging.getLogger(__name__)


class ModelConfig(BaseModel):
    """Architecture, diffusion and training hyperparameters of one MixANT run."""

    model_config = ConfigDict(extra="forbid")

    # Data shape
    n_classes: int = Field(8, ge=1)
    n_features: int = Field(16, ge=1)

    # Architecture
    d_model: int = Field(64, ge=1)
    expand: int = Field(2, ge=1)
    d_state: int = Field(16, ge=1)
    conv_width: int = Field(4, ge=1)
    dt_rank: Optional[int] = Field(None, ge=1)
    n_blocks: int = Field(15, ge=1)
    n_static_blocks: int = Field(3, ge=0)
    n_experts: int = Field(5, ge=1)
    router_mode: Literal["unified", "independent"] = "unified"
    gate_conditioning: Literal["observed", "full"] = "observed"
    straight_through: bool = False
    discretization: Literal["zoh", "euler"] = "zoh"
    mlp_ratio: int = Field(4, ge=1)
    ln_eps: float = Field(1e-5, gt=0)

    # Diffusion
    diffusion_steps: int = Field(1000, ge=1)
    beta_start: float = Field(1e-4, gt=0, lt=1)
    beta_end: float = Field(0.02, gt=0, lt=1)
    ddim_steps: int = Field(50, ge=1)

    # Training
    lambda_lb: float = Field(0.15, ge=0, lt=1)
    learning_rate: float = Field(5e-4, gt=0)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    weight_decay: float = Field(0.01, ge=0)
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(8, ge=1)
    seed: int = Field(0, ge=0)
    split_seed: int = Field(42, ge=0)
    test_fraction: float = Field(0.2, gt=0, lt=1)
    dtype: Literal["f32", "f64"] = "f64"
    train_alphas: List[float] = Field(default_factory=lambda: [0.2, 0.3])
    train_betas: List[float] = Field(default_factory=lambda: [0.1, 0.2, 0.3, 0.5])

    @model_validator(mode="after")
    def _check_consistency(self):
        if self.n_static_blocks > self.n_blocks:
            raise ValueError(f"n_static_blocks ({self.n_static_blocks}) exceeds n_blocks ({self.n_blocks})")
        if self.beta_end < self.beta_start:
            raise ValueError("beta_end must not be smaller than beta_start")
        if self.ddim_steps > self.diffusion_steps:
            raise ValueError("ddim_steps cannot exceed diffusion_steps")
        if not self.train_alphas or not self.train_betas:
            raise ValueError("train_alphas and train_betas must be non-empty")
        for ratio in self.train_alphas + self.train_betas:
            if not 0 < ratio < 1:
                raise ValueError(f"observation/anticipation ratios must lie in (0, 1), got {ratio}")
        # every drawn training window must fit inside its video
        for alpha in self.train_alphas:
            for beta in self.train_betas:
                if alpha + beta > 1:
                    raise ValueError(f"training ratio pair alpha={alpha}, beta={beta} exceeds the video")
        return self

    @property
    def d_inner(self) -> int:
        return self.d_model * self.expand

    @property
    def delta_rank(self) -> int:
        return self.dt_rank if self.dt_rank is not None else max(1, math.ceil(self.d_inner / 16))

    @property
    def n_mixture_blocks(self) -> int:
        return self.n_blocks - self.n_static_blocks


class EvalConfig(BaseModel):
    """Observation/anticipation grid and sampling budget of an evaluation."""

    model_config = ConfigDict(extra="forbid")

    alphas: List[float] = Field(default_factory=lambda: [0.2, 0.3])
    betas: List[float] = Field(default_factory=lambda: [0.1, 0.2, 0.3, 0.5])
    samples: int = Field(25, ge=1)
    ddim_steps: Optional[int] = Field(None, ge=1)
    seed: int = Field(0, ge=0)
    n_jobs: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_ratios(self):
        if not self.alphas or not self.betas:
            raise ValueError("alphas and betas must be non-empty")
        for alpha in self.alphas:
            for beta in self.betas:
                if not (0 < alpha < 1 and 0 < beta < 1 and alpha + beta <= 1):
                    raise ValueError(f"invalid ratio pair alpha={alpha}, beta={beta}")
        return self


def build_model_config(**overrides) -> ModelConfig:
    try:
        return ModelConfig(**overrides)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load_model_config(path: Union[str, Path]) -> ModelConfig:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    logger.info(f"Loaded model config from {path}")
    return build_model_config(**payload)


def load_eval_config(path: Union[str, Path]) -> EvalConfig:
    try:
        return EvalConfig(**json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, ValidationError) as e:
        raise ConfigError(f"cannot read eval config {path}: {e}") from e
