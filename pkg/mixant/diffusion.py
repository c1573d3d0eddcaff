"""
Diffusion framing of dense anticipation: conditioning construction, linear-beta
forward noising, the x0 reconstruction objective and deterministic DDIM sampling.
"""
from dataclasses import dataclass, field
from typing import Callable, List

import numpy as np

from mixant import numerics as nx
from mixant.errors import ConfigError, ScheduleError, ShapeError
from mixant.numerics import Rng, Tensor, as_tensor


@dataclass(frozen=True)
class ConditioningTensor:
    """Observed features followed by `horizon` all-zero rows."""

    features: np.ndarray
    observed: int
    horizon: int

    @property
    def length(self) -> int:
        return self.observed + self.horizon


@dataclass
class Anticipation:
    """Class scores of one sampled segmentation and the expert picks behind it."""

    scores: np.ndarray
    selections: List[int] = field(default_factory=list)


def build_conditioning(features: np.ndarray, horizon: int) -> ConditioningTensor:
    features = np.asarray(features)
    if not np.issubdtype(features.dtype, np.floating):
        features = features.astype(np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ShapeError(f"conditioning needs at least one observed frame of shape [P, n_d], got {features.shape}")
    if horizon < 0:
        raise ShapeError(f"anticipation horizon must be non-negative, got {horizon}")
    padding = np.zeros((horizon, features.shape[1]), dtype=features.dtype)
    return ConditioningTensor(np.concatenate([features, padding], axis=0), features.shape[0], horizon)


def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out


class DiffusionSchedule:
    """
    Linear beta schedule over steps t = 1..T with alpha_bar_t = prod_{s<=t}(1 - beta_s)
    and alpha_bar_0 = 1.
    """

    def __init__(self, steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02, ddim_steps: int = 50):
        if steps < 1:
            raise ScheduleError(f"need at least one diffusion step, got {steps}")
        if not 0 < beta_start <= beta_end < 1:
            raise ScheduleError(f"betas must satisfy 0 < start <= end < 1, got {beta_start}, {beta_end}")
        if not 1 <= ddim_steps <= steps:
            raise ScheduleError(f"ddim_steps must lie in [1, {steps}], got {ddim_steps}")
        self.steps = steps
        self.ddim_steps = ddim_steps
        self.betas = np.linspace(beta_start, beta_end, steps)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.concatenate([[1.0], np.cumprod(self.alphas)])

    @classmethod
    def from_config(cls, config) -> "DiffusionSchedule":
        return cls(config.diffusion_steps, config.beta_start, config.beta_end, config.ddim_steps)

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.steps:
            raise ScheduleError(f"diffusion step {t} outside [0, {self.steps}]")
        return float(self.alpha_bars[t])

    def ddim_timesteps(self, num_steps: int) -> np.ndarray:
        """Uniformly spaced, strictly decreasing steps from T down to 0 (num_steps updates)."""
        if not 1 <= num_steps <= self.steps:
            raise ScheduleError(f"DDIM needs between 1 and {self.steps} steps, got {num_steps}")
        return np.round(np.linspace(self.steps, 0, num_steps + 1)).astype(np.int64)


def forward_diffuse(y0: np.ndarray, t: int, noise: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Y_t = sqrt(alpha_bar_t) Y_0 + sqrt(1 - alpha_bar_t) eps."""
    alpha_bar = schedule.alpha_bar(t)
    if np.shape(noise) != np.shape(y0):
        raise ShapeError(f"noise shape {np.shape(noise)} differs from target {np.shape(y0)}")
    return np.sqrt(alpha_bar) * y0 + np.sqrt(1.0 - alpha_bar) * noise


Denoise = Callable[[np.ndarray, ConditioningTensor, int], np.ndarray]


def ddim_sample(
    denoise: Denoise,
    cond: ConditioningTensor,
    schedule: DiffusionSchedule,
    num_steps: int,
    rng: Rng,
    n_classes: int,
) -> np.ndarray:
    """
    Deterministic (eta = 0) DDIM from Y_T ~ N(0, I). `denoise(y_t, cond, t)` predicts
    x0; the returned array is the final x0 prediction, shape [P + F, n_classes].
    """
    timesteps = schedule.ddim_timesteps(num_steps)
    y = rng.normal((cond.length, n_classes))
    x0 = None
    for t, t_next in zip(timesteps[:-1], timesteps[1:]):
        x0 = np.asarray(denoise(y, cond, int(t)))
        if t_next == 0:
            break
        alpha_bar, alpha_bar_next = schedule.alpha_bar(int(t)), schedule.alpha_bar(int(t_next))
        eps = (y - np.sqrt(alpha_bar) * x0) / np.sqrt(1.0 - alpha_bar)
        y = np.sqrt(alpha_bar_next) * x0 + np.sqrt(1.0 - alpha_bar_next) * eps
    return x0


def reconstruction_loss(target, prediction) -> Tensor:
    """Mean squared error over every frame and class."""
    target, prediction = as_tensor(target), as_tensor(prediction)
    if target.shape != prediction.shape:
        raise ShapeError(f"loss shape mismatch: {target.shape} vs {prediction.shape}")
    return nx.mean(nx.square(prediction - target))


def total_loss(rec_loss, lb_loss, lambda_lb: float) -> Tensor:
    """(1 - lambda) L_rec + lambda L_lb."""
    if not 0 <= lambda_lb < 1:
        raise ConfigError(f"lambda_lb must lie in [0, 1), got {lambda_lb}")
    return as_tensor(rec_loss) * (1.0 - lambda_lb) + as_tensor(lb_loss) * lambda_lb
