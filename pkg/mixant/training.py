"""
Training loop, checkpoints and the end-to-end gradient check.

One step builds a single graph over the whole batch: every sequence is cropped to a
random (alpha, beta) window, noised at a uniformly drawn diffusion step and
reconstructed; the batch loss is the mean reconstruction error mixed with the
load-balancing loss over the batch's soft expert usage.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from mixant import numerics as nx
from mixant.config import ModelConfig, build_model_config
from mixant.corpus import Video
from mixant.diffusion import (
    ConditioningTensor,
    DiffusionSchedule,
    build_conditioning,
    forward_diffuse,
    one_hot,
    reconstruction_loss,
    total_loss,
)
from mixant.errors import CheckpointError, ConfigError, NonFiniteError, TrainingDivergedError
from mixant.metrics import window
from mixant.model import MixAntModel
from mixant.numerics import Rng, Tensor, backward, finite_difference_check, zero_grad
from mixant.optim import AdamW
from mixant.router import accumulate_usage, hard_usage, load_balance_loss, usage_kl
from mixant.tensor_io import load_tensor, save_tensor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mixant-checkpoint/1"


@dataclass
class StepStats:
    rec_loss: float
    lb_loss: float
    total_loss: float
    soft_usage: List[np.ndarray] = field(default_factory=list)
    selections: List[List[int]] = field(default_factory=list)


@dataclass
class TrainingResult:
    model: MixAntModel
    history: pd.DataFrame
    final_rec_loss: float
    final_lb_loss: float
    hard_usage: np.ndarray

    @property
    def usage_kl(self) -> float:
        return usage_kl(self.hard_usage)


def sample_window(
    video: Video, alphas: Sequence[float], betas: Sequence[float], rng: Rng, n_classes: int, dtype=np.float64
) -> Tuple[ConditioningTensor, np.ndarray]:
    """Crops a video to P + F frames for a drawn (alpha, beta); returns X and one-hot Y_0."""
    alpha = float(alphas[int(rng.integers(0, len(alphas)))])
    beta = float(betas[int(rng.integers(0, len(betas)))])
    observed, horizon = window(video.n_frames, alpha, beta)
    cond = build_conditioning(video.features[:observed].astype(dtype), horizon)
    return cond, one_hot(video.labels[: observed + horizon], n_classes, dtype)


def batch_loss(
    model: MixAntModel,
    batch: Sequence[Tuple[ConditioningTensor, np.ndarray, int, np.ndarray]],
    schedule: DiffusionSchedule,
    lambda_lb: float,
) -> Tuple[Tensor, Tensor, Tensor, list]:
    """
    Loss over prepared (X, Y_0, t, noise) items. Returns L_total, L_rec, L_lb and the
    forward results.
    """
    rec_losses, results = [], []
    for cond, y0, t, noise in batch:
        result = model(Tensor(forward_diffuse(y0, t, noise, schedule)), cond, t)
        rec_losses.append(reconstruction_loss(y0, result.prediction))
        results.append(result)
    rec = nx.mean(nx.stack(rec_losses))
    slots = len(results[0].gates)
    if slots:
        usages = [accumulate_usage([result.gates[k] for result in results]) for k in range(slots)]
        lb = load_balance_loss(usages)
    else:
        lb = Tensor(np.zeros((), dtype=model.dtype))
    return total_loss(rec, lb, lambda_lb), rec, lb, results


def train_step(
    model: MixAntModel,
    videos: Sequence[Video],
    schedule: DiffusionSchedule,
    optimizer: AdamW,
    rng: Rng,
) -> StepStats:
    config = model.config
    batch = []
    for b, video in enumerate(videos):
        item_rng = rng.child(b)
        cond, y0 = sample_window(video, config.train_alphas, config.train_betas, item_rng, config.n_classes, model.dtype)
        t = int(item_rng.integers(1, schedule.steps + 1))
        batch.append((cond, y0, t, item_rng.normal(y0.shape).astype(model.dtype)))

    zero_grad(optimizer.parameters)
    total, rec, lb, results = batch_loss(model, batch, schedule, config.lambda_lb)
    backward(total)
    for param in optimizer.parameters:
        if param.grad is not None and not np.all(np.isfinite(param.grad)):
            raise NonFiniteError(f"gradient of {param.name} is not finite")
    optimizer.step()

    slots = len(results[0].gates)
    return StepStats(
        rec_loss=rec.item(),
        lb_loss=lb.item(),
        total_loss=total.item(),
        soft_usage=[sum(result.gates[k].data for result in results) for k in range(slots)],
        selections=[result.slot_selections for result in results],
    )


def train(config: ModelConfig, videos: Sequence[Video], seed: Optional[int] = None) -> TrainingResult:
    if not videos:
        raise ConfigError("training needs at least one video")
    seed = config.seed if seed is None else seed
    model = MixAntModel(config, seed=seed)
    schedule = DiffusionSchedule.from_config(config)
    optimizer = AdamW(
        model.parameters(),
        lr=config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2),
        weight_decay=config.weight_decay,
    )
    rng = Rng(seed, ("train",))
    logger.info(
        f"Training {len(model.parameters())} tensors, K={config.n_blocks} K0={config.n_static_blocks} "
        f"E={config.n_experts} on {len(videos)} videos for {config.epochs} epochs"
    )

    history = []
    counts = np.zeros((0, config.n_experts), dtype=np.int64)
    for epoch in range(config.epochs):
        order = rng.child("epoch", epoch).choice(len(videos), size=len(videos), replace=False)
        steps: List[StepStats] = []
        for step, start in enumerate(range(0, len(videos), config.batch_size)):
            batch = [videos[i] for i in order[start: start + config.batch_size]]
            try:
                stats = train_step(model, batch, schedule, optimizer, rng.child("step", epoch, step))
            except NonFiniteError as e:
                logger.error(f"Non-finite value at epoch {epoch} step {step}: {e}")
                raise TrainingDivergedError(f"training diverged at epoch {epoch}, step {step}: {e}") from e
            steps.append(stats)

        selections = [s for stats in steps for s in stats.selections]
        counts = hard_usage(selections, config.n_experts) if selections and selections[0] else counts
        soft = [sum(stats.soft_usage[k] for stats in steps) for k in range(len(steps[0].soft_usage))]
        soft_share = [(usage / usage.sum()).round(4).tolist() for usage in soft]
        row = {
            "epoch": epoch,
            "rec_loss": float(np.mean([s.rec_loss for s in steps])),
            "lb_loss": float(np.mean([s.lb_loss for s in steps])),
            "total_loss": float(np.mean([s.total_loss for s in steps])),
            "usage_kl": usage_kl(counts),
            "soft_usage": json.dumps(soft_share),
            "hard_usage": json.dumps(counts.tolist()),
        }
        history.append(row)
        logger.info(
            f"epoch {epoch}: L_rec {row['rec_loss']:.5f} L_lb {row['lb_loss']:.5f} L_total {row['total_loss']:.5f} "
            f"soft usage {row['soft_usage']} hard usage {row['hard_usage']}"
        )

    last = history[-1]
    return TrainingResult(model, pd.DataFrame(history), last["rec_loss"], last["lb_loss"], counts)


def save_checkpoint(
    model: MixAntModel,
    out_dir: Union[str, Path],
    history: Optional[pd.DataFrame] = None,
    metadata: Optional[Dict] = None,
) -> Path:
    """manifest.json with the config and tensor index, one MXT0 file per parameter, train_log.csv."""
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, param in model.named_parameters():
        relative = f"tensors/{name}.mxt"
        save_tensor(out / relative, param.data)
        tensors[name] = relative
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.model_dump(),
        "tensors": tensors,
        "metadata": metadata or {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if history is not None:
        history.to_csv(out / "train_log.csv", index=False)
    logger.info(f"Saved checkpoint with {len(tensors)} tensors to {out}")
    return out


def read_manifest(ckpt_dir: Union[str, Path]) -> Dict:
    path = Path(ckpt_dir) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint manifest {path}: {e}") from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} manifest")
    return manifest


def load_checkpoint(ckpt_dir: Union[str, Path]) -> MixAntModel:
    manifest = read_manifest(ckpt_dir)
    model = MixAntModel(build_model_config(**manifest["config"]))
    try:
        state = {name: load_tensor(Path(ckpt_dir) / relative) for name, relative in manifest["tensors"].items()}
    except OSError as e:
        raise CheckpointError(f"checkpoint {ckpt_dir} is incomplete: {e}") from e
    model.load_state_dict(state)
    return model


def check_gradients(
    config: ModelConfig,
    frames: int = 8,
    observed: int = 3,
    batch_size: int = 2,
    seed: int = 0,
    step: float = 1e-5,
    max_entries: Optional[int] = None,
) -> float:
    """
    Finite-difference check of the full training loss (reconstruction plus load
    balancing) with every parameter of a freshly initialised 64-bit model.
    Returns the worst relative error.
    """
    # the straight-through path is a surrogate gradient that finite differences cannot see
    config = build_model_config(**{**config.model_dump(), "dtype": "f64", "straight_through": False})
    if not 1 <= observed < frames:
        raise ConfigError(f"observed frames must lie in [1, {frames}), got {observed}")
    model = MixAntModel(config, seed=seed)
    schedule = DiffusionSchedule.from_config(config)
    rng = Rng(seed, ("gradcheck",))
    batch = []
    for b in range(batch_size):
        item_rng = rng.child(b)
        cond = build_conditioning(item_rng.normal((observed, config.n_features)), frames - observed)
        y0 = one_hot(item_rng.integers(0, config.n_classes, frames), config.n_classes)
        t = int(item_rng.integers(1, schedule.steps + 1))
        batch.append((cond, y0, t, item_rng.normal(y0.shape)))

    def loss():
        return batch_loss(model, batch, schedule, config.lambda_lb)[0]

    error = finite_difference_check(loss, model.parameters(), step=step, max_entries=max_entries, seed=seed)
    logger.info(f"Gradient check over {len(model.parameters())} tensors: max relative error {error:.3e}")
    return error
