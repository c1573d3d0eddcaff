"""Ablation sweeps: train and evaluate one small configuration per axis value and seed."""
import logging
from collections import defaultdict
from typing import Callable, Dict, List, Sequence

import numpy as np
import pandas as pd

from mixant.config import EvalConfig, ModelConfig, build_model_config
from mixant.corpus import Video
from mixant.errors import ConfigError
from mixant.metrics import evaluate
from mixant.model import DiffusionAnticipator
from mixant.training import train

logger = logging.getLogger(__name__)

# axis name -> (ModelConfig field, value parser)
AXES: Dict[str, tuple] = {
    "experts": ("n_experts", int),
    "static": ("n_static_blocks", int),
    "router": ("router_mode", str),
    "lambda_lb": ("lambda_lb", float),
    "gating": ("gate_conditioning", str),
}

DEFAULT_VALUES = {
    "experts": "1,2,3,5,8",
    "static": "0,1,2,3,4,5,6",
    "router": "unified,independent",
    "lambda_lb": "0,0.05,0.1,0.15,0.2,0.25",
    "gating": "observed,full",
}


def parse_values(axis: str, raw: str) -> List:
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    parser: Callable = AXES[axis][1]
    try:
        return [parser(v.strip()) for v in raw.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"bad value list {raw!r} for axis {axis}: {e}") from e


def ablation_drivers(
    axis: str,
    values: Sequence,
    base_config: ModelConfig,
    train_videos: List[Video],
    test_videos: List[Video],
    eval_config: EvalConfig,
    seeds: Sequence[int] = (0,),
) -> pd.DataFrame:
    """
    One row per value and (alpha, beta) of `eval_config` with Top-1/Mean MoC and the
    hard-usage KL to uniform, each averaged over `seeds`.
    """
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    field_name = AXES[axis][0]
    pairs = [(alpha, beta) for alpha in eval_config.alphas for beta in eval_config.betas]
    rows = []
    for value in values:
        config = build_model_config(**{**base_config.model_dump(), field_name: value})
        top1, mean, kl = defaultdict(list), defaultdict(list), []
        for seed in seeds:
            result = train(config, train_videos, seed=seed)
            anticipator = DiffusionAnticipator(result.model, ddim_steps=eval_config.ddim_steps)
            report = evaluate(anticipator, test_videos, eval_config, n_experts=config.n_experts)
            for pair in pairs:
                entry = report.result(*pair)
                top1[pair].append(entry.top1_moc)
                mean[pair].append(entry.mean_moc)
            kl.append(result.usage_kl)
        for alpha, beta in pairs:
            row = {
                "axis": axis,
                "value": value,
                "alpha": alpha,
                "beta": beta,
                "top1_moc": float(np.mean(top1[alpha, beta])),
                "mean_moc": float(np.mean(mean[alpha, beta])),
                "usage_kl": float(np.mean(kl)),
                "seeds": ",".join(str(s) for s in seeds),
            }
            logger.info(
                f"ablation {axis}={value} alpha={alpha} beta={beta}: top-1 {row['top1_moc']:.2f} "
                f"mean {row['mean_moc']:.2f} usage KL {row['usage_kl']:.4f}"
            )
            rows.append(row)
    return pd.DataFrame(rows)
